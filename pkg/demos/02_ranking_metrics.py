"""How the ranking metrics behave on tiny hand-made examples.

    python demos/02_ranking_metrics.py
"""

from anchorda.metrics import ScoredSet, aggregate, auc_roc, average_precision, ndcg_at_k, precision_at_k, roc_points

# Five records, two engaged users. The model ranks one positive first and
# the other fourth.
s = ScoredSet([0.9, 0.8, 0.7, 0.6, 0.1], [1, 0, 0, 1, 0])
print("AUC", auc_roc(s))               # 4 of 6 positive/negative pairs ordered correctly
print("AP", average_precision(s))      # (1/1 + 2/4) / 2
print("NDCG@3", ndcg_at_k(s, 3))       # only the first positive is inside the cutoff
print("P@3", precision_at_k(s, 3))
print("ROC points", roc_points(s).tolist())

# Equal scores are ordered by record id, so the ranking never depends on
# sort stability.
tied = ScoredSet([0.5, 0.5], [0, 1], ids=[7, 3])
print("tie broken by id -> AP", average_precision(tied))

# Macro averages partners equally; micro pools every record. A large
# partner that is easy to rank lifts micro far more than macro.
big = ScoredSet([0.9] * 50 + [0.1] * 450, [1] * 50 + [0] * 450, partner=1)
small = ScoredSet([0.2, 0.8, 0.3], [1, 0, 0], ids=[900, 901, 902], partner=2)
rep = aggregate([big, small], k=10, metrics=("auc", "ap"))
print("macro", rep.macro)
print("micro", rep.micro)

# A partner with no engaged user cannot contribute AUC or AP; it is left out
# of the macro mean and listed with the reason.
quiet = ScoredSet([0.3, 0.2], [0, 0], ids=[950, 951], partner=3)
rep = aggregate([big, small, quiet], metrics=("auc", "ap", "precision"))
print("included", rep.n_included, "excluded", rep.excluded["auc"])
