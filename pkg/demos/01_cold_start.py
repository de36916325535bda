"""Cold start: can a partner with no campaign history be scored well?

We generate a small synthetic marketplace, train a no-transfer baseline and
a latent-anchored model on the large (head) partners, then score the small
(tail) partners using category features only.

    python demos/01_cold_start.py
"""

import numpy as np

from anchorda.experiment import evaluate
from anchorda.models import TrainConfig, train_base
from anchorda.synth import GeneratorConfig, generate, split_head_tail

# A marketplace of 150 partners whose budgets follow a Zipf law. Every
# impression carries the partner's categories, the user's interests, and
# engagement counts from earlier campaigns (the "source" features).
ds = generate(GeneratorConfig(n_partners=150, n_users=2000, seed=0))
rec = ds.records
split = split_head_tail(rec, ds.profiles)
print(f"{len(rec)} impressions, positive rate {rec.label.mean():.3f}")
print(f"head partners {len(split.head)}, tail-test partners {len(split.test)}")

# Head partners have plenty of history, so their records are used for training.
idx = rec.where(day="train", partners=split.head)
x, y = rec.features()[idx], rec.label[idx].astype(float)

# The baseline sees only the target view (campaign slots zeroed). The
# anchored model additionally pulls its representation of the target view
# towards what a source-feature classifier learned.
cfg = TrainConfig(seed=0)
nt = train_base("nt", rec.schema, x, y, cfg)
lada = train_base("lada", rec.schema, x, y, TrainConfig(seed=0, alpha=0.5))

# Tail partners are scored on the next day with the target view only.
for name, ck in (("no transfer", nt), ("latent anchor", lada)):
    rep = evaluate(ck, ds, split.test, view="target")
    print(f"{name:>14}: macro AUC {rep.macro['auc']:.4f}  macro AP {rep.macro['ap']:.4f}"
          f"  ({rep.n_included['auc']} partners with both classes)")

# A single seed is noisy; the acceptance suite averages ten.
print("per-partner AUC spread (anchored):",
      np.round(np.percentile([v["auc"] for v in evaluate(lada, ds, split.test, "target").per_partner.values()
                              if "auc" in v], [10, 50, 90]), 3))
