"""A tail partner's journey from zero to full campaign history.

A base model trained on head partners is fine-tuned on growing, nested
shares of the tail partners' campaign records. At fraction 0 nothing is
fine-tuned and the model sees the target view; from then on it sees the
source view.

    python demos/03_fraction_journey.py
"""

from anchorda.experiment import evaluate, fraction_xy, view_for
from anchorda.models import TrainConfig, fine_tune, train_base
from anchorda.synth import FRACTIONS, GeneratorConfig, generate, split_head_tail

ds = generate(GeneratorConfig(n_partners=150, n_users=2000, seed=1))
rec = ds.records
split = split_head_tail(rec, ds.profiles)
idx = rec.where(day="train", partners=split.head)
x, y = rec.features()[idx], rec.label[idx].astype(float)

for kind, alpha in (("nt", 1.0), ("iada", 0.5)):
    base = train_base(kind, rec.schema, x, y, TrainConfig(seed=3, alpha=alpha))
    line = []
    for f in FRACTIONS:
        # every fine-tune starts from the same base checkpoint; samples are
        # nested, so the 40% sample contains the 20% sample
        fx, fy = fraction_xy(ds, split.test, f, seed=3)
        ck = fine_tune(base, fx, fy, fraction=f)
        rep = evaluate(ck, ds, split.test, view_for(f), metrics=("auc",))
        line.append(f"{f:.1f}:{rep.macro['auc']:.3f}")
    print(f"{kind:>5} macro AUC by fraction  " + "  ".join(line))
