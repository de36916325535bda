"""Synthetic campaign logs with Zipf-skewed partner volume.

The generative story, per impression of partner ``p`` shown to user ``u``:

* ``p`` has a multi-hot category vector ``c_p`` and a source model ``M_p``
  equal to a shared linear function of ``c_p`` plus Gaussian noise of scale
  ``partner_noise_scale``. Partners with similar categories therefore have
  similar source features, which is what transfer can exploit.
* ``u`` has latent interests ``z_u`` (one per category) and latent activity
  ``a_u``; only the thresholded interests ``z_u > interest_threshold`` are
  observed, as the user-interest slots.
* Campaign slots are ``log1p`` of Poisson engagement counts with log-rates
  ``M_p @ [z_u, a_u]``.
* The label is Bernoulli with a logistic score made of the campaign slots,
  the user-partner affinity ``c_p . z_u`` and Gaussian noise; the intercept
  is solved for so the positive rate matches ``target_positive_rate``.

Target-domain slots are ``[c_p, interest(u)]``, both binary.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from anchorda.models import FeatureSchema

GENERATOR_VERSION = "1"
DAYS = ("train", "eval")
FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
VALIDATION_SHARE = 37 / 186


class CalibrationError(RuntimeError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class GeneratorConfig:
    n_partners: int = 404
    n_users: int = 5000
    category_dim: int = 8
    campaign_dim: int = 16
    activity_dim: int = 3
    zipf_exponent: float = 0.85
    categories_per_partner: int = 2
    partner_noise_scale: float = 0.5
    label_noise_scale: float = 1.0
    target_positive_rate: float = 0.05
    train_day_impressions: int = 15_000
    eval_day_impressions: int = 50_000
    interest_threshold: float = 0.5
    rate_scale: float = 0.6
    base_log_rate: float = -0.5
    campaign_weight: float = 2.5
    affinity_weight: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_partners", "n_users", "category_dim", "campaign_dim", "activity_dim",
                     "categories_per_partner"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.train_day_impressions < 0 or self.eval_day_impressions < 0:
            raise ValueError("impression counts must be non-negative")
        if self.categories_per_partner > self.category_dim:
            raise ValueError("categories_per_partner exceeds category_dim")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be positive")
        if self.partner_noise_scale < 0 or self.label_noise_scale < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0.0 < self.target_positive_rate < 0.5:
            raise ValueError("target_positive_rate must lie in (0, 0.5)")

    @property
    def schema(self) -> FeatureSchema:
        return FeatureSchema(2 * self.category_dim, self.campaign_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PartnerProfile:
    partner_id: int
    categories: list[int]
    budget_weight: float
    source_coef: np.ndarray  # [campaign_dim x (category_dim + activity_dim)]

    def category_vector(self, dim: int) -> np.ndarray:
        v = np.zeros(dim, dtype=np.int8)
        v[self.categories] = 1
        return v


@dataclass
class Records:
    """Columnar impression log; row ``i`` has record id ``i``."""

    partner: np.ndarray
    user: np.ndarray
    day: np.ndarray  # 0 = train, 1 = eval
    label: np.ndarray
    category: np.ndarray  # int8 [n x schema.category_dim]
    campaign: np.ndarray  # float64 [n x schema.campaign_dim]

    def __len__(self):
        return self.partner.size

    @property
    def schema(self) -> FeatureSchema:
        return FeatureSchema(self.category.shape[1], self.campaign.shape[1])

    def features(self) -> np.ndarray:
        """Source-view feature matrix."""
        return np.hstack([self.category.astype(np.float64), self.campaign])

    def take(self, idx) -> "Records":
        idx = np.asarray(idx, dtype=np.int64)
        return Records(self.partner[idx], self.user[idx], self.day[idx], self.label[idx],
                       self.category[idx], self.campaign[idx])

    def where(self, day=None, partners=None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if day is not None:
            mask &= self.day == DAYS.index(day)
        if partners is not None:
            mask &= np.isin(self.partner, np.asarray(sorted(partners), dtype=np.int64))
        return np.flatnonzero(mask)

    def equals(self, other: "Records") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("partner", "user", "day", "label", "category", "campaign"))

    @classmethod
    def empty(cls, schema: FeatureSchema) -> "Records":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int8), np.zeros(0, np.int8),
                   np.zeros((0, schema.category_dim), np.int8), np.zeros((0, schema.campaign_dim)))


@dataclass
class Dataset:
    config: GeneratorConfig
    profiles: list[PartnerProfile]
    records: Records
    intercept: float = 0.0


@dataclass
class DatasetSplit:
    head: list[int]
    validation: list[int]
    test: list[int]
    head_volume_fraction: float = 0.8
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def _world(cfg: GeneratorConfig):
    """Population-level draws shared by both days."""
    rng = np.random.default_rng([cfg.seed, 0])
    c, a, d = cfg.category_dim, cfg.activity_dim, cfg.campaign_dim
    z = rng.standard_normal((cfg.n_users, c))
    act = rng.standard_normal((cfg.n_users, a))
    # shared map category -> source model; each category drives the counts
    # through the user's interest in that category plus the shared activity
    cat_effect = rng.standard_normal((c, d, c + a)) * 0.35
    for k in range(c):
        cat_effect[k, :, k] += np.abs(rng.standard_normal(d)) + 0.5
    readout = np.abs(rng.standard_normal(d)) + 0.2
    readout /= readout.sum()
    weights = zipf_weights(cfg.n_partners, cfg.zipf_exponent)
    profiles = []
    for p in range(cfg.n_partners):
        prng = np.random.default_rng([cfg.seed, 1, p])
        cats = sorted(prng.choice(c, cfg.categories_per_partner, replace=False).tolist())
        shared = cat_effect[cats].sum(axis=0) / math.sqrt(len(cats))
        coef = shared + cfg.partner_noise_scale * 0.35 * prng.standard_normal(shared.shape)
        profiles.append(PartnerProfile(p, cats, float(weights[p]), coef))
    return profiles, z, act, readout


def _draw_day(cfg, day, profiles, z, act, readout):
    """Unlabelled impressions of one day plus their noisy label scores (intercept excluded)."""
    n_total = cfg.train_day_impressions if day == 0 else cfg.eval_day_impressions
    rng = np.random.default_rng([cfg.seed, 2, day])
    counts = rng.multinomial(n_total, [pr.budget_weight for pr in profiles]) if n_total else np.zeros(len(profiles), int)
    users_feat = np.hstack([z, act])
    interest = (z > cfg.interest_threshold).astype(np.int8)
    parts, users, camps, scores = [], [], [], []
    for pr, n in zip(profiles, counts):
        if n == 0:
            continue
        prng = np.random.default_rng([cfg.seed, 3 + day, pr.partner_id])
        u = prng.integers(0, cfg.n_users, size=n)
        log_rate = cfg.base_log_rate + cfg.rate_scale * users_feat[u] @ pr.source_coef.T
        cnt = prng.poisson(np.exp(np.minimum(log_rate, 6.0)))
        camp = np.log1p(cnt)
        affinity = z[u][:, pr.categories].sum(axis=1) / math.sqrt(len(pr.categories))
        s = (cfg.campaign_weight * (camp @ readout) + cfg.affinity_weight * affinity
             + cfg.label_noise_scale * prng.standard_normal(n))
        parts.append(np.full(n, pr.partner_id, dtype=np.int64))
        users.append(u.astype(np.int64))
        camps.append(camp)
        scores.append(s)
    if not parts:
        return None
    partner = np.concatenate(parts)
    user = np.concatenate(users)
    cat = np.zeros((partner.size, 2 * cfg.category_dim), dtype=np.int8)
    for pr in profiles:
        rows = partner == pr.partner_id
        cat[np.ix_(rows, pr.categories)] = 1
    cat[:, cfg.category_dim:] = interest[user]
    return partner, user, cat, np.vstack(camps), np.concatenate(scores)


def calibrate_intercept(scores: np.ndarray, rate: float) -> float:
    """Intercept ``b`` with ``mean(sigmoid(scores + b)) == rate``."""
    if scores.size == 0:
        return 0.0
    fn = lambda b: float(np.mean(expit(scores + b))) - rate  # noqa: E731
    lo, hi = -60.0, 60.0
    if fn(lo) > 0 or fn(hi) < 0:
        raise CalibrationError(
            f"positive rate {rate} unreachable: rate spans [{fn(lo) + rate:.3g}, {fn(hi) + rate:.3g}]"
        )
    return brentq(fn, lo, hi, xtol=1e-12)


def generate(config: GeneratorConfig) -> Dataset:
    """Profiles and both days of records; deterministic in ``config.seed``."""
    profiles, z, act, readout = _world(config)
    days = [_draw_day(config, d, profiles, z, act, readout) for d in (0, 1)]
    pooled = np.concatenate([d[4] for d in days if d is not None]) if any(d is not None for d in days) else np.zeros(0)
    intercept = calibrate_intercept(pooled, config.target_positive_rate)

    schema = config.schema
    chunks = []
    for day, drawn in enumerate(days):
        if drawn is None:
            continue
        partner, user, cat, camp, s = drawn
        lrng = np.random.default_rng([config.seed, 5, day])
        label = (lrng.random(s.size) < expit(s + intercept)).astype(np.int8)
        chunks.append(Records(partner, user, np.full(partner.size, day, np.int8), label, cat, camp))
    if not chunks:
        records = Records.empty(schema)
    else:
        records = Records(*[np.concatenate([getattr(c, k) for c in chunks])
                            for k in ("partner", "user", "day", "label", "category", "campaign")])
    return Dataset(config, profiles, records, intercept)


def split_head_tail(records: Records, profiles: list[PartnerProfile], head_volume_fraction: float = 0.8,
                    n_validation: int | None = None, seed: int = 0) -> DatasetSplit:
    """Head = smallest budget-ranked prefix holding ``head_volume_fraction`` of train-day volume."""
    if not 0.0 < head_volume_fraction <= 1.0:
        raise ValueError("head_volume_fraction must lie in (0, 1]")
    if len(records) == 0:
        raise ValueError("cannot split an empty record set")
    ranked = sorted(profiles, key=lambda p: (-p.budget_weight, p.partner_id))
    ids = np.array([p.partner_id for p in ranked], dtype=np.int64)
    train = records.partner[records.day == 0]
    volume = np.array([np.count_nonzero(train == i) for i in ids], dtype=np.float64)
    total = volume.sum()
    if total == 0:
        raise ValueError("no train-day impressions")
    if head_volume_fraction >= 1.0:
        n_head = int(np.flatnonzero(volume > 0).max()) + 1
    else:
        cum = np.cumsum(volume)
        n_head = int(np.searchsorted(cum, head_volume_fraction * total - 1e-9 * total)) + 1
    head = sorted(ids[:n_head].tolist())
    tail = ids[n_head:].tolist()
    if n_validation is None:
        n_validation = int(round(len(tail) * VALIDATION_SHARE))
    n_validation = min(max(n_validation, 0), len(tail))
    rng = np.random.default_rng([seed, 7])
    perm = rng.permutation(len(tail))
    validation = sorted(int(tail[i]) for i in perm[:n_validation])
    test = sorted(int(tail[i]) for i in perm[n_validation:])
    return DatasetSplit(head, validation, test, head_volume_fraction,
                        {"head_volume": float(volume[:n_head].sum() / total)})


def sample_fraction(idx, fraction: float, seed: int, partner: int = 0) -> np.ndarray:
    """Nested uniform subsample of ``round(fraction * n)`` entries of ``idx``.

    The permutation depends only on ``(seed, partner)``, so the sample for a
    smaller fraction is always a prefix (hence subset) of a larger one.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    idx = np.asarray(idx, dtype=np.int64)
    m = int(round(fraction * idx.size))
    perm = np.random.default_rng([int(seed), 11, int(partner)]).permutation(idx.size)
    return np.sort(idx[perm[:m]])


def sample_partner_fraction(records: Records, partners, fraction: float, seed: int) -> np.ndarray:
    """Row indices of the train-day fraction sample, drawn per partner."""
    train = records.where(day="train", partners=partners)
    out = [sample_fraction(train[records.partner[train] == p], fraction, seed, p) for p in sorted(partners)]
    return np.sort(np.concatenate(out)) if out else np.zeros(0, np.int64)


def top_share_count(records: Records, share: float = 0.5, day: str = "train") -> int:
    """Fewest partners whose impressions reach ``share`` of the day's volume."""
    part = records.partner[records.day == DAYS.index(day)]
    _, counts = np.unique(part, return_counts=True)
    counts = np.sort(counts)[::-1]
    return int(np.searchsorted(np.cumsum(counts), share * counts.sum() - 1e-9 * counts.sum())) + 1


# ---------------------------------------------------------------------------
# files

RECORD_COLUMNS = ["partner_id", "user_id", "day", "label", "category_idx"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(dataset: Dataset, path) -> Path:
    """Write ``records.txt`` (manifest line + CSV) and ``profiles.json`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rec = dataset.records
    schema = rec.schema
    manifest = {
        "format": "anchorda-records",
        "generator_version": GENERATOR_VERSION,
        "category_dim": schema.category_dim,
        "campaign_dim": schema.campaign_dim,
        "n_records": len(rec),
        "seed": dataset.config.seed,
        "intercept": dataset.intercept,
        "config": dataset.config.to_dict(),
    }
    buf = io.StringIO()
    buf.write("# " + json.dumps(manifest, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS + [f"campaign_{j}" for j in range(schema.campaign_dim)])
    for i in range(len(rec)):
        cats = " ".join(str(j) for j in np.flatnonzero(rec.category[i]))
        w.writerow([int(rec.partner[i]), int(rec.user[i]), DAYS[rec.day[i]], int(rec.label[i]), cats]
                   + [_fmt(v) for v in rec.campaign[i]])
    (path / "records.txt").write_text(buf.getvalue())
    profiles = [
        {"partner_id": p.partner_id, "categories": p.categories, "budget_weight": p.budget_weight,
         "source_coef": p.source_coef.tolist()}
        for p in dataset.profiles
    ]
    (path / "profiles.json").write_text(json.dumps(profiles, sort_keys=True) + "\n")
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    lines = (path / "records.txt").read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise DatasetParseError("missing manifest header", 1)
    try:
        manifest = json.loads(lines[0][2:])
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"bad manifest: {exc}", 1) from exc
    cat_dim, camp_dim = manifest["category_dim"], manifest["campaign_dim"]
    expected_header = RECORD_COLUMNS + [f"campaign_{j}" for j in range(camp_dim)]
    if len(lines) < 2 or next(csv.reader([lines[1]])) != expected_header:
        raise DatasetParseError("column header does not match the manifest", 2)
    body = lines[2:]
    n = len(body)
    if n != manifest["n_records"]:
        raise DatasetParseError(f"manifest declares {manifest['n_records']} records, found {n}", len(lines))
    partner = np.zeros(n, np.int64)
    user = np.zeros(n, np.int64)
    day = np.zeros(n, np.int8)
    label = np.zeros(n, np.int8)
    category = np.zeros((n, cat_dim), np.int8)
    campaign = np.zeros((n, camp_dim))
    for i, row in enumerate(csv.reader(body)):
        lineno = i + 3
        if len(row) != len(expected_header):
            raise DatasetParseError(f"expected {len(expected_header)} fields, got {len(row)}", lineno)
        try:
            partner[i], user[i] = int(row[0]), int(row[1])
            day[i] = DAYS.index(row[2])
            label[i] = int(row[3])
            if label[i] not in (0, 1):
                raise ValueError("label must be 0 or 1")
            if row[4]:
                category[i, [int(t) for t in row[4].split(" ")]] = 1
            campaign[i] = [float(t) for t in row[5:]]
        except (ValueError, IndexError) as exc:
            raise DatasetParseError(str(exc), lineno) from exc
        if np.any(campaign[i] < 0):
            raise DatasetParseError("campaign slots must be non-negative", lineno)
    config = GeneratorConfig.from_dict(manifest["config"])
    raw = json.loads((path / "profiles.json").read_text())
    profiles = [PartnerProfile(p["partner_id"], p["categories"], p["budget_weight"], np.array(p["source_coef"]))
                for p in raw]
    return Dataset(config, profiles, Records(partner, user, day, label, category, campaign), manifest["intercept"])
