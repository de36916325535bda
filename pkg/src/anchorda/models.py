"""NT, SDA, IADA and LADA engagement models built from two stacked MLPs.

Every kind predicts ``f(g(x))``. They differ only in what ``g`` is asked to
produce during base training on head partners:

* ``nt``   - nothing beyond the classification loss on target views.
* ``sda``  - the same representation for the source and target view of an
  impression, with classification on both views.
* ``iada`` - an imputation of the observed source features.
* ``lada`` - the hidden layer ``h(x_S)`` of a separately trained source
  classifier (``he`` net), which stays frozen afterwards.

Fine-tuning is the same for all kinds: BCE on ``f(g(x_S))`` with the Adam
state carried over from base training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from anchorda.nn import (
    AdamState,
    DenseNet,
    ShapeError,
    adam_step,
    backward,
    bce_loss,
    forward,
    init_dense_net,
    mse_loss,
)

KINDS = ("nt", "sda", "iada", "lada")

# independent random streams per purpose, so that e.g. LADA's step 1 never
# shifts the draws seen by the joint g/f training
_STREAM_INIT_G = 1
_STREAM_INIT_F = 2
_STREAM_INIT_HE = 3
_STREAM_TRAIN = 4
_STREAM_TRAIN_HE = 5
_STREAM_FINETUNE = 6


class PairingError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    """Column layout: ``category_dim`` target slots, then ``campaign_dim`` source-only slots."""

    category_dim: int
    campaign_dim: int

    def __post_init__(self):
        if self.category_dim <= 0 or self.campaign_dim <= 0:
            raise ValueError("schema dimensions must be positive")

    @property
    def total_dim(self) -> int:
        return self.category_dim + self.campaign_dim

    @property
    def fingerprint(self) -> str:
        key = f"anchorda-schema:category={self.category_dim}:campaign={self.campaign_dim}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def target_view(self, x_source: np.ndarray) -> np.ndarray:
        x = np.array(x_source, dtype=np.float64, copy=True)
        x[:, self.category_dim:] = 0.0
        return x


@dataclass
class TrainConfig:
    alpha: float = 0.8
    learning_rate: float = 0.01
    batch_size: int = 256
    epochs: int = 5
    finetune_epochs: int = 10
    seed: int = 0
    hidden_width: int = 64
    latent_width: int = 64
    dropout: float = 0.5
    prob_eps: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        for name in ("learning_rate", "batch_size", "hidden_width", "latent_width", "prob_eps", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ModelBundle:
    kind: str
    schema: FeatureSchema
    g: DenseNet
    f: DenseNet
    alpha: float
    he: DenseNet | None = None

    def nets(self) -> dict[str, DenseNet]:
        out = {"g": self.g, "f": self.f}
        if self.he is not None:
            out["he"] = self.he
        return out

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.kind, self.schema, self.g.copy(), self.f.copy(), self.alpha,
            None if self.he is None else self.he.copy(),
        )


@dataclass
class Checkpoint:
    bundle: ModelBundle
    optim: dict[str, AdamState]
    config: TrainConfig
    phase: str = "base"
    history: list[float] = field(default_factory=list)

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.bundle.copy(),
            {k: s.copy() for k, s in self.optim.items()},
            replace(self.config),
            self.phase,
            list(self.history),
        )


def _rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *extra])


def build_model(kind: str, schema: FeatureSchema, config: TrainConfig, seed: int | None = None) -> ModelBundle:
    """Initialise g, f (and the LADA ``he`` net) for ``kind``."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    seed = config.seed if seed is None else seed
    d, w = schema.total_dim, config.hidden_width
    g_out = d if kind == "iada" else config.latent_width
    g = init_dense_net([d, w, w, g_out], "identity", config.dropout, _rng(seed, _STREAM_INIT_G))
    f = init_dense_net([g_out, w, w, 1], "logistic", config.dropout, _rng(seed, _STREAM_INIT_F))
    he = None
    if kind == "lada":
        he = init_dense_net([d, config.latent_width, 1], "logistic", config.dropout, _rng(seed, _STREAM_INIT_HE))
    return ModelBundle(kind, schema, g, f, config.alpha, he)


def latent(he: DenseNet, x: np.ndarray) -> np.ndarray:
    """``h(x)``: rectified hidden activations of the one-hidden-layer source classifier."""
    w, b = he.layers[0]
    return np.maximum(np.asarray(x, dtype=np.float64) @ w + b, 0.0)


def _check_pair(schema: FeatureSchema, x_t, x_s, y):
    x_t = np.asarray(x_t, dtype=np.float64)
    x_s = np.asarray(x_s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x_t.shape != x_s.shape or x_t.ndim != 2 or x_t.shape[1] != schema.total_dim:
        raise PairingError(f"views must both be [n x {schema.total_dim}], got {x_t.shape} and {x_s.shape}")
    if y.shape != (x_t.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match batch size {x_t.shape[0]}")
    c = schema.category_dim
    if np.any(x_t[:, c:] != 0.0) or not np.array_equal(x_t[:, :c], x_s[:, :c]):
        raise PairingError("target view must equal the source view with campaign slots zeroed")
    return x_t, x_s, y


def _classify(bundle, x, y, mode, rng, eps, weight=1.0):
    """BCE of f(g(x)); returns loss, g/f grads and the cache pieces for reuse."""
    gx, cg = forward(bundle.g, x, mode, rng)
    p, cf = forward(bundle.f, gx, mode, rng)
    loss, dp = bce_loss(p[:, 0], y, eps)
    gf, dgx = backward(bundle.f, cf, weight * dp[:, None], return_input_grad=True)
    return loss, gx, cg, gf, dgx


def loss_nt(bundle: ModelBundle, x, y, mode="train", rng=None, eps=1e-7):
    """Plain classification loss ``BCE(f(g(x)), y)``."""
    y = np.asarray(y, dtype=np.float64)
    loss, _, cg, gf, dgx = _classify(bundle, x, y, mode, rng, eps)
    gg = backward(bundle.g, cg, dgx)
    return loss, {"g": gg, "f": gf}


def loss_iada(bundle: ModelBundle, x_t, x_s, y, mode="train", rng=None, eps=1e-7):
    """``alpha * BCE(f(g(x_T)), y) + (1 - alpha) * MSE(g(x_T), x_S)``."""
    if bundle.kind != "iada":
        raise ValueError("loss_iada needs an IADA bundle")
    x_t, x_s, y = _check_pair(bundle.schema, x_t, x_s, y)
    a = bundle.alpha
    l_cls, gx, cg, gf, dgx = _classify(bundle, x_t, y, mode, rng, eps, a)
    l_imp, dimp = mse_loss(gx, x_s)
    gg = backward(bundle.g, cg, dgx + (1.0 - a) * dimp)
    return a * l_cls + (1.0 - a) * l_imp, {"g": gg, "f": gf}


def loss_lada(bundle: ModelBundle, x_t, x_s, y, mode="train", rng=None, eps=1e-7):
    """``alpha * BCE(f(g(x_T)), y) + (1 - alpha) * MSE(g(x_T), h(x_S))`` with ``h`` frozen.

    The ``he`` entry of the returned gradients is all zeros: the source
    network is treated as a constant here.
    """
    if bundle.kind != "lada":
        raise ValueError("loss_lada needs a LADA bundle")
    if bundle.he is None:
        raise ValueError("LADA bundle has no trained source network")
    x_t, x_s, y = _check_pair(bundle.schema, x_t, x_s, y)
    a = bundle.alpha
    anchor = latent(bundle.he, x_s)
    l_cls, gx, cg, gf, dgx = _classify(bundle, x_t, y, mode, rng, eps, a)
    l_anc, danc = mse_loss(gx, anchor)
    gg = backward(bundle.g, cg, dgx + (1.0 - a) * danc)
    frozen = [np.zeros_like(p) for p in bundle.he.params()]
    return a * l_cls + (1.0 - a) * l_anc, {"g": gg, "f": gf, "he": frozen}


def loss_sda(bundle: ModelBundle, x_t, x_s, y, mode="train", rng=None, eps=1e-7):
    """``alpha * (BCE_T + BCE_S) + (1 - alpha) * MSE(g(x_T), g(x_S))``."""
    if bundle.kind != "sda":
        raise ValueError("loss_sda needs an SDA bundle")
    x_t, x_s, y = _check_pair(bundle.schema, x_t, x_s, y)
    a = bundle.alpha
    l_t, g_t, cg_t, gf_t, dg_t = _classify(bundle, x_t, y, mode, rng, eps, a)
    l_s, g_s, cg_s, gf_s, dg_s = _classify(bundle, x_s, y, mode, rng, eps, a)
    l_inv, dinv = mse_loss(g_t, g_s)
    gg_t = backward(bundle.g, cg_t, dg_t + (1.0 - a) * dinv)
    gg_s = backward(bundle.g, cg_s, dg_s - (1.0 - a) * dinv)
    return (
        a * (l_t + l_s) + (1.0 - a) * l_inv,
        {"g": [u + v for u, v in zip(gg_t, gg_s)], "f": [u + v for u, v in zip(gf_t, gf_s)]},
    )


def loss_he(he: DenseNet, x_s, y, mode="train", rng=None, eps=1e-7):
    """Source-domain classification loss for LADA's first step."""
    p, c = forward(he, x_s, mode, rng)
    loss, dp = bce_loss(p[:, 0], y, eps)
    return loss, {"he": backward(he, c, dp[:, None])}


def joint_loss(bundle: ModelBundle, x_s, y, mode="train", rng=None, eps=1e-7):
    """Base-training loss of ``bundle.kind`` on source-view records ``x_s``."""
    x_t = bundle.schema.target_view(x_s)
    if bundle.kind == "nt":
        return loss_nt(bundle, x_t, y, mode, rng, eps)
    if bundle.kind == "iada":
        return loss_iada(bundle, x_t, x_s, y, mode, rng, eps)
    if bundle.kind == "lada":
        return loss_lada(bundle, x_t, x_s, y, mode, rng, eps)
    return loss_sda(bundle, x_t, x_s, y, mode, rng, eps)


def _run_epochs(nets, optim, loss_fn, x, y, epochs, batch_size, rng):
    """Shuffled mini-batch Adam; returns the mean training loss of each epoch."""
    n = x.shape[0]
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_fn(x[idx], y[idx], rng)
            for name, state in optim.items():
                adam_step(nets[name].params(), grads[name], state)
            total += loss * len(idx)
        history.append(total / n)
    return history


def _validate_xy(x, y, schema: FeatureSchema):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != schema.total_dim:
        raise SchemaMismatchError(f"records have width {x.shape[-1] if x.ndim else 0}, schema expects {schema.total_dim}")
    if y.shape != (x.shape[0],):
        raise ShapeError("labels do not match the number of records")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature values")
    return x, y


def _new_adam(net: DenseNet, cfg: TrainConfig) -> AdamState:
    return AdamState.zeros_like(net.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


def train_lada_step1(he: DenseNet, x_s, y, config: TrainConfig, state: AdamState | None = None):
    """Fit the ``h``+``e`` source classifier on head source views.

    Returns ``(he, state, history)``; ``he`` is updated in place.
    """
    x_s = np.asarray(x_s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x_s.shape[0] == 0:
        raise EmptyDatasetError("LADA step 1 needs head-partner data")
    state = state or _new_adam(he, config)
    eps = config.prob_eps
    history = _run_epochs(
        {"he": he}, {"he": state},
        lambda xb, yb, r: loss_he(he, xb, yb, "train", r, eps),
        x_s, y, config.epochs, config.batch_size, _rng(config.seed, _STREAM_TRAIN_HE),
    )
    return he, state, history


def train_base(kind: str, schema: FeatureSchema, x_source, y, config: TrainConfig) -> Checkpoint:
    """Base training on head-partner records given in the source view."""
    x_s, y = _validate_xy(x_source, y, schema)
    if x_s.shape[0] == 0:
        raise EmptyDatasetError("base training needs at least one head record")
    bundle = build_model(kind, schema, config)
    optim = {"g": _new_adam(bundle.g, config), "f": _new_adam(bundle.f, config)}
    extra: dict[str, AdamState] = {}
    if kind == "lada":
        _, extra["he"], _ = train_lada_step1(bundle.he, x_s, y, config)
    eps = config.prob_eps
    history = _run_epochs(
        bundle.nets(), optim,
        lambda xb, yb, r: joint_loss(bundle, xb, yb, "train", r, eps),
        x_s, y, config.epochs, config.batch_size, _rng(config.seed, _STREAM_TRAIN),
    )
    optim.update(extra)
    return Checkpoint(bundle, optim, config, "base", history)


def finetune_loss(bundle: ModelBundle, x_s, y, mode="train", rng=None, eps=1e-7):
    """Loss used after base training for every kind: ``BCE(f(g(x_S)), y)``."""
    y = np.asarray(y, dtype=np.float64)
    loss, _, cg, gf, dgx = _classify(bundle, x_s, y, mode, rng, eps)
    return loss, {"g": backward(bundle.g, cg, dgx), "f": gf}


def phase_tag(fraction: float) -> str:
    return f"fine-tuned({fraction:g})"


def fine_tune(checkpoint: Checkpoint, x_source, y, fraction: float = 1.0,
              config: TrainConfig | None = None, schema: FeatureSchema | None = None) -> Checkpoint:
    """Continue training g and f on tail source views, resuming the Adam state.

    The input checkpoint is left untouched. An empty record set returns a
    copy with identical parameters.
    """
    if schema is not None and schema.fingerprint != checkpoint.bundle.schema.fingerprint:
        raise SchemaMismatchError("data schema does not match the checkpoint")
    cfg = config or checkpoint.config
    out = checkpoint.copy()
    out.phase = phase_tag(fraction)
    x_s, y = _validate_xy(x_source, y, out.bundle.schema)
    if x_s.shape[0] == 0:
        out.history = []
        return out
    optim = {"g": out.optim["g"], "f": out.optim["f"]}
    bundle, eps = out.bundle, cfg.prob_eps
    out.history = _run_epochs(
        {"g": bundle.g, "f": bundle.f}, optim,
        lambda xb, yb, r: finetune_loss(bundle, xb, yb, "train", r, eps),
        x_s, y, cfg.finetune_epochs, cfg.batch_size,
        _rng(cfg.seed, _STREAM_FINETUNE, int(round(fraction * 1_000_000))),
    )
    return out


def predict(checkpoint: Checkpoint, x_source, view: str = "source", schema: FeatureSchema | None = None) -> np.ndarray:
    """Eval-mode engagement probabilities for records given in the source view."""
    bundle = checkpoint.bundle
    if schema is not None and schema.fingerprint != bundle.schema.fingerprint:
        raise SchemaMismatchError("data schema does not match the checkpoint")
    x = np.asarray(x_source, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bundle.schema.total_dim:
        raise SchemaMismatchError(f"records have shape {x.shape}, schema expects width {bundle.schema.total_dim}")
    if view == "target":
        x = bundle.schema.target_view(x)
    elif view != "source":
        raise ValueError(f"view must be 'source' or 'target', got {view!r}")
    if x.shape[0] == 0:
        return np.zeros(0)
    gx, _ = forward(bundle.g, x, "eval")
    p, _ = forward(bundle.f, gx, "eval")
    return p[:, 0]


def config_json(config: TrainConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
