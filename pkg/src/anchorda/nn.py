"""Dense feed-forward networks with exact reverse-mode gradients.

Only what the anchored domain-adaptation models need: stacks of affine
layers with rectifier hidden units, inverted dropout, a logistic or
identity head, binary cross-entropy / squared-error losses and an Adam
optimizer whose state can be carried between training phases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

PROB_EPS = 1e-7

ACTIVATIONS = ("identity", "logistic")


class ShapeError(ValueError):
    pass


class InvalidArchitectureError(ValueError):
    pass


class InvalidCacheError(RuntimeError):
    pass


@dataclass
class DenseNet:
    """Affine layers joined by ReLU; ``layers[i] = (W [in x out], b [out])``.

    ``dropout_after[i]`` says whether dropout follows the activation of
    hidden layer ``i``. By default every gap gets dropout except the one
    feeding the output layer.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    output_activation: str = "identity"
    dropout_rate: float = 0.0
    dropout_after: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if self.output_activation not in ACTIVATIONS:
            raise InvalidArchitectureError(f"unknown output activation {self.output_activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArchitectureError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise InvalidArchitectureError("consecutive layer dimensions do not chain")
        if not self.dropout_after:
            n_gaps = len(self.layers) - 1
            self.dropout_after = [i < n_gaps - 1 for i in range(n_gaps)]
        if len(self.dropout_after) != len(self.layers) - 1:
            raise InvalidArchitectureError("dropout_after needs one flag per inter-layer gap")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]``; arrays are live views."""
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            output_activation=self.output_activation,
            dropout_rate=self.dropout_rate,
            dropout_after=list(self.dropout_after),
        )


def init_dense_net(layer_dims, output_activation="identity", dropout_rate=0.0, seed=0) -> DenseNet:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    layer_dims = [int(d) for d in layer_dims]
    if len(layer_dims) < 2:
        raise InvalidArchitectureError("need at least an input and an output dimension")
    if any(d <= 0 for d in layer_dims):
        raise InvalidArchitectureError(f"layer dims must be positive, got {layer_dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(layer_dims, layer_dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return DenseNet(layers, output_activation=output_activation, dropout_rate=dropout_rate)


@dataclass
class ForwardCache:
    net_id: int
    dims: tuple[int, ...]
    inputs: list[np.ndarray]  # input to each affine layer
    masks: list[np.ndarray | None]  # scaled dropout mask per gap
    pre: list[np.ndarray]  # pre-activations per layer
    output: np.ndarray


def _check_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"expected a non-empty [batch x dim] matrix, got shape {x.shape}")
    return x


def forward(net: DenseNet, x, mode="eval", rng=None):
    """Run the net on a batch. Returns ``(output, cache)``.

    In ``"train"`` mode dropout masks are drawn from ``rng`` and scaled by
    ``1/(1-rate)`` so eval mode needs no rescaling.
    """
    x = _check_batch(x)
    if x.shape[1] != net.in_dim:
        raise ShapeError(f"input width {x.shape[1]} != net input width {net.in_dim}")
    train = mode == "train"
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if train and net.dropout_rate > 0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    keep = 1.0 - net.dropout_rate

    inputs, masks, pre = [], [], []
    h = x
    n_layers = len(net.layers)
    for i, (w, b) in enumerate(net.layers):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        if i == n_layers - 1:
            break
        h = np.maximum(z, 0.0)
        mask = None
        if train and net.dropout_rate > 0 and net.dropout_after[i]:
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        masks.append(mask)
    z = pre[-1]
    out = expit(z) if net.output_activation == "logistic" else z
    cache = ForwardCache(id(net), tuple(net.dims), inputs, masks, pre, out)
    return out, cache


def backward(net: DenseNet, cache: ForwardCache, grad_out, return_input_grad=False):
    """Backpropagate ``grad_out`` (gradient w.r.t. the net output).

    Returns gradients in ``net.params()`` order, and the gradient w.r.t. the
    input as a second value when ``return_input_grad`` is set.
    """
    if cache.net_id != id(net) or cache.dims != tuple(net.dims):
        raise InvalidCacheError("cache was produced by a different network")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.output.shape:
        raise ShapeError(f"upstream gradient shape {grad_out.shape} != output shape {cache.output.shape}")

    if net.output_activation == "logistic":
        p = cache.output
        delta = grad_out * p * (1.0 - p)
    else:
        delta = grad_out
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[i]
        grads[2 * i] = cache.inputs[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0 and not return_input_grad:
            break
        dh = delta @ w.T
        if i == 0:
            return grads, dh
        mask = cache.masks[i - 1]
        if mask is not None:
            dh = dh * mask
        delta = dh * (cache.pre[i - 1] > 0)
    return grads


def bce_loss(probs, labels, eps=PROB_EPS):
    """Mean binary cross-entropy and its gradient w.r.t. ``probs``.

    Probabilities are clipped to ``[eps, 1-eps]``; the gradient is exact for
    the clipped expression (zero where clipping is active).
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and labels {y.shape} differ in shape")
    n = p.size
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    inside = (p >= eps) & (p <= 1.0 - eps)
    grad = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / n
    return float(loss), grad


def mse_loss(pred, target):
    """Mean over all entries of the squared difference, with its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    """First/second moments for one parameter group plus the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m=[a.copy() for a in self.m], v=[a.copy() for a in self.v],
            step=self.step, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
        )


def adam_step(params, grads, state: AdamState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
