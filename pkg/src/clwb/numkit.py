"""Dense-network numeric substrate.

Float64 everywhere: the entropy bounds downstream are sensitive to log
underflow, and training cost at desk scale is negligible. Weight matrices are
row-major ``(fan_out, fan_in)`` arrays; a layer computes
``act(W @ h + b)`` optionally followed by an element-wise mask ("hook") on the
post-activation values. Hooks are how task-attention masks plug in; identity
hooks give a plain MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_CLAMP = 1e-12

__all__ = [
    "LOG_CLAMP",
    "ShapeError",
    "StateError",
    "NumericError",
    "DenseNet",
    "GradTape",
    "ForwardCache",
    "glorot_net",
    "forward",
    "backward",
    "sgd_step",
    "softmax",
    "log_softmax",
    "softmax_ce",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class StateError(RuntimeError):
    """Operation called out of order (e.g. backward without a forward cache)."""


class NumericError(FloatingPointError):
    """Non-finite value encountered; carries the offending layer index."""

    def __init__(self, msg: str, layer: int):
        super().__init__(f"{msg} (layer {layer})")
        self.layer = layer


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass
class DenseNet:
    """A stack of dense layers: weights[l] is (out, in), biases[l] is (out,).

    activations[l] is ``"relu"`` or ``"linear"``. Consecutive layer dimensions
    must agree; ``validate`` enforces that plus finiteness.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        self.validate()

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def validate(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights/biases/activations length mismatch")
        for l, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {l}: weight {w.shape} vs bias {b.shape}")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(
                    f"layer {l}: fan_in {w.shape[1]} != previous fan_out "
                    f"{self.weights[l - 1].shape[0]}"
                )
            if act not in ("relu", "linear"):
                raise ValueError(f"unknown activation {act!r}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError("non-finite parameter", l)

    def copy(self) -> "DenseNet":
        return DenseNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


@dataclass
class GradTape:
    """Per-parameter gradient accumulators mirroring a DenseNet's shapes.

    ``d_hooks[l]`` holds the gradient w.r.t. the layer-l hook vector when one
    was supplied at forward time (None otherwise). Zeroed between steps.
    """

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_hooks: list[np.ndarray | None] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: DenseNet) -> "GradTape":
        return cls(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
            [None] * net.n_layers,
        )

    def zero(self) -> None:
        for g in self.d_weights:
            g[...] = 0.0
        for g in self.d_biases:
            g[...] = 0.0
        self.d_hooks = [None] * len(self.d_weights)


@dataclass
class ForwardCache:
    """Activations recorded by forward, consumed by backward."""

    x: np.ndarray
    pre: list[np.ndarray]        # z_l = W h_{l-1} + b
    post_raw: list[np.ndarray]   # h_l = act(z_l), before hook
    post: list[np.ndarray]       # h'_l = hook * h_l (== h_l without hook)
    hooks: list[np.ndarray | None]
    batched: bool


def glorot_net(sizes: list[int], rng: np.random.Generator,
               activations: list[str] | None = None) -> DenseNet:
    """Uniform +-sqrt(6/(fan_in+fan_out)) init; hidden layers relu, last linear."""
    if activations is None:
        activations = ["relu"] * (len(sizes) - 2) + ["linear"]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(weights, biases, activations)


def _check_hooks(net: DenseNet, hooks) -> list[np.ndarray | None]:
    if hooks is None:
        return [None] * net.n_layers
    if len(hooks) != net.n_layers:
        raise ShapeError(f"expected {net.n_layers} hooks, got {len(hooks)}")
    out = []
    for l, h in enumerate(hooks):
        if h is None:
            out.append(None)
            continue
        h = _as_f64(h)
        if h.shape != (net.weights[l].shape[0],):
            raise ShapeError(f"hook {l}: shape {h.shape} vs layer width "
                             f"{net.weights[l].shape[0]}")
        out.append(h)
    return out


def forward(net: DenseNet, x, hooks=None) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a vector (d,) or a batch (n, d).

    hooks: optional per-layer mask vectors in [0, 1], multiplied into the
    post-activation values of their layer. Pure function of (net, x, hooks).
    """
    x = _as_f64(x)
    batched = x.ndim == 2
    if not batched and x.ndim != 1:
        raise ShapeError(f"input must be 1-D or 2-D, got ndim={x.ndim}")
    if x.shape[-1] != net.weights[0].shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != net input "
                         f"{net.weights[0].shape[1]}")
    hooks = _check_hooks(net, hooks)

    h = x
    pre, post_raw, post = [], [], []
    for l, (w, b, act) in enumerate(zip(net.weights, net.biases, net.activations)):
        z = h @ w.T + b
        a = np.maximum(z, 0.0) if act == "relu" else z
        pre.append(z)
        post_raw.append(a)
        h = a * hooks[l] if hooks[l] is not None else a
        post.append(h)
    return h, ForwardCache(x, pre, post_raw, post, hooks, batched)


def backward(net: DenseNet, tape: GradTape, cache: ForwardCache,
             upstream) -> np.ndarray:
    """Fill tape with d(loss)/d(params) and return d(loss)/d(input).

    upstream is d(loss)/d(output), matching the forward output shape. Batched
    inputs accumulate (sum) over the batch dimension. Hook gradients are
    recorded in tape.d_hooks for layers that had hooks.
    """
    if cache is None or not cache.pre:
        raise StateError("backward called without a forward cache")
    g = _as_f64(upstream)
    expect = cache.post[-1].shape
    if g.shape != expect:
        raise ShapeError(f"upstream shape {g.shape} != output shape {expect}")
    if not cache.batched:
        g = g[None, :]

    tape.d_hooks = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        a = cache.post_raw[l]
        if not cache.batched:
            a = a[None, :]
        hook = cache.hooks[l]
        if hook is not None:
            tape.d_hooks[l] = (g * a).sum(axis=0)
            g = g * hook
        if net.activations[l] == "relu":
            z = cache.pre[l]
            if not cache.batched:
                z = z[None, :]
            g = g * (z > 0.0)
        below = cache.post[l - 1] if l > 0 else cache.x
        if not cache.batched:
            below = below[None, :]
        tape.d_weights[l] += g.T @ below
        tape.d_biases[l] += g.sum(axis=0)
        g = g @ net.weights[l]
    return g if cache.batched else g[0]


def sgd_step(net: DenseNet, tape: GradTape, lr: float) -> None:
    """In-place p <- p - lr * g over all parameters."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    for l, (gw, gb) in enumerate(zip(tape.d_weights, tape.d_biases)):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError("non-finite gradient", l)
        net.weights[l] -= lr * gw
        net.biases[l] -= lr * gb


# ---------------------------------------------------------------------------
# Losses and checking
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = _as_f64(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = _as_f64(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_ce(logits, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch; returns (loss, d loss / d logits).

    logits (n, c) or (c,); targets int array (n,) or scalar.
    """
    z = _as_f64(logits)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    t = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {z.shape[0]} logit rows")
    if (t < 0).any() or (t >= z.shape[1]).any():
        raise IndexError("target class out of range")
    p = softmax(z)
    n = z.shape[0]
    loss = float(-np.log(np.maximum(p[np.arange(n), t], LOG_CLAMP)).mean())
    d = p.copy()
    d[np.arange(n), t] -= 1.0
    d /= n
    return loss, (d[0] if single else d)


@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    max_rel_err: list[float]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err) if self.max_rel_err else 0.0

    @property
    def ok(self) -> bool:
        return self.worst < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        per = ", ".join(f"p{i}={e:.3e}" for i, e in enumerate(self.max_rel_err))
        return f"grad_check {status} worst={self.worst:.3e} tol={self.tol:g} [{per}]"


def grad_check(lossfn, params: list[np.ndarray], h: float = 1e-6,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare lossfn's analytic gradients against central differences.

    lossfn(params) -> (loss, grads) with grads shaped like params. h must lie
    in [1e-8, 1e-4]: wider steps break the O(h^2) truncation assumption,
    narrower ones drown in rounding noise.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"h={h} outside [1e-8, 1e-4]")
    _, analytic = lossfn(params)
    errs = []
    for i, p in enumerate(params):
        a = np.asarray(analytic[i], dtype=np.float64)
        worst = 0.0
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up, _ = lossfn(params)
            flat[j] = orig - h
            dn, _ = lossfn(params)
            flat[j] = orig
            num = (up - dn) / (2.0 * h)
            ana = a.reshape(-1)[j]
            denom = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / denom)
        errs.append(worst)
    return GradCheckReport(errs, tol)
