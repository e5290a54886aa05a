"""Parameter-isolation task trainers over numkit networks.

Two isolation mechanisms produce per-task heads on a shared trunk:

* hard attention: per-task sigmoid gates a = sigmoid(s * e) on hidden units;
  gradients of weights between units claimed by earlier tasks are scaled
  toward zero, so finished tasks keep their function.
* supermasks: the trunk stays frozen at its random initialization and each
  task selects the top p% of weights per layer by trainable scores
  (straight-through gradients); the winning mask is frozen at task end.

Training a task is single-threaded and deterministic given the seed.
Evaluation of a finished net is read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .data import LabeledImageSet

SATURATION_EPS = 1e-6  # attention counts as binary within this of {0, 1}

__all__ = [
    "SATURATION_EPS",
    "HatState",
    "SupState",
    "Head",
    "MaskedNet",
    "build_masked_net",
    "hat_attention",
    "hat_forward",
    "hat_masked_gradients",
    "hat_regularizer",
    "hat_accumulate",
    "mask_from_scores",
    "sup_masked_forward",
    "sup_score_update",
    "task_features",
    "task_raw_logits",
    "train_task",
    "EpochStats",
]


@dataclass
class HatState:
    """Hard-attention bookkeeping across tasks.

    accumulated[l] is the elementwise max of all finished tasks' attentions
    at full scale (a^{<k}); it only grows. lambdas[k] weights the sparsity
    regularizer of task k.
    """

    s_max: float
    lambdas: list[float]
    embeddings: dict[int, list[np.ndarray]] = field(default_factory=dict)
    accumulated: list[np.ndarray] = field(default_factory=list)

    def lambda_for(self, task: int) -> float:
        return self.lambdas[min(task, len(self.lambdas) - 1)]


@dataclass
class SupState:
    """Supermask bookkeeping: live scores for the task in training plus the
    frozen per-task masks (0/1 arrays mirroring trunk weight shapes)."""

    p: float
    masks: dict[int, list[np.ndarray]] = field(default_factory=dict)
    scores: list[np.ndarray] | None = None


@dataclass
class Head:
    """Per-task linear output layer; kind is "plain" (|C| outputs) or
    "rotation" (4|C| outputs, one slot per quarter turn)."""

    weight: np.ndarray
    bias: np.ndarray
    kind: str = "plain"

    @property
    def width(self) -> int:
        return self.weight.shape[0]


@dataclass
class MaskedNet:
    """Shared all-relu trunk, per-task heads, and one isolation state."""

    trunk: nk.DenseNet
    heads: dict[int, Head]
    isolation: HatState | SupState
    finished: list[int] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return "hat" if isinstance(self.isolation, HatState) else "sup"

    @property
    def feature_dim(self) -> int:
        return self.trunk.weights[-1].shape[0]


def build_masked_net(input_dim: int, hidden: list[int], *, isolation: str,
                     seed: int, s_max: float = 400.0,
                     lambdas: list[float] | None = None,
                     sparsity: float = 50.0) -> MaskedNet:
    """Create an untrained net. hidden lists the trunk layer widths."""
    rng = np.random.default_rng([seed, 0])
    trunk = nk.glorot_net([input_dim] + list(hidden),
                          rng, activations=["relu"] * len(hidden))
    if isolation == "hat":
        state: HatState | SupState = HatState(
            s_max=s_max,
            lambdas=list(lambdas) if lambdas else [1.0, 0.75],
            accumulated=[np.zeros(h) for h in hidden],
        )
    elif isolation == "sup":
        if not 0.0 < sparsity <= 100.0:
            raise ValueError(f"sparsity {sparsity} outside (0, 100]")
        state = SupState(p=sparsity)
    else:
        raise ValueError(f"unknown isolation {isolation!r}")
    return MaskedNet(trunk, {}, state)


# ---------------------------------------------------------------------------
# Hard attention
# ---------------------------------------------------------------------------

def hat_attention(e: np.ndarray, s: float) -> np.ndarray:
    """a_i = sigmoid(s * e_i); s > 0 controls how binary the gate is."""
    if s <= 0:
        raise ValueError(f"scale s must be positive, got {s}")
    z = s * np.asarray(e, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _hat_hooks(net: MaskedNet, task: int, s: float | None) -> list[np.ndarray]:
    state = net.isolation
    if task not in state.embeddings:
        raise ValueError(f"task {task} has no attention embeddings")
    scale = state.s_max if s is None else s
    return [hat_attention(e, scale) for e in state.embeddings[task]]


def _head_logits(head: Head, features: np.ndarray) -> np.ndarray:
    return features @ head.weight.T + head.bias


def hat_forward(net: MaskedNet, x, task: int, s: float | None = None
                ) -> np.ndarray:
    """Head-k logits with task-k attention gates (full scale by default).

    Attention applies to hidden layers only, never the head.
    """
    if task not in net.heads:
        raise ValueError(f"unknown task {task}")
    feats, _ = nk.forward(net.trunk, _flatten(net, x), _hat_hooks(net, task, s))
    return _head_logits(net.heads[task], feats)


def hat_masked_gradients(tape: nk.GradTape, state: HatState) -> None:
    """Scale trunk gradients by 1 - min(acc_out, acc_in) in place.

    The input layer counts as fully claimed (acc = 1): weights into a
    protected unit must freeze regardless of which input pixel they read.
    Bias gradients scale by 1 - acc_out for the same reason. A contraction:
    |g'| <= |g| elementwise.
    """
    for l, acc_out in enumerate(state.accumulated):
        acc_in = state.accumulated[l - 1] if l > 0 else \
            np.ones(tape.d_weights[l].shape[1])
        factor = 1.0 - np.minimum(acc_out[:, None], acc_in[None, :])
        tape.d_weights[l] *= factor
        tape.d_biases[l] *= 1.0 - acc_out


def hat_regularizer(state: HatState, task: int,
                    attentions: list[np.ndarray], s: float
                    ) -> tuple[float, list[np.ndarray], bool]:
    """Sparsity penalty on attention mass over still-free units.

    L_r = lambda_k * sum a * (1 - acc) / sum (1 - acc), with gradients chained
    back to the embeddings through the sigmoid. All units already claimed
    (denominator 0) reports 0 with the capacity-exhausted flag.
    """
    lam = state.lambda_for(task)
    free = [1.0 - acc for acc in state.accumulated]
    denom = float(sum(f.sum() for f in free))
    if denom == 0.0:
        return 0.0, [np.zeros_like(a) for a in attentions], True
    value = lam * float(sum((a * f).sum() for a, f in zip(attentions, free))) / denom
    grads = [lam * f / denom * a * (1.0 - a) * s
             for a, f in zip(attentions, free)]
    return value, grads, False


def hat_accumulate(net: MaskedNet, task: int) -> None:
    """Fold task's full-scale attention into the accumulated maxima.

    Values within SATURATION_EPS of {0, 1} snap to exact binary so protected
    units block gradients exactly, not merely to ~1e-9.
    """
    state = net.isolation
    for l, a in enumerate(_hat_hooks(net, task, None)):
        acc = np.maximum(state.accumulated[l], a)
        acc[acc < SATURATION_EPS] = 0.0
        acc[acc > 1.0 - SATURATION_EPS] = 1.0
        state.accumulated[l] = acc


# ---------------------------------------------------------------------------
# Supermasks
# ---------------------------------------------------------------------------

def mask_from_scores(scores: list[np.ndarray], p: float) -> list[np.ndarray]:
    """Per layer, 1.0 on the ceil(p% * size) largest scores, ties to the
    lowest flat index; a deterministic function of (scores, p)."""
    masks = []
    for v in scores:
        flat = v.reshape(-1)
        keep = int(np.ceil(p / 100.0 * flat.size))
        order = np.argsort(-flat, kind="stable")  # stable: lowest index wins ties
        m = np.zeros(flat.size)
        m[order[:keep]] = 1.0
        masks.append(m.reshape(v.shape))
    return masks


def _sup_masks(net: MaskedNet, task: int) -> list[np.ndarray]:
    state = net.isolation
    if task in state.masks:
        return state.masks[task]
    if task not in net.finished and state.scores is not None:
        return mask_from_scores(state.scores, state.p)
    raise ValueError(f"unknown task {task}")


def _sup_effective_trunk(net: MaskedNet, masks: list[np.ndarray]) -> nk.DenseNet:
    return nk.DenseNet([w * m for w, m in zip(net.trunk.weights, masks)],
                       net.trunk.biases, net.trunk.activations)


def sup_masked_forward(net: MaskedNet, x, task: int) -> np.ndarray:
    """Head-k logits through the trunk with weights W * M_k."""
    if task not in net.heads:
        raise ValueError(f"unknown task {task}")
    eff = _sup_effective_trunk(net, _sup_masks(net, task))
    feats, _ = nk.forward(eff, _flatten(net, x))
    return _head_logits(net.heads[task], feats)


def sup_score_update(tape: nk.GradTape, trunk: nk.DenseNet) -> list[np.ndarray]:
    """Straight-through score gradients: dL/dV = dL/d(W*M) * W.

    The mask acts as identity in the backward pass, so scores of inactive
    weights still learn.
    """
    return [g * w for g, w in zip(tape.d_weights, trunk.weights)]


# ---------------------------------------------------------------------------
# Shared forward helpers
# ---------------------------------------------------------------------------

def _flatten(net: MaskedNet, x) -> np.ndarray:
    """Coerce inputs to the trunk's flat width: 3-D means an image batch,
    2-D is a flat batch when widths match and a single image otherwise."""
    x = np.asarray(x, dtype=np.float64)
    d = net.trunk.weights[0].shape[1]
    if x.ndim == 3:
        if x.shape[1] * x.shape[2] != d:
            raise nk.ShapeError(f"images {x.shape[1:]} != input width {d}")
        return x.reshape(x.shape[0], -1)
    if x.ndim == 2 and x.shape[1] != d:
        if x.size != d:
            raise nk.ShapeError(f"input {x.shape} != input width {d}")
        return x.reshape(d)
    return x


def task_features(net: MaskedNet, x, task: int,
                  s: float | None = None) -> tuple[np.ndarray, nk.ForwardCache,
                                                   nk.DenseNet]:
    """Trunk output under task's isolation; returns (features, cache, trunk
    actually run) so callers can backpropagate through the right weights."""
    x = _flatten(net, x)
    if net.kind == "hat":
        hooks = _hat_hooks(net, task, s)
        feats, cache = nk.forward(net.trunk, x, hooks)
        return feats, cache, net.trunk
    eff = _sup_effective_trunk(net, _sup_masks(net, task))
    feats, cache = nk.forward(eff, x)
    return feats, cache, eff


def task_raw_logits(net: MaskedNet, x, task: int) -> np.ndarray:
    """Head-k logits (raw head width; rotation heads give 4|C| slots)."""
    if net.kind == "hat":
        return hat_forward(net, x, task)
    return sup_masked_forward(net, x, task)


# ---------------------------------------------------------------------------
# Task training
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    """One epoch of the training trace."""

    epoch: int
    loss: float
    ce: float = 0.0
    reg: float = 0.0
    phase: str = "main"


def _anneal(batch: int, n_batches: int, s_max: float) -> float:
    if n_batches <= 1:
        return s_max
    lo = 1.0 / s_max
    return lo + (s_max - lo) * batch / (n_batches - 1)


def _init_head(net: MaskedNet, task: int, width: int, kind: str,
               rng: np.random.Generator) -> Head:
    fan_in = net.feature_dim
    bound = np.sqrt(6.0 / (fan_in + width))
    head = Head(rng.uniform(-bound, bound, size=(width, fan_in)),
                np.zeros(width), kind)
    net.heads[task] = head
    return head


def train_task(net: MaskedNet, task: int, data: LabeledImageSet, *,
               loss: str = "ce", epochs: int = 20, lr: float = 0.1,
               batch_size: int = 16, seed: int = 0,
               contrastive_epochs: int | None = None,
               head_epochs: int | None = None, head_lr: float | None = None,
               contrastive_tau: float = 0.5, flip_prob: float = 0.5,
               noise_sigma: float = 0.05) -> list[EpochStats]:
    """Train one task and update the isolation state.

    loss: "ce" (plain head), "rotation-ce" (head over 4|C| rotation classes),
    or "contrastive" (contrastive feature phase, then a frozen-trunk rotation
    head). Finished tasks' behavior is left unchanged; the same task cannot
    be trained twice.
    """
    if task in net.finished:
        raise nk.StateError(f"task {task} already finished")
    if loss not in ("ce", "rotation-ce", "contrastive"):
        raise ValueError(f"unknown loss {loss!r}")
    rng = np.random.default_rng([seed, task, 1])
    state = net.isolation

    if net.kind == "hat":
        state.embeddings[task] = [rng.normal(size=acc.shape)
                                  for acc in state.accumulated]
    else:
        state.scores = [rng.normal(scale=0.1, size=w.shape)
                        for w in net.trunk.weights]

    augment = {"flip_prob": flip_prob, "noise_sigma": noise_sigma}
    if loss == "contrastive":
        from . import oodlab  # deferred: oodlab imports this module
        n_feat = contrastive_epochs if contrastive_epochs is not None else epochs
        trace = _train_epochs(net, task, data, rng, loss="contrastive",
                              epochs=n_feat, lr=lr, batch_size=batch_size,
                              tau=contrastive_tau, head=None, augment=augment)
        _finish_isolation(net, task)
        head_losses = oodlab.finetune_rotation_head(
            net, task, data,
            epochs=head_epochs if head_epochs is not None else epochs,
            lr=head_lr if head_lr is not None else lr,
            batch_size=batch_size, rng=rng, **augment)
        trace += [EpochStats(i, h, ce=h, phase="head")
                  for i, h in enumerate(head_losses)]
    else:
        width = data.n_classes if loss == "ce" else 4 * data.n_classes
        head = _init_head(net, task, width,
                          "plain" if loss == "ce" else "rotation", rng)
        trace = _train_epochs(net, task, data, rng, loss=loss, epochs=epochs,
                              lr=lr, batch_size=batch_size,
                              tau=contrastive_tau, head=head, augment=augment)
        _finish_isolation(net, task)

    net.finished.append(task)
    return trace


def _finish_isolation(net: MaskedNet, task: int) -> None:
    if net.kind == "hat":
        hat_accumulate(net, task)
    else:
        state = net.isolation
        state.masks[task] = mask_from_scores(state.scores, state.p)
        state.scores = None


def _train_epochs(net: MaskedNet, task: int, data: LabeledImageSet,
                  rng: np.random.Generator, *, loss: str, epochs: int,
                  lr: float, batch_size: int, tau: float, head: Head | None,
                  augment: dict | None = None) -> list[EpochStats]:
    from . import oodlab  # deferred: oodlab imports this module

    augment = augment or {}

    state = net.isolation
    xs = data.flat
    n = len(data)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        sums = {"loss": 0.0, "ce": 0.0, "reg": 0.0}
        for b, idx in enumerate(batches):
            s = _anneal(b, len(batches), state.s_max) if net.kind == "hat" else None
            if loss == "ce":
                bx, by = xs[idx], data.labels[idx]
            else:
                imgs, by = oodlab.build_rotation_batch(
                    data.images[idx], data.labels[idx], rng=rng, **augment)
                bx = imgs.reshape(imgs.shape[0], -1)

            feats, cache, run_trunk = task_features(net, bx, task, s=s)
            if loss == "contrastive":
                z, d_feats_fn = _normalize_rows(feats)
                value, dz = oodlab.sup_con_loss(z, by, tau=tau)
                d_feats = d_feats_fn(dz)
                ce_val, d_head = value, None
            else:
                logits = _head_logits(head, feats)
                ce_val, dlogits = nk.softmax_ce(logits, by)
                value = ce_val
                d_head = dlogits
                d_feats = dlogits @ head.weight

            tape = nk.GradTape.for_net(run_trunk)
            nk.backward(run_trunk, tape, cache, d_feats)

            reg_val = 0.0
            if net.kind == "hat":
                attn = cache.hooks
                reg_val, e_grads, _ = hat_regularizer(state, task, attn, s)
                value += reg_val
                hat_masked_gradients(tape, state)
                nk.sgd_step(net.trunk, tape, lr)
                for l, eg in enumerate(e_grads):
                    hook_g = tape.d_hooks[l]
                    total = eg + hook_g * attn[l] * (1.0 - attn[l]) * s
                    state.embeddings[task][l] -= lr * total
            else:
                for v, g in zip(state.scores, sup_score_update(tape, net.trunk)):
                    v -= lr * g

            if d_head is not None:
                head.weight -= lr * (d_head.T @ feats)
                head.bias -= lr * d_head.sum(axis=0)

            sums["loss"] += value
            sums["ce"] += ce_val
            sums["reg"] += reg_val
        k = len(batches)
        trace.append(EpochStats(epoch, sums["loss"] / k, ce=sums["ce"] / k,
                                reg=sums["reg"] / k,
                                phase="contrastive" if loss == "contrastive"
                                else "main"))
    return trace


def _normalize_rows(h: np.ndarray):
    """Unit-normalize rows; returns (z, fn mapping dL/dz back to dL/dh)."""
    norms = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
    z = h / norms

    def backward(dz: np.ndarray) -> np.ndarray:
        # d/dh of h/|h|: (dz - z (z . dz)) / |h|
        return (dz - z * (z * dz).sum(axis=1, keepdims=True)) / norms

    return z, backward
