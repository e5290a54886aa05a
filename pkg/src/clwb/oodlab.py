"""Task-membership scoring and its training-time machinery.

Scorers map (model, input, task) to a scalar confidence that the input
belongs to the task: max softmax, ODIN (temperature scaling plus a signed
input perturbation toward higher confidence, both applied only at test
time), and a rotation ensemble for heads trained with quarter-turn classes.
The rotation/contrastive builders here feed the backbones' rotation-CE and
contrastive training modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbones as bb
from . import numkit as nk
from .data import LabeledImageSet

__all__ = [
    "DegenerateBatchError",
    "OdinParams",
    "msp_score",
    "odin_perturb",
    "odin_score",
    "rotate90",
    "build_rotation_batch",
    "sup_con_loss",
    "finetune_rotation_head",
    "ensemble_logits",
    "class_logits",
]

ODIN_TAU_GRID = (1.0, 5.0, 10.0, 100.0, 1000.0)
ODIN_EPS_GRID = (0.0, 0.0007, 0.0014, 0.004)


class DegenerateBatchError(ValueError):
    """A contrastive batch with a sample that has no positive partner."""


@dataclass(frozen=True)
class OdinParams:
    """Per-task ODIN post-processing knobs (defaults grid-searched on a
    validation split elsewhere)."""

    tau: float = 1.0
    eps: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.eps < 0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")


def msp_score(logits):
    """Max softmax probability; scalar for a vector, array for a batch."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty logits")
    p = nk.softmax(z)
    m = p.max(axis=-1)
    return float(m) if z.ndim == 1 else m


def _log_msp_input_gradient(net: bb.MaskedNet, x: np.ndarray, task: int,
                            tau: float) -> np.ndarray:
    """d/dx of log softmax(f(x)/tau)[argmax f(x)] through task's path."""
    head = net.heads[task]
    feats, cache, trunk = bb.task_features(net, x, task)
    logits = feats @ head.weight.T + head.bias
    batched = logits.ndim == 2
    z = logits if batched else logits[None, :]
    yhat = z.argmax(axis=1)
    p = nk.softmax(z / tau)
    dlogits = -p / tau
    dlogits[np.arange(z.shape[0]), yhat] += 1.0 / tau
    d_feats = dlogits @ head.weight
    tape = nk.GradTape.for_net(trunk)
    return nk.backward(trunk, tape, cache, d_feats if batched else d_feats[0])


def odin_perturb(net: bb.MaskedNet, x, task: int,
                 params: OdinParams) -> np.ndarray:
    """Nudge the input against the sign of -grad log s(x; tau)_yhat.

    A confidence-raising step of size eps per input unit; eps = 0 returns the
    input unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if params.eps == 0.0:
        return x.copy()
    g = _log_msp_input_gradient(net, x, task, params.tau)
    return x - params.eps * np.sign(-g).reshape(x.shape)


def odin_score(net: bb.MaskedNet, x, task: int, params: OdinParams):
    """Max temperature-scaled softmax of head k at the perturbed input."""
    if task not in net.heads:
        raise ValueError(f"unknown task {task}")
    x_t = odin_perturb(net, x, task, params)
    logits = bb.task_raw_logits(net, x_t, task)
    return msp_score(np.asarray(logits) / params.tau)


# ---------------------------------------------------------------------------
# Rotation augmentation
# ---------------------------------------------------------------------------

def rotate90(image, quarter_turns: int):
    """Counterclockwise rotation by 90 degrees * quarter_turns.

    Accepts (h, w) or a batch (n, h, w); the grid must be square so four
    turns compose to the identity.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        h, w = img.shape
        axes = (0, 1)
    elif img.ndim == 3:
        h, w = img.shape[1:]
        axes = (1, 2)
    else:
        raise ValueError(f"expected 2-D or 3-D image data, got ndim={img.ndim}")
    if h != w:
        raise ValueError(f"rotation needs a square grid, got {h}x{w}")
    return np.rot90(img, k=quarter_turns % 4, axes=axes)


def build_rotation_batch(images, labels, *, rng: np.random.Generator,
                         flip_prob: float = 0.5, noise_sigma: float = 0.05
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Augment N samples into the 8N rotation-labeled contrastive batch.

    Each sample yields two views (random horizontal flip + clipped Gaussian
    pixel noise), each view all four quarter-turns; rotation r of class y is
    labeled y*4 + r, a bijection onto 0..4C-1 when all classes appear. Output
    order: sample-major, then view, then rotation.
    """
    imgs = np.asarray(images, dtype=np.float64)
    ys = np.asarray(labels)
    if imgs.ndim != 3:
        raise ValueError("expected a batch of 2-D images")
    out_x, out_y = [], []
    for x, y in zip(imgs, ys):
        for _ in range(2):
            view = x[:, ::-1] if rng.random() < flip_prob else x
            if noise_sigma > 0:
                view = np.clip(view + rng.normal(0.0, noise_sigma, x.shape),
                               0.0, 1.0)
            for r in range(4):
                out_x.append(rotate90(view, r))
                out_y.append(int(y) * 4 + r)
    return np.stack(out_x), np.array(out_y, dtype=np.intp)


def sup_con_loss(z: np.ndarray, labels, tau: float = 0.5
                 ) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over embedding rows and its gradient.

    For each anchor, positives are same-label rows other than itself and the
    denominator runs over every other row. Callers pass unit-normalized rows;
    the value depends on the embeddings only through dot products, so it is
    invariant under any global orthogonal map.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels)
    n = z.shape[0]
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} embeddings")
    pos = (y[:, None] == y[None, :]) & ~np.eye(n, dtype=bool)
    counts = pos.sum(axis=1)
    if (counts == 0).any():
        bad = int(np.flatnonzero(counts == 0)[0])
        raise DegenerateBatchError(f"sample {bad} has no positive partner")

    sim = (z @ z.T) / tau
    np.fill_diagonal(sim, -np.inf)  # self excluded from the denominator
    m = sim.max(axis=1, keepdims=True)
    logsum = m[:, 0] + np.log(np.exp(sim - m).sum(axis=1))
    pos_mean = np.where(pos, sim, 0.0).sum(axis=1) / counts
    loss = float(np.mean(logsum - pos_mean))

    q = np.exp(sim - logsum[:, None])  # row softmax over non-self entries
    g = q - pos / counts[:, None]
    dz = (g + g.T) @ z / (tau * n)
    return loss, dz


# ---------------------------------------------------------------------------
# Rotation head and ensemble
# ---------------------------------------------------------------------------

def finetune_rotation_head(net: bb.MaskedNet, task: int,
                           data: LabeledImageSet, *, epochs: int, lr: float,
                           batch_size: int, rng: np.random.Generator,
                           flip_prob: float = 0.5, noise_sigma: float = 0.05
                           ) -> list[float]:
    """Train a fresh linear head over 4|C| rotation classes on frozen
    features; trunk parameters are never touched. Returns per-epoch losses."""
    width = 4 * data.n_classes
    fan_in = net.feature_dim
    bound = np.sqrt(6.0 / (fan_in + width))
    head = bb.Head(rng.uniform(-bound, bound, size=(width, fan_in)),
                   np.zeros(width), kind="rotation")
    net.heads[task] = head

    losses = []
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        for idx in batches:
            imgs, ys = build_rotation_batch(data.images[idx],
                                            data.labels[idx], rng=rng,
                                            flip_prob=flip_prob,
                                            noise_sigma=noise_sigma)
            feats, _, _ = bb.task_features(net, imgs.reshape(len(imgs), -1),
                                           task)
            logits = feats @ head.weight.T + head.bias
            value, dlogits = nk.softmax_ce(logits, ys)
            head.weight -= lr * (dlogits.T @ feats)
            head.bias -= lr * dlogits.sum(axis=0)
            total += value
        losses.append(total / len(batches))
    return losses


def ensemble_logits(net: bb.MaskedNet, x, task: int) -> np.ndarray:
    """Per-original-class logits averaged over the rotation orbit.

    Class j's value is the mean over deg of slot (j, deg) evaluated on the
    deg-rotated input. Evaluation uses the raw image (no stochastic views).
    """
    head = net.heads.get(task)
    if head is None:
        raise ValueError(f"unknown task {task}")
    if head.kind != "rotation":
        raise ValueError(f"task {task} head has no rotation slots")
    img = np.asarray(x, dtype=np.float64)
    single = img.ndim == 2
    if single:
        img = img[None]
    per_deg = []
    for deg in range(4):
        flat = rotate90(img, deg).reshape(img.shape[0], -1)
        raw = bb.task_raw_logits(net, flat, task)
        per_deg.append(raw[:, deg::4])  # slots (0,deg), (1,deg), ...
    out = np.mean(per_deg, axis=0)
    return out[0] if single else out


def class_logits(net: bb.MaskedNet, x, task: int) -> np.ndarray:
    """Per-original-class logits for any head kind.

    Plain heads emit them directly; rotation heads go through the ensemble.
    x is flat features for plain heads or images for rotation heads.
    """
    head = net.heads.get(task)
    if head is None:
        raise ValueError(f"unknown task {task}")
    if head.kind == "rotation":
        return ensemble_logits(net, x, task)
    return bb.task_raw_logits(net, x, task)
