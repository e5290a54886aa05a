"""Class-incremental prediction from per-task heads.

Routes, all consuming a list of per-task class-logit vectors: plain
concatenated argmax; the probabilistic composition of per-task softmax (WP)
with a task distribution derived from task-membership scores (TP); and an
affine per-task calibration of the logits fitted on a small memory buffer.
Ties always break toward the lowest index so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from . import theory as th

__all__ = [
    "CalibrationParams",
    "MemoryBuffer",
    "predict_concat_argmax",
    "tp_sigmoid_maxlogit",
    "wp_temperature",
    "tp_maxsoftmax_temperature",
    "compose_full",
    "calibrated_logits",
    "calibration_loss",
    "fit_calibration",
]

# defaults for the temperature composition and the calibration optimizer
DEFAULT_NU = 0.1
DEFAULT_TAU = 5.0
CALIBRATION_ITERS = 160
CALIBRATION_LR = 0.01
CALIBRATION_BATCH = 15


@dataclass
class CalibrationParams:
    """Per-task affine logit adjustment alpha_k * f_k + beta_k."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 1:
            raise ValueError("alpha/beta must be equal-length vectors")
        if not (np.isfinite(self.alpha).all() and np.isfinite(self.beta).all()):
            raise ValueError("calibration parameters must be finite")

    @classmethod
    def identity(cls, n_tasks: int) -> "CalibrationParams":
        return cls(np.ones(n_tasks), np.zeros(n_tasks))


@dataclass
class MemoryBuffer:
    """Class-balanced replay samples: (input, global class, task id)."""

    capacity: int
    inputs: list = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    tasks: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def build(cls, capacity: int, per_class_pools: dict[int, tuple],
              rng: np.random.Generator) -> "MemoryBuffer":
        """Fill to capacity, balanced within one sample per class.

        per_class_pools maps global class -> (inputs array, task id). Low
        class ids receive the remainder slots.
        """
        classes = sorted(per_class_pools)
        if not classes:
            raise ValueError("no classes to buffer")
        base, extra = divmod(capacity, len(classes))
        buf = cls(capacity)
        for rank, c in enumerate(classes):
            pool, task = per_class_pools[c]
            quota = min(base + (1 if rank < extra else 0), len(pool))
            for i in rng.permutation(len(pool))[:quota]:
                buf.inputs.append(np.asarray(pool[i], dtype=np.float64))
                buf.labels.append(int(c))
                buf.tasks.append(int(task))
        return buf


def predict_concat_argmax(per_task_logits: list) -> int:
    """Global argmax over the concatenated head outputs."""
    if not per_task_logits:
        raise ValueError("no task logits")
    return int(np.argmax(np.concatenate(
        [np.asarray(v, dtype=np.float64) for v in per_task_logits])))


def tp_sigmoid_maxlogit(per_task_logits: list) -> np.ndarray:
    """Task distribution from detectors sigmoid(max f_k), normalized."""
    if not per_task_logits:
        raise ValueError("no task logits")
    top = np.array([float(np.max(v)) for v in per_task_logits])
    profile = 1.0 / (1.0 + np.exp(-top))
    return th.tp_from_ood(profile)


def wp_temperature(logits, nu: float = DEFAULT_NU) -> np.ndarray:
    """softmax(logits / nu); nu -> 0 sharpens toward the argmax."""
    if nu <= 0:
        raise ValueError(f"nu must be positive, got {nu}")
    return nk.softmax(np.asarray(logits, dtype=np.float64) / nu)


def tp_maxsoftmax_temperature(per_task_logits: list,
                              taus=DEFAULT_TAU) -> np.ndarray:
    """Task distribution from detectors max_j softmax(f_k / tau_k)_j."""
    if not per_task_logits:
        raise ValueError("no task logits")
    t = np.asarray(taus, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(len(per_task_logits), float(t))
    if (t <= 0).any():
        raise ValueError("temperatures must be positive")
    profile = np.array([msp for msp in
                        (float(np.max(nk.softmax(np.asarray(v) / tk)))
                         for v, tk in zip(per_task_logits, t))])
    return th.tp_from_ood(profile)


def compose_full(wp: list, tp, topo: th.TaskTopology
                 ) -> tuple[np.ndarray, int]:
    """Composed global distribution wp[k][j] * tp[k] and its argmax class."""
    cil = th.compose_cil(wp, tp, topo)
    return cil, int(np.argmax(cil))


def calibrated_logits(per_task_logits: list,
                      params: CalibrationParams) -> np.ndarray:
    """Concatenation of alpha_k * f_k + beta_k."""
    if len(per_task_logits) != params.alpha.size:
        raise ValueError(f"{len(per_task_logits)} tasks vs "
                         f"{params.alpha.size} calibration entries")
    return np.concatenate([params.alpha[k] * np.asarray(v, dtype=np.float64)
                           + params.beta[k]
                           for k, v in enumerate(per_task_logits)])


def calibration_loss(stacked: np.ndarray, labels: np.ndarray,
                     widths: list[int], alpha: np.ndarray, beta: np.ndarray
                     ) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy of softmax over the calibrated concatenation plus its
    gradients w.r.t. (alpha, beta).

    stacked (n, total_width) holds each sample's concatenated per-task
    logits; widths gives the per-task column spans.
    """
    offsets = np.concatenate([[0], np.cumsum(widths)])
    task_of_col = np.concatenate([np.full(w, k) for k, w in enumerate(widths)])
    z = stacked * alpha[task_of_col] + beta[task_of_col]
    loss, dz = nk.softmax_ce(z, labels)
    dz = np.atleast_2d(dz)
    flat = np.atleast_2d(stacked)
    d_alpha = np.array([(dz[:, offsets[k]:offsets[k + 1]]
                         * flat[:, offsets[k]:offsets[k + 1]]).sum()
                        for k in range(len(widths))])
    d_beta = np.array([dz[:, offsets[k]:offsets[k + 1]].sum()
                       for k in range(len(widths))])
    return loss, d_alpha, d_beta


def fit_calibration(logit_fn, buffer: MemoryBuffer, *,
                    iters: int = CALIBRATION_ITERS,
                    lr: float = CALIBRATION_LR,
                    batch_size: int = CALIBRATION_BATCH,
                    seed: int = 0) -> tuple[CalibrationParams, list[float]]:
    """SGD on the buffer cross-entropy of the calibrated concatenation.

    logit_fn(x) -> list of per-task class logits (whatever the configured
    prediction path emits). Head outputs are precomputed once: calibration
    never touches model weights. Returns the best parameters seen by
    full-buffer loss, so the final loss never exceeds the initial, plus the
    per-iteration loss history.
    """
    if len(buffer) == 0:
        raise ValueError("empty memory buffer")
    per_sample = [logit_fn(x) for x in buffer.inputs]
    n_tasks = len(per_sample[0])
    widths = [np.asarray(v).size for v in per_sample[0]]
    stacked = np.stack([np.concatenate([np.asarray(v, dtype=np.float64)
                                        for v in row]) for row in per_sample])
    labels = np.asarray(buffer.labels, dtype=np.intp)

    rng = np.random.default_rng(seed)
    alpha = np.ones(n_tasks)
    beta = np.zeros(n_tasks)
    initial = calibration_loss(stacked, labels, widths, alpha, beta)[0]
    best = (initial, alpha.copy(), beta.copy())
    history = [initial]
    n = len(buffer)
    for _ in range(iters):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        _, d_alpha, d_beta = calibration_loss(stacked[idx], labels[idx],
                                              widths, alpha, beta)
        alpha -= lr * d_alpha
        beta -= lr * d_beta
        current = calibration_loss(stacked, labels, widths, alpha, beta)[0]
        history.append(current)
        if current < best[0]:
            best = (current, alpha.copy(), beta.copy())
    return CalibrationParams(best[1], best[2]), history
