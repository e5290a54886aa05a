"""Experiment orchestration: sequential training, evaluation, calibration.

A run is fully determined by (config, seed): data construction, training,
scoring, and report serialization all flow from seeded generators, so two
runs of the same config produce byte-identical reports. Wall-clock timing is
printed, never written into the canonical report bytes.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION, __version__
from . import backbones as bb
from . import composer as cp
from . import data as dt
from . import metrics as mt
from . import oodlab as ol
from . import theory as th
from .checkpoint import load_checkpoint, save_checkpoint, write_atomic
from .config import ExperimentConfig

__all__ = [
    "ExperimentReport",
    "build_tasks",
    "train_run",
    "eval_run",
    "calibrate_run",
    "write_report",
]

SCORERS = ("msp", "maxlogit", "odin", "rotation-ensemble")
ROUTES = ("concat-argmax", "compose", "calibrated")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CLWB_THREADS", "1")))
    except ValueError:
        return 1


def build_tasks(cfg: ExperimentConfig) -> dt.TaskSequence:
    """Materialize the task sequence the config describes."""
    t = cfg.tasks
    if cfg.data.source == "synthetic":
        return dt.synth_gaussian_tasks(
            t.count, t.classes_per_task, cfg.data.dim, cfg.data.separation,
            cfg.data.per_class, seed=cfg.seed,
            n_test_per_class=cfg.data.test_per_class or None)
    n_classes = t.count * t.classes_per_task + len(t.drop_classes)
    train = dt.LabeledImageSet(dt.load_idx(cfg.data.train_images),
                               dt.load_idx(cfg.data.train_labels), n_classes)
    test = dt.LabeledImageSet(dt.load_idx(cfg.data.test_images),
                              dt.load_idx(cfg.data.test_labels), n_classes)
    if t.drop_classes:
        train, test = (_drop_classes(s, t.drop_classes) for s in (train, test))
    return dt.split_tasks(train, test, t.classes_per_task,
                          shuffle_seed=cfg.seed if t.shuffle_classes else None)


def _drop_classes(dataset: dt.LabeledImageSet,
                  drop: list[int]) -> dt.LabeledImageSet:
    keep = [c for c in range(dataset.n_classes) if c not in set(drop)]
    renumber = {c: i for i, c in enumerate(keep)}
    mask = np.isin(dataset.labels, keep)
    labels = np.array([renumber[int(y)] for y in dataset.labels[mask]],
                      dtype=np.intp)
    return dt.LabeledImageSet(dataset.images[mask], labels, len(keep))


def _build_net(cfg: ExperimentConfig, input_dim: int) -> bb.MaskedNet:
    b = cfg.backbone
    return bb.build_masked_net(input_dim, b.hidden, isolation=b.kind,
                               seed=cfg.seed, s_max=b.s_max,
                               lambdas=b.lambdas, sparsity=b.sparsity)


def _til_predictions(net: bb.MaskedNet, test: dt.LabeledImageSet,
                     task: int) -> np.ndarray:
    return np.argmax(ol.class_logits(net, test.images, task), axis=1)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_run(cfg: ExperimentConfig, out_dir) -> dict:
    """Train all tasks sequentially; one checkpoint per finished task plus a
    final checkpoint carrying the accuracy history. Returns artifact paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seq = build_tasks(cfg)
    sample = seq.tasks[0][0].images[0]
    net = _build_net(cfg, sample.size)

    matrix = mt.AccuracyMatrix()
    trace: dict = {"tasks": [], "config": cfg.text, "seed": cfg.seed}
    losscfg = cfg.loss
    paths = []
    for k in range(seq.n_tasks):
        train, _ = seq.tasks[k]
        stats = bb.train_task(
            net, k, train, loss=losscfg.kind, epochs=cfg.backbone.epochs,
            lr=cfg.backbone.lr, batch_size=cfg.backbone.batch, seed=cfg.seed,
            contrastive_epochs=losscfg.contrastive_epochs or None,
            head_epochs=losscfg.head_epochs or None,
            head_lr=losscfg.head_lr or None,
            contrastive_tau=losscfg.temperature,
            flip_prob=losscfg.flip_prob, noise_sigma=losscfg.noise_sigma)
        for j in range(k + 1):
            test_j = seq.tasks[j][1]
            acc = mt.cil_accuracy(_til_predictions(net, test_j, j),
                                  test_j.labels)
            matrix.record(j, k, acc)
        trace["tasks"].append({"task": k, "epochs": [asdict(e) for e in stats],
                               "til_so_far": [matrix.at(j, k)
                                              for j in range(k + 1)]})
        path = out / f"task{k + 1}.clwb"
        save_checkpoint(path, net, extra=_extra(cfg, matrix))
        paths.append(str(path))

    final = out / "final.clwb"
    save_checkpoint(final, net, extra=_extra(cfg, matrix))
    write_atomic(out / "trace.json",
                 json.dumps(trace, sort_keys=True, indent=1).encode())
    return {"checkpoints": paths, "final": str(final),
            "trace": str(out / "trace.json"), "matrix": matrix}


def _extra(cfg: ExperimentConfig, matrix: mt.AccuracyMatrix) -> dict:
    return {"config": cfg.text, "seed": cfg.seed,
            "accuracy_matrix": matrix.to_lists()}


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def _scorer_params(cfg: ExperimentConfig, net: bb.MaskedNet,
                   seq: dt.TaskSequence, scorer: str) -> dict[int, ol.OdinParams]:
    """Per-task ODIN settings: fixed from config, or grid-searched by
    validation AUC on a held-out slice of the training data."""
    if scorer != "odin":
        return {}
    if not cfg.ood.odin_grid:
        p = ol.OdinParams(cfg.ood.odin_tau, cfg.ood.odin_eps)
        return {k: p for k in range(seq.n_tasks)}
    splits = [dt.validation_split(seq.tasks[k][0], cfg.ood.validation_fraction,
                                  seed=cfg.seed)[1] for k in range(seq.n_tasks)]
    params = {}
    for k in range(seq.n_tasks):
        best = None
        for tau in ol.ODIN_TAU_GRID:
            for eps in ol.ODIN_EPS_GRID:
                cand = ol.OdinParams(tau, eps)
                ind = np.atleast_1d(ol.odin_score(net, splits[k].images, k, cand))
                ood = np.concatenate(
                    [np.atleast_1d(ol.odin_score(net, splits[j].images, k, cand))
                     for j in range(seq.n_tasks) if j != k]) \
                    if seq.n_tasks > 1 else np.array([0.0])
                val_auc = mt.auc(mt.ScoredPopulation(ind, ood)) \
                    if seq.n_tasks > 1 else 0.5
                if best is None or val_auc > best[0]:
                    best = (val_auc, cand)
        params[k] = best[1]
    return params


def _score_task(net: bb.MaskedNet, images: np.ndarray, task: int, scorer: str,
                odin: dict[int, ol.OdinParams]) -> np.ndarray:
    """msp/maxlogit/odin post-process the raw head output (rotation slots
    included, for rotation heads); rotation-ensemble scores the orbit-averaged
    class logits."""
    if scorer == "msp":
        return np.atleast_1d(ol.msp_score(
            np.atleast_2d(bb.task_raw_logits(net, images, task))))
    if scorer == "maxlogit":
        z = np.atleast_2d(bb.task_raw_logits(net, images, task))
        return 1.0 / (1.0 + np.exp(-z.max(axis=1)))
    if scorer == "odin":
        return np.atleast_1d(ol.odin_score(net, images, task, odin[task]))
    if scorer == "rotation-ensemble":
        return np.atleast_1d(ol.msp_score(ol.ensemble_logits(net, images, task)))
    raise ValueError(f"unknown scorer {scorer!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    """Everything one evaluation produces; serialized to JSON and CSV."""

    seed: int
    backbone: str
    loss: str
    scorer: str
    route: str
    n_test: int
    til_per_task: list[float]
    til_avg: float
    cil: float
    auc_per_task: list[float]
    auc_avg: float
    forgetting: list[float]
    h_wp_mean: float
    h_tp_mean: float
    h_cil_mean: float
    odin_params: dict
    config_text: str
    clwb_version: str = __version__
    format_version: int = CHECKPOINT_FORMAT_VERSION
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    CSV_COLUMNS = ("backbone", "loss", "scorer", "route", "auc_avg", "cil",
                   "til_avg", "forgetting_final", "seed")

    def csv_row(self) -> list[str]:
        forget = self.forgetting[-1] if self.forgetting else 0.0
        return [self.backbone, self.loss, self.scorer, self.route,
                f"{self.auc_avg:.4f}", f"{self.cil:.1f}", f"{self.til_avg:.1f}",
                f"{forget:.1f}", str(self.seed)]


def eval_run(cfg: ExperimentConfig, checkpoint_path, *, scorer: str | None = None,
             route: str | None = None,
             calibration: cp.CalibrationParams | None = None
             ) -> ExperimentReport:
    """Score a trained checkpoint without retraining.

    scorer/route override the config; ODIN is evaluation-time post-processing
    on the stored heads. The checkpoint file is never written.
    """
    net, meta = load_checkpoint(checkpoint_path)
    seq = build_tasks(cfg)
    scorer = scorer or cfg.ood.scorer
    route = route or cfg.predict.route
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}")
    if route not in ROUTES:
        raise ValueError(f"unknown route {route!r}")
    if route == "calibrated" and calibration is None:
        calibration = cp.CalibrationParams.identity(seq.n_tasks)

    test_images = np.concatenate([seq.tasks[k][1].images
                                  for k in range(seq.n_tasks)])
    test_task_of = np.concatenate([np.full(len(seq.tasks[k][1]), k)
                                   for k in range(seq.n_tasks)])
    truth_local = np.concatenate([seq.tasks[k][1].labels
                                  for k in range(seq.n_tasks)])
    topo = seq.topology
    truth_global = np.array([seq.global_label(k, j)
                             for k, j in zip(test_task_of, truth_local)])

    odin = _scorer_params(cfg, net, seq, scorer)

    def logits_for(task: int) -> np.ndarray:
        return np.atleast_2d(ol.class_logits(net, test_images, task))

    def scores_for(task: int) -> np.ndarray:
        return _score_task(net, test_images, task, scorer, odin)

    n_threads = _threads()
    tasks = list(range(seq.n_tasks))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            per_task_logits = list(pool.map(logits_for, tasks))
            per_task_scores = list(pool.map(scores_for, tasks))
    else:
        per_task_logits = [logits_for(k) for k in tasks]
        per_task_scores = [scores_for(k) for k in tasks]

    # AUC_k: task k's own test data against everyone else's, scored by task k
    auc_per_task = []
    for k in tasks:
        ind = per_task_scores[k][test_task_of == k]
        ood = per_task_scores[k][test_task_of != k]
        if ood.size == 0:
            auc_per_task.append(0.5)  # single task: separation undefined
        else:
            auc_per_task.append(mt.auc(mt.ScoredPopulation(ind, ood)))

    predictions, reports = _predict_all(
        cfg, route, per_task_logits, per_task_scores, topo,
        test_task_of, truth_local, calibration)
    cil = mt.cil_accuracy(predictions, truth_global)

    til_per_task = []
    for k in tasks:
        mask = test_task_of == k
        til_per_task.append(mt.cil_accuracy(
            per_task_logits[k][mask].argmax(axis=1), truth_local[mask]))
    til_avg = float(np.mean(til_per_task))

    forgetting = []
    if "accuracy_matrix" in meta.get("extra", {}):
        matrix = mt.AccuracyMatrix.from_lists(meta["extra"]["accuracy_matrix"])
        t_learned = len(meta["finished"])
        forgetting = [mt.forgetting_rate(matrix, t) for t in
                      range(2, t_learned + 1)]

    return ExperimentReport(
        seed=cfg.seed, backbone=net.kind, loss=cfg.loss.kind, scorer=scorer,
        route=route, n_test=len(test_images),
        til_per_task=til_per_task, til_avg=til_avg, cil=cil,
        auc_per_task=auc_per_task,
        auc_avg=mt.avg_auc(auc_per_task), forgetting=forgetting,
        h_wp_mean=float(np.mean([r.h_wp for r in reports])),
        h_tp_mean=float(np.mean([r.h_tp for r in reports])),
        h_cil_mean=float(np.mean([r.h_cil for r in reports])),
        odin_params={str(k): {"tau": p.tau, "eps": p.eps}
                     for k, p in odin.items()},
        config_text=cfg.text,
    )


def _predict_all(cfg, route, per_task_logits, per_task_scores, topo,
                 test_task_of, truth_local, calibration):
    """Per-sample class prediction plus the entropy report of the route's
    (implied) decomposition; the additive identity holds for every route."""
    n = per_task_logits[0].shape[0]
    predictions = np.empty(n, dtype=np.intp)
    reports = []
    for i in range(n):
        row_logits = [per_task_logits[k][i] for k in range(topo.n_tasks)]
        truth = th.GroundTruth(int(test_task_of[i]), int(truth_local[i]))
        if route == "compose":
            wp = [cp.wp_temperature(v, cfg.predict.nu) for v in row_logits]
            tp = _tp_for(cfg, row_logits,
                         np.array([s[i] for s in per_task_scores]))
            cil = th.compose_cil(wp, tp, topo, validate=False)
            predictions[i] = int(np.argmax(cil))
            reports.append(th.entropy_report(truth, topo, wp=wp, tp=tp,
                                             validate=False))
        else:
            if route == "calibrated":
                concat = cp.calibrated_logits(row_logits, calibration)
            else:
                concat = np.concatenate(row_logits)
            predictions[i] = int(np.argmax(concat))
            cil = np.exp(concat - concat.max())
            cil /= cil.sum()
            construction = th.theorem4_construct(cil, topo, truth)
            reports.append(th.entropy_report(
                truth, topo, wp=construction.wp_normalized,
                tp=construction.tp / construction.tp.sum(), cil=cil,
                validate=False))
    return predictions, reports


def _tp_for(cfg, row_logits, row_scores) -> np.ndarray:
    kind = cfg.predict.tp
    if kind == "sigmoid-maxlogit":
        return cp.tp_sigmoid_maxlogit(row_logits)
    if kind == "maxsoftmax-temp":
        return cp.tp_maxsoftmax_temperature(row_logits, cfg.predict.tau)
    if kind == "scorer":
        return th.tp_from_ood(np.clip(row_scores, 0.0, 1.0))
    raise ValueError(f"unknown tp construction {kind!r}")


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def calibrate_run(cfg: ExperimentConfig, checkpoint_path
                  ) -> tuple[cp.CalibrationParams, ExperimentReport,
                             ExperimentReport, list[float]]:
    """Fit per-task (alpha, beta) on a memory buffer and report the CIL
    before (plain concat) and after (calibrated concat)."""
    net, _ = load_checkpoint(checkpoint_path)
    seq = build_tasks(cfg)
    rng = np.random.default_rng([cfg.seed, 99])
    pools = {}
    for k in range(seq.n_tasks):
        train, _ = seq.tasks[k]
        for j in range(train.n_classes):
            g = seq.global_label(k, j)
            pools[g] = (train.images[train.labels == j], k)
    buffer = cp.MemoryBuffer.build(cfg.calibrate.buffer, pools, rng)

    def logit_fn(x):
        out = []
        for k in range(seq.n_tasks):
            kind = net.heads[k].kind
            arg = x if kind == "rotation" else np.asarray(x).reshape(-1)
            out.append(np.asarray(ol.class_logits(net, arg, k)))
        return out

    params, history = cp.fit_calibration(
        logit_fn, buffer, iters=cfg.calibrate.iters, lr=cfg.calibrate.lr,
        batch_size=cfg.calibrate.batch, seed=cfg.seed)
    before = eval_run(cfg, checkpoint_path, route="concat-argmax")
    after = eval_run(cfg, checkpoint_path, route="calibrated",
                     calibration=params)
    return params, before, after, history


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_report(report: ExperimentReport, out_dir, stem: str = "report"
                 ) -> tuple[str, str]:
    """Emit canonical JSON and a one-row CSV; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{stem}.json"
    csv_path = out / f"{stem}.csv"
    write_atomic(json_path, report.to_json().encode())
    lines = [",".join(ExperimentReport.CSV_COLUMNS),
             ",".join(report.csv_row())]
    write_atomic(csv_path, ("\n".join(lines) + "\n").encode())
    return str(json_path), str(csv_path)
