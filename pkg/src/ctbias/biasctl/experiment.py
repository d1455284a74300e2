"""Run an experiment end to end: train an ensemble, select the best runs,
evaluate per manufacturer group and assemble a report bundle.

Runs are independent and may execute in worker processes. Every quantity in
the bundle is a pure function of the config, so serial and parallel
execution give identical bundles.
"""

from __future__ import annotations

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .. import __version__
from ..cohort import stable_hash
from ..errors import ClassError, DivergenceError, InsufficientModelsError
from ..evalkit import (
    RunRecord,
    ScoreSet,
    auroc,
    confusion_metrics,
    dice_score,
    ensemble_scores,
    mean_sd,
    roc_points,
    select_models,
)
from ..tinynn import ArchSpec, TrainConfig, build_model, evaluate, predict, save_checkpoint, train
from .config import EXPERIMENT_TRAIN_DEFAULTS, ExperimentConfig
from .data import GROUP_A, GROUP_B, PreparedData, prepare
from .report import Cell, LedgerEntry, ReportBundle, RocTable, round4

TEST_GROUPS = ("mixed", GROUP_A, GROUP_B)


def run_seed(cfg: ExperimentConfig, index: int) -> int:
    return stable_hash(int(cfg.seed), cfg.experiment, "run", int(index)) % (2**31)


def task_name(cfg: ExperimentConfig) -> str:
    return f"{cfg.experiment}:{cfg.tier}" if cfg.tier else cfg.experiment


def arch_spec(cfg: ExperimentConfig, data: PreparedData) -> ArchSpec:
    from ..tinynn import preset

    overrides = {}
    if cfg.channels is not None:
        overrides["channels"] = cfg.channels
    if cfg.head_width is not None:
        overrides["head_width"] = cfg.head_width
    return preset(cfg.arch_kind, cfg.arch_scale, input_shape=data.spatial_shape, **overrides)


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.train_value("learning_rate"),
        batch_size=cfg.train_value("batch_size"),
        max_epochs=cfg.max_epochs,
        loss=EXPERIMENT_TRAIN_DEFAULTS[cfg.experiment]["loss"],
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
        seed=seed,
        patience=cfg.patience,
        threshold=cfg.convergence_threshold,
        dice_smooth=cfg.dice_smooth,
    )


@dataclass
class RunOutcome:
    index: int
    seed: int
    converged: bool
    diverged: bool = False
    best_epoch: int = 0
    stopped_epoch: int = 0
    val_loss: float = float("inf")
    val_accuracy: float = 0.0
    val_auroc: float = 0.0
    val_dice: Optional[float] = None
    test_probs: Optional[np.ndarray] = None
    network: object = None

    def record(self) -> RunRecord:
        return RunRecord(self.seed, self.val_accuracy, self.val_auroc, self.val_loss, self.converged,
                         model=self.index, val_dice=self.val_dice)


def _inputs(data: PreparedData, idx) -> np.ndarray:
    ds = data.dataset(idx)
    return ds.batch(np.arange(len(ds)), None)[0]


def train_run(cfg: ExperimentConfig, data: PreparedData, index: int,
              batch_log: Optional[Callable] = None, keep_network: bool = False) -> RunOutcome:
    """Train run ``index`` and score it on validation and test data."""
    seed = run_seed(cfg, index)
    model = build_model(arch_spec(cfg, data), seed)
    tc = train_config(cfg, seed)
    train_ds = data.dataset(data.train_idx)
    val_ds = data.dataset(data.val_idx)
    log = None
    if batch_log is not None:
        batch_log(index, 0, "val", data.id_list(data.val_idx))
        log = lambda epoch, idx: batch_log(index, epoch, "train", data.id_list(data.train_idx[idx]))  # noqa: E731

    try:
        res = train(model, train_ds, tc, val=val_ds, log=log)
    except DivergenceError as exc:
        return RunOutcome(index, seed, converged=False, diverged=True, stopped_epoch=exc.epoch or 0)

    out = RunOutcome(index, seed, res.converged, best_epoch=res.best_epoch, stopped_epoch=res.stopped_epoch)
    out.val_loss, metric, p_val = evaluate(model, val_ds, tc)
    if model.task == "classification":
        out.val_accuracy = metric
        try:
            out.val_auroc = auroc(ScoreSet.from_arrays(p_val.reshape(-1), data.targets[data.val_idx]))
        except ClassError:
            out.val_auroc = 0.5
        out.test_probs = predict(model, _inputs(data, data.test_idx))
    else:
        out.val_dice = metric
        out.test_probs = predict(model, _inputs(data, data.test_idx)).astype(np.float32)
    if keep_network:
        out.network = model
    return out


# ---------------------------------------------------------------------------
# execution

_WORKER_CTX: dict = {}


def _worker_init():
    threadpool_limits(1)


def _worker_run(index: int) -> RunOutcome:
    cfg, data, keep = _WORKER_CTX["cfg"], _WORKER_CTX["data"], _WORKER_CTX["keep"]
    return train_run(cfg, data, index, keep_network=keep)


def worker_count() -> int:
    raw = os.environ.get("BIASCTL_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _execute(cfg, data, indices, batch_log, keep) -> list[RunOutcome]:
    workers = min(worker_count(), len(indices))
    if workers <= 1 or batch_log is not None:
        with threadpool_limits(1):
            return [train_run(cfg, data, i, batch_log, keep) for i in indices]
    _WORKER_CTX.update(cfg=cfg, data=data, keep=keep)
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_worker_init) as pool:
            return list(pool.map(_worker_run, indices))
    finally:
        _WORKER_CTX.clear()


def train_ensemble(cfg: ExperimentConfig, data: PreparedData, batch_log=None, keep_networks=False):
    """Attempt runs in waves until ``ensemble_k`` have converged or the
    ``max_attempts`` budget is spent. The first wave is ``runs_per_ensemble``
    runs; later waves only request the shortfall."""
    outcomes: list[RunOutcome] = []
    wave = cfg.runs_per_ensemble
    while True:
        start = len(outcomes)
        outcomes += _execute(cfg, data, list(range(start, start + wave)), batch_log, keep_networks)
        converged = sum(o.converged for o in outcomes)
        if converged >= cfg.ensemble_k or len(outcomes) >= cfg.max_attempts:
            return outcomes
        wave = min(cfg.ensemble_k - converged, cfg.max_attempts - len(outcomes))


# ---------------------------------------------------------------------------
# evaluation

def _score_set(data: PreparedData, probs: np.ndarray) -> ScoreSet:
    idx = data.test_idx
    return ScoreSet(tuple(data.id_list(idx)), np.clip(probs, 0.0, 1.0), data.targets[idx].astype(np.int64),
                    tuple(data.groups[i] for i in idx))


def _summary(values) -> tuple[float, float]:
    s = mean_sd(values)
    return round4(s.mean), round4(s.sd)


def _classification_cells(cfg, data, chosen, task):
    per_model = [_score_set(data, o.test_probs) for o in chosen]
    ens = ensemble_scores(per_model)
    cells, rocs = [], []
    thr = cfg.decision_threshold
    for group in TEST_GROUPS:
        sel = None if group == "mixed" else group
        subsets = [s.select(sel) for s in per_model]
        ens_g = ens.select(sel)
        if len(ens_g) == 0:
            continue
        labels = set(ens_g.labels.tolist())
        metrics, ensemble = {}, {}
        if len(labels) == 2:
            rows = [confusion_metrics(s, thr) + (auroc(s),) for s in subsets]
            for j, name in enumerate(("accuracy", "sensitivity", "specificity", "auroc")):
                metrics[name] = _summary([r[j] for r in rows])
            a, se, sp = confusion_metrics(ens_g, thr)
            ensemble = {"accuracy": a, "sensitivity": se, "specificity": sp, "auroc": auroc(ens_g)}
            rocs.append(RocTable(task, cfg.train_regime, group,
                                 [tuple(round4(v) for v in pt) for pt in roc_points(ens_g)]))
        else:
            # one class only (e.g. a single manufacturer when naming manufacturers): accuracy alone is defined
            acc = [float(np.mean((s.scores >= thr) == (s.labels == 1))) for s in subsets]
            metrics["accuracy"] = _summary(acc)
            ensemble["accuracy"] = float(np.mean((ens_g.scores >= thr) == (ens_g.labels == 1)))
        cells.append(Cell(task, cfg.train_regime, group, metrics,
                          {k: round4(v) for k, v in ensemble.items()}, len(chosen)))
    return cells, rocs


def _segmentation_cells(cfg, data, chosen, task):
    truth = data.targets[data.test_idx] >= 0.5
    groups = [data.groups[i] for i in data.test_idx]
    mean_prob = np.mean([o.test_probs.astype(np.float64) for o in chosen], axis=0)
    cells = []
    for group in TEST_GROUPS:
        rows = [j for j, g in enumerate(groups) if group == "mixed" or g == group]
        if not rows:
            continue
        per_model = [float(np.mean([dice_score(o.test_probs[j] >= 0.5, truth[j]) for j in rows])) for o in chosen]
        ens = float(np.mean([dice_score(mean_prob[j] >= 0.5, truth[j]) for j in rows]))
        cells.append(Cell(task, cfg.train_regime, group, {"dice": _summary(per_model)}, {"dice": round4(ens)},
                          len(chosen)))
    return cells


def run_experiment(cfg: ExperimentConfig, batch_log: Optional[Callable] = None,
                   checkpoint_dir=None, data: Optional[PreparedData] = None) -> ReportBundle:
    """Train, select and evaluate one (experiment, regime) cell block.

    ``batch_log(run_index, epoch, kind, study_ids)`` receives every training
    batch (kind "train") and each run's validation set (kind "val", epoch 0);
    supplying it forces serial execution.
    """
    data = data if data is not None else prepare(cfg)
    task = task_name(cfg)
    keep = bool(cfg.save_checkpoints and checkpoint_dir is not None)
    outcomes = train_ensemble(cfg, data, batch_log, keep)
    converged = [o for o in outcomes if o.converged]
    ledger = LedgerEntry(task, cfg.train_regime, len(outcomes), len(converged),
                         sum(o.diverged for o in outcomes), 0)
    try:
        records = select_models([o.record() for o in outcomes], cfg.ensemble_k)
    except InsufficientModelsError as exc:
        exc.ledger.update(task=task, train_regime=cfg.train_regime, diverged=ledger.diverged)
        raise
    chosen_idx = sorted(r.model for r in records)
    chosen = [outcomes[i] for i in chosen_idx]
    ledger.selected = len(chosen)

    if cfg.experiment == "skull_segmentation":
        cells, rocs = _segmentation_cells(cfg, data, chosen, task), []
    else:
        cells, rocs = _classification_cells(cfg, data, chosen, task)

    if keep:
        for o in chosen:
            save_checkpoint(o.network, Path(checkpoint_dir) / f"run{o.index:03d}", train_config(cfg, o.seed))

    runs = []
    for o in outcomes:
        runs.append({
            "task": task,
            "train_regime": cfg.train_regime,
            "index": o.index,
            "seed": o.seed,
            "converged": o.converged,
            "diverged": o.diverged,
            "selected": o.index in chosen_idx,
            "best_epoch": o.best_epoch,
            "stopped_epoch": o.stopped_epoch,
            "val_loss": round4(o.val_loss),
            "val_accuracy": round4(o.val_accuracy),
            "val_auroc": round4(o.val_auroc),
            "val_dice": None if o.val_dice is None else round4(o.val_dice),
        })
    provenance = {
        "task": task,
        "train_regime": cfg.train_regime,
        "config_hash": cfg.config_hash(),
        "master_seed": int(cfg.seed),
        "run_seeds": [o.seed for o in outcomes],
        "version": __version__,
        "n_train": int(len(data.train_idx)),
        "n_val": int(len(data.val_idx)),
        "n_test": int(len(data.test_idx)),
        "config": cfg.to_dict(),
    }
    return ReportBundle(cells, rocs, [ledger], runs, [provenance])
