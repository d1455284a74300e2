"""Experiment inputs: load or synthesize studies, split them, and wrap them
as training datasets."""

from __future__ import annotations

from dataclasses import dataclass, field


import numpy as np

from ..cohort import (
    Catalog,
    SplitAssignment,
    build_catalog,
    make_split,
    quota_from_fractions,
    read_catalog_csv,
    read_quota_csv,
    read_split_csv,
    stable_hash,
    table1_quota,
)
from ..errors import ValidationError
from ..imgio import GE, SIEMENS, load_nifti
from ..synthlab import (
    DEFAULT_SIGNATURES,
    PhantomSpec,
    SignatureParams,
    build_tier_dataset,
    designate_labels,
    phantom_cohort,
    resample_for_segmentation,
    strip_skull,
    tier_spec,
)
from ..volgrid import BRAIN_WINDOW, BROAD_WINDOW, window_array
from .config import ExperimentConfig

GROUP_A, GROUP_B = GE, SIEMENS
REGIME_GROUPS = {"mixed": (GROUP_A, GROUP_B), "group_A_only": (GROUP_A,), "group_B_only": (GROUP_B,)}
STACK_DEPTH = 3


def derive_seed(master: int, *key) -> int:
    """31-bit seed for a named purpose under ``master``."""
    return stable_hash(int(master), *key) % (2**31)


class SliceStackDataset:
    """Three distinct random axial slices per study, stacked as channels.

    Training batches draw fresh slices from the caller's generator, so every
    epoch sees a new stack. Without a generator each study gets one fixed
    stack, keyed by ``eval_seed`` and the study index.
    """

    def __init__(self, volumes: np.ndarray, labels: np.ndarray, eval_seed: int, depth: int = STACK_DEPTH):
        self.volumes = volumes
        self.labels = np.asarray(labels, dtype=np.float64)
        self.eval_seed = int(eval_seed)
        self.depth = depth
        if volumes.shape[3] < depth:
            raise ValidationError(f"slice stacks need at least {depth} slices, volumes have {volumes.shape[3]}")

    def __len__(self):
        return len(self.volumes)

    def batch(self, indices, rng=None):
        out = np.empty((len(indices), self.depth) + self.volumes.shape[1:3])
        nz = self.volumes.shape[3]
        for j, i in enumerate(indices):
            r = rng if rng is not None else np.random.default_rng([self.eval_seed, int(i)])
            z = np.sort(r.choice(nz, self.depth, replace=False))
            out[j] = np.moveaxis(self.volumes[i][:, :, z], 2, 0)
        return out, self.labels[np.asarray(indices)]


class TensorDataset:
    """Fixed float32 inputs (N, C, *S) with targets; batches are float64."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        if len(x) != len(y):
            raise ValidationError(f"{len(x)} inputs but {len(y)} targets")
        self.x = x
        self.y = y

    def __len__(self):
        return len(self.x)

    def batch(self, indices, rng=None):
        idx = np.asarray(indices)
        return self.x[idx].astype(np.float64), self.y[idx].astype(np.float64)


@dataclass
class PreparedData:
    """Everything a training run needs, indexed by sorted study id."""

    experiment: str
    ids: list[str]
    groups: list[str]
    inputs: np.ndarray
    targets: np.ndarray
    split: SplitAssignment
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    eval_seed: int
    extra: dict = field(default_factory=dict)

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        if self.experiment == "name_manufacturer":
            return tuple(self.inputs.shape[1:3])
        return tuple(self.inputs.shape[2:])

    def dataset(self, idx: np.ndarray):
        if self.experiment == "name_manufacturer":
            return SliceStackDataset(self.inputs[idx], self.targets[idx], self.eval_seed)
        return TensorDataset(self.inputs[idx], self.targets[idx])

    def id_list(self, idx) -> list[str]:
        return [self.ids[i] for i in idx]


def phantom_template(cfg: ExperimentConfig) -> PhantomSpec:
    sigs = dict(DEFAULT_SIGNATURES)
    sigs["A"] = SignatureParams(cfg.noise_variance, 1, 0.0)
    sigs["B"] = SignatureParams(cfg.noise_variance, cfg.kernel_width, cfg.streak_amplitude)
    return PhantomSpec(shape=cfg.phantom_shape, signatures=sigs)


def load_studies(cfg: ExperimentConfig):
    """``(catalog, {study_id: Volume})`` from the configured catalog or phantoms."""
    if cfg.catalog:
        catalog = read_catalog_csv(cfg.resolve(cfg.catalog), check_paths=True)
        volumes = {e.study_id: load_nifti(e.path) for e in catalog}
        return catalog, volumes
    metas, volumes = [], {}
    seed = derive_seed(cfg.seed, "phantoms")
    for vol, meta in phantom_cohort(cfg.phantoms_per_signature, seed, phantom_template(cfg)):
        metas.append(meta)
        volumes[meta.study_id] = vol
    return build_catalog(metas), volumes


def split_studies(cfg: ExperimentConfig, catalog: Catalog) -> SplitAssignment:
    if cfg.split_file:
        split = read_split_csv(cfg.resolve(cfg.split_file))
        missing = sorted(set(catalog.study_ids) - set(split.splits))
        if missing:
            raise ValidationError(f"split file has no entry for {len(missing)} studies, e.g. {missing[0]!r}")
        return split
    if cfg.quota_file:
        quota = read_quota_csv(cfg.resolve(cfg.quota_file))
    elif cfg.split_preset == "table1":
        quota = table1_quota(GROUP_A, GROUP_B)
    else:
        quota = quota_from_fractions(catalog)
    return make_split(catalog, quota, derive_seed(cfg.seed, "split"))


def _regime_filter(ids_idx, groups, regime):
    keep = set(REGIME_GROUPS[regime])
    return np.array([i for i in ids_idx if groups[i] in keep], dtype=np.int64)


def prepare(cfg: ExperimentConfig) -> PreparedData:
    catalog, volumes = load_studies(cfg)
    extra = {}
    if cfg.experiment == "sphere_classification":
        if any(e.meta.label is None for e in catalog):
            catalog = designate_labels(catalog, derive_seed(cfg.seed, "labels"))
        masks = {sid: strip_skull(v) for sid, v in volumes.items()}
        tier = build_tier_dataset(catalog, volumes, masks, tier_spec(cfg.tier), derive_seed(cfg.seed, "spheres"))
        volumes = {it.study_id: it.volume for it in tier.items}
        extra["small_spheres"] = len(tier.small_ids)

    split = split_studies(cfg, catalog)
    ids = sorted(catalog.study_ids)
    groups = [catalog[sid].meta.manufacturer for sid in ids]

    if cfg.experiment == "name_manufacturer":
        inputs = np.stack([window_array(volumes[s].data, BROAD_WINDOW) for s in ids]).astype(np.float32)
        targets = np.array([1.0 if g == GROUP_B else 0.0 for g in groups])
    elif cfg.experiment == "sphere_classification":
        inputs = np.stack([window_array(volumes[s].data, BRAIN_WINDOW) for s in ids])[:, None].astype(np.float32)
        targets = np.array([1.0 if catalog[s].meta.label == "positive" else 0.0 for s in ids])
    else:
        x, y = [], []
        for s in ids:
            vol = volumes[s]
            n = cfg.seg_slices or vol.shape[2]
            v, m = resample_for_segmentation(vol, strip_skull(vol), n)
            x.append(window_array(v.data, BRAIN_WINDOW))
            y.append(m.data)
        inputs = np.stack(x)[:, None].astype(np.float32)
        targets = np.stack(y).astype(np.float32)

    where = {sid: i for i, sid in enumerate(ids)}
    idx = {s: np.array(sorted(where[sid] for sid in split.ids(s) if sid in where), dtype=np.int64)
           for s in ("train", "val", "test")}
    train_idx = _regime_filter(idx["train"], groups, cfg.train_regime)
    val_idx = _regime_filter(idx["val"], groups, cfg.train_regime)
    if len(train_idx) < 2:
        raise ValidationError(f"train_regime {cfg.train_regime!r} leaves {len(train_idx)} training studies")
    if len(val_idx) < 1 or len(idx["test"]) < 1:
        raise ValidationError("validation and test splits must be nonempty")
    return PreparedData(
        cfg.experiment, ids, groups, inputs, targets, split, train_idx, val_idx, idx["test"],
        derive_seed(cfg.seed, "eval-stacks"), extra,
    )
