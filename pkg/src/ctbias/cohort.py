"""Study catalog and exact-quota stratified splitting.

Splits are stratified on ``(manufacturer, label)`` cells. Each cell is
shuffled independently with a Philox stream keyed by ``(seed, cell)``, so
adding or removing a cell never perturbs the others.
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import InfeasibleQuotaError, ValidationError
from .imgio import GE, SIEMENS, SeriesMeta

SPLITS = ("train", "val", "test")

CATALOG_COLUMNS = (
    "study_id",
    "path",
    "manufacturer",
    "series_description",
    "slice_thickness_mm",
    "age",
    "sex",
    "label",
)
SPLIT_COLUMNS = ("study_id", "split")


def stable_hash(*parts) -> int:
    """64-bit digest of ``parts``; stable across processes and Python versions."""
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def keyed_rng(seed: int, *key) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), stable_hash(*key)])))


@dataclass(frozen=True)
class CatalogEntry:
    meta: SeriesMeta
    path: str = ""

    @property
    def study_id(self) -> str:
        return self.meta.study_id

    @property
    def cell(self) -> tuple[str, Optional[str]]:
        return (self.meta.manufacturer, self.meta.label)


@dataclass(frozen=True)
class Catalog:
    entries: tuple[CatalogEntry, ...]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, study_id: str) -> CatalogEntry:
        return self._index[study_id]

    @property
    def _index(self) -> dict[str, CatalogEntry]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {e.study_id: e for e in self.entries}
            object.__setattr__(self, "_idx", idx)
        return idx

    @property
    def study_ids(self) -> list[str]:
        return [e.study_id for e in self.entries]

    def cell_counts(self) -> Counter:
        return Counter(e.cell for e in self.entries)

    def marginals(self) -> dict[str, int]:
        return dict(Counter(e.meta.manufacturer for e in self.entries))

    def subset(self, study_ids: Iterable[str]) -> "Catalog":
        keep = set(study_ids)
        return Catalog(tuple(e for e in self.entries if e.study_id in keep))


def build_catalog(
    items: Iterable[CatalogEntry | tuple[SeriesMeta, str] | SeriesMeta],
    check_paths: bool = False,
) -> Catalog:
    """Validate entries into a :class:`Catalog`.

    Accepts entries, ``(meta, path)`` pairs or bare metas. With
    ``check_paths`` every locator must exist on disk.
    """
    entries = []
    for item in items:
        if isinstance(item, CatalogEntry):
            entry = item
        elif isinstance(item, SeriesMeta):
            entry = CatalogEntry(item, "")
        else:
            meta, path = item
            entry = CatalogEntry(meta, str(path))
        if not str(entry.meta.manufacturer).strip():
            raise ValidationError(f"study {entry.study_id!r} has no manufacturer")
        entries.append(entry)
    if not entries:
        raise ValidationError("catalog must contain at least one study")
    dupes = sorted(sid for sid, n in Counter(e.study_id for e in entries).items() if n > 1)
    if dupes:
        raise ValidationError(f"duplicate study ids: {dupes[:10]}")
    if check_paths:
        missing = [e.study_id for e in entries if not e.path or not Path(e.path).exists()]
        if missing:
            raise ValidationError(f"unresolvable volume paths for studies {missing[:10]}")
    return Catalog(tuple(entries))


# ---------------------------------------------------------------------------
# quotas

QuotaKey = tuple[str, str, Optional[str]]  # (split, manufacturer, label)


@dataclass(frozen=True)
class SplitQuota:
    counts: Mapping[QuotaKey, int]

    def __post_init__(self):
        bad = {k: v for k, v in self.counts.items() if int(v) < 0 or k[0] not in SPLITS}
        if bad:
            raise ValidationError(f"invalid quota cells: {bad}")

    def cell_total(self, manufacturer: str, label: Optional[str]) -> int:
        return sum(self.counts.get((s, manufacturer, label), 0) for s in SPLITS)

    def split_sizes(self) -> dict[str, int]:
        return {s: sum(v for k, v in self.counts.items() if k[0] == s) for s in SPLITS}

    @property
    def cells(self) -> set[tuple[str, Optional[str]]]:
        return {(m, lab) for (_s, m, lab) in self.counts}

    def rename(self, mapping: Mapping[str, str]) -> "SplitQuota":
        return SplitQuota({(s, mapping.get(m, m), lab): n for (s, m, lab), n in self.counts.items()})


_TABLE1_ROWS = {
    # split: (positives, negatives) per manufacturer
    "train": (138, 138),
    "val": (17, 17),
    "test": (40, 41),
}


def table1_quota(group_a: str = GE, group_b: str = SIEMENS) -> SplitQuota:
    """The published 782-study split (552/68/162) as exact per-cell counts."""
    counts = {}
    for split, (pos, neg) in _TABLE1_ROWS.items():
        for manu in (group_a, group_b):
            counts[(split, manu, "positive")] = pos
            counts[(split, manu, "negative")] = neg
    return SplitQuota(counts)


DEFAULT_FRACTIONS = {"train": 0.70, "val": 0.09, "test": 0.21}


def largest_remainder(total: int, weights: Mapping[str, float]) -> dict[str, int]:
    """Apportion ``total`` integer seats to ``weights`` (Hamilton's method).

    Ties in the remainders go to the key that sorts first.
    """
    wsum = float(sum(weights.values()))
    if wsum <= 0:
        raise ValidationError("weights must sum to a positive value")
    exact = {k: total * w / wsum for k, w in weights.items()}
    seats = {k: int(math.floor(v)) for k, v in exact.items()}
    left = total - sum(seats.values())
    order = sorted(exact, key=lambda k: (-(exact[k] - seats[k]), k))
    for k in order[:left]:
        seats[k] += 1
    return seats


def quota_from_fractions(catalog: Catalog, fractions: Mapping[str, float] = DEFAULT_FRACTIONS) -> SplitQuota:
    """Per-cell largest-remainder quota for the given split fractions."""
    unknown = set(fractions) - set(SPLITS)
    if unknown:
        raise ValidationError(f"unknown split names {sorted(unknown)}")
    weights = {s: float(fractions.get(s, 0.0)) for s in SPLITS}
    counts = {}
    for (manu, label), n in sorted(catalog.cell_counts().items(), key=lambda kv: _cell_key(kv[0])):
        for split, k in largest_remainder(n, weights).items():
            counts[(split, manu, label)] = k
    return SplitQuota(counts)


def all_train_quota(catalog: Catalog) -> SplitQuota:
    return SplitQuota({("train", m, lab): n for (m, lab), n in catalog.cell_counts().items()})


def _cell_key(cell) -> tuple[str, str]:
    manu, label = cell
    return (manu, label or "")


# ---------------------------------------------------------------------------
# splitting

@dataclass(frozen=True)
class SplitAssignment:
    splits: Mapping[str, str]
    seed: int
    quota: Optional[SplitQuota] = None

    def ids(self, split: str) -> list[str]:
        return sorted(sid for sid, s in self.splits.items() if s == split)

    def sizes(self) -> dict[str, int]:
        c = Counter(self.splits.values())
        return {s: c.get(s, 0) for s in SPLITS}


def make_split(catalog: Catalog, quota: SplitQuota, seed: int) -> SplitAssignment:
    """Assign every study to train/val/test so each cell matches ``quota`` exactly."""
    cells = catalog.cell_counts()
    offending = []
    for cell in sorted(set(cells) | quota.cells, key=_cell_key):
        have, want = cells.get(cell, 0), quota.cell_total(*cell)
        if have != want:
            offending.append((cell, have, want))
    if offending:
        desc = ", ".join(f"{m}/{lab}: catalog {h} vs quota {w}" for (m, lab), h, w in offending)
        raise InfeasibleQuotaError(f"quota does not match catalog cells ({desc})", [c for c, _, _ in offending])

    members = defaultdict(list)
    for e in catalog:
        members[e.cell].append(e.study_id)
    splits = {}
    for cell in sorted(members, key=_cell_key):
        ids = sorted(members[cell])
        order = keyed_rng(seed, "split-cell", *_cell_key(cell)).permutation(len(ids))
        pos = 0
        for split in SPLITS:
            n = quota.counts.get((split, *cell), 0)
            for i in order[pos : pos + n]:
                splits[ids[i]] = split
            pos += n
    return SplitAssignment(dict(sorted(splits.items())), int(seed), quota)


@dataclass
class BalanceReport:
    counts: dict[QuotaKey, int]
    age: dict[str, tuple[float, float]]
    sex: dict[str, dict[str, float]]
    flags: list[tuple[QuotaKey, int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags


def verify_balance(
    assignment: SplitAssignment, catalog: Catalog, quota: Optional[SplitQuota] = None
) -> BalanceReport:
    """Per-split cell counts, demographic summaries, and cells that miss their quota."""
    quota = quota or assignment.quota
    counts: Counter = Counter()
    for e in catalog:
        split = assignment.splits.get(e.study_id)
        if split is not None:
            counts[(split, *e.cell)] += 1
    cells = sorted(catalog.cell_counts(), key=_cell_key)
    if quota is not None:
        cells = sorted(set(cells) | quota.cells, key=_cell_key)
    table = {(s, *c): counts.get((s, *c), 0) for s in SPLITS for c in cells}

    flags = []
    if quota is not None:
        for key, have in table.items():
            want = quota.counts.get(key, 0)
            if have != want:
                flags.append((key, have, want))

    age, sex = {}, {}
    for manu in sorted({e.meta.manufacturer for e in catalog}):
        group = [e.meta for e in catalog if e.meta.manufacturer == manu]
        ages = np.array([m.patient_age for m in group if m.patient_age is not None], dtype=float)
        if ages.size:
            age[manu] = (float(ages.mean()), float(ages.std(ddof=1)) if ages.size > 1 else 0.0)
        c = Counter(m.patient_sex for m in group)
        sex[manu] = {k: c.get(k, 0) / len(group) for k in ("M", "F", "Unknown")}
    return BalanceReport(table, age, sex, flags)


# ---------------------------------------------------------------------------
# CSV persistence

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_catalog_csv(catalog: Catalog, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CATALOG_COLUMNS)
        for e in catalog:
            m = e.meta
            w.writerow(
                [
                    m.study_id,
                    e.path,
                    m.manufacturer,
                    m.series_description,
                    _fmt(m.slice_thickness),
                    _fmt(m.patient_age),
                    m.patient_sex,
                    _fmt(m.label),
                ]
            )
    return path


def _opt_float(text: str, where: str) -> Optional[float]:
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"{where}: not a number: {text!r}") from None


def read_catalog_csv(path, check_paths: bool = False) -> Catalog:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CATALOG_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing catalog columns {sorted(missing)}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if not row["manufacturer"].strip():
                raise ValidationError(f"{where}: missing manufacturer")
            try:
                meta = SeriesMeta(
                    study_id=row["study_id"],
                    manufacturer=row["manufacturer"],
                    series_description=row["series_description"],
                    slice_thickness=_opt_float(row["slice_thickness_mm"], where),
                    patient_age=_opt_float(row["age"], where),
                    patient_sex=row["sex"] or "Unknown",
                    label=row["label"] or None,
                )
            except ValidationError as exc:
                raise ValidationError(f"{where}: {exc}") from None
            p = row["path"]
            if p and not Path(p).is_absolute():
                p = str(path.parent / p)
            entries.append(CatalogEntry(meta, p))
    return build_catalog(entries, check_paths=check_paths)


def write_split_csv(assignment: SplitAssignment, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPLIT_COLUMNS)
        for sid, split in sorted(assignment.splits.items()):
            w.writerow([sid, split])
    return path


def read_split_csv(path, seed: int = 0) -> SplitAssignment:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SPLIT_COLUMNS:
            raise ValidationError(f"{path}: expected columns {SPLIT_COLUMNS}")
        splits = {}
        for lineno, row in enumerate(reader, start=2):
            if row["split"] not in SPLITS:
                raise ValidationError(f"{path}:{lineno}: unknown split {row['split']!r}")
            splits[row["study_id"]] = row["split"]
    return SplitAssignment(splits, seed)


def read_quota_csv(path) -> SplitQuota:
    """Quota file with columns ``split, manufacturer, label, count``."""
    path = Path(path)
    counts = {}
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                key = (row["split"], row["manufacturer"], row["label"] or None)
                counts[key] = int(row["count"])
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad quota row ({exc})") from None
    return SplitQuota(counts)
