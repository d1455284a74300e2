"""Report bundles and their CSV, JSON and markdown renderings.

Numbers are rounded to four decimals when the bundle is assembled, so every
serialization is byte-stable and JSON round-trips to an equal bundle.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from ..errors import FormatError, ValidationError

FORMATS = ("csv", "json", "markdown")
CSV_COLUMNS = ("metric", "mean", "sd", "group", "task", "train_regime", "ensemble", "n_models")
ROC_COLUMNS = ("fpr", "tpr", "threshold")
ROW_LABELS = {"accuracy": "Accuracy", "specificity": "Specificity", "sensitivity": "Sensitivity", "auroc": "AUROC"}
METRIC_ORDER = ("accuracy", "specificity", "sensitivity", "auroc", "dice")
GROUP_ORDER = {"mixed": 0, "GE": 1, "Siemens": 2}


def round4(x) -> float:
    x = float(x)
    return x if not math.isfinite(x) else round(x, 4)


@dataclass
class Cell:
    """Metrics for one (task, train_regime, test_group): per-model mean and
    sd, plus the value of the averaged ensemble."""

    task: str
    train_regime: str
    group: str
    metrics: dict  # name -> (mean, sd)
    ensemble: dict  # name -> value
    n_models: int

    def key(self):
        return (self.task, self.train_regime, GROUP_ORDER.get(self.group, 9), self.group)


@dataclass
class RocTable:
    task: str
    train_regime: str
    group: str
    points: list  # (fpr, tpr, threshold)

    def key(self):
        return (self.task, self.train_regime, GROUP_ORDER.get(self.group, 9), self.group)

    @property
    def filename(self) -> str:
        return f"roc_{self.task.replace(':', '_')}_{self.train_regime}_{self.group}.csv"


@dataclass
class LedgerEntry:
    task: str
    train_regime: str
    attempted: int
    converged: int
    diverged: int
    selected: int

    def key(self):
        return (self.task, self.train_regime)


@dataclass
class ReportBundle:
    cells: list = field(default_factory=list)
    roc: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def cell(self, task: str, train_regime: str, group: str) -> Cell:
        for c in self.cells:
            if (c.task, c.train_regime, c.group) == (task, train_regime, group):
                return c
        raise KeyError((task, train_regime, group))

    def validate(self):
        if not self.cells:
            raise ValidationError("report bundle has no cells")
        for entry in self.ledger:
            n = {c.n_models for c in self.cells if c.key()[:2] == entry.key()}
            if n and n != {entry.selected}:
                raise ValidationError(f"ledger for {entry.key()} selected {entry.selected}, cells used {sorted(n)}")
        for p in self.provenance:
            missing = {"config_hash", "master_seed", "run_seeds", "version"} - set(p)
            if missing:
                raise ValidationError(f"provenance lacks {sorted(missing)}")


def merge_bundles(bundles: Iterable[ReportBundle]) -> ReportBundle:
    out = ReportBundle()
    for b in bundles:
        out.cells += b.cells
        out.roc += b.roc
        out.ledger += b.ledger
        out.runs += b.runs
        out.provenance += b.provenance
    out.cells.sort(key=Cell.key)
    out.roc.sort(key=RocTable.key)
    out.ledger.sort(key=LedgerEntry.key)
    out.runs.sort(key=lambda r: (r["task"], r["train_regime"], r["index"]))
    out.provenance.sort(key=lambda p: (p["task"], p["train_regime"]))
    return out


# ---------------------------------------------------------------------------
# JSON

def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else "-inf" if x < 0 else "nan"
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _unfloat(x):
    return {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}.get(x, x) if isinstance(x, str) else x


def bundle_to_json(bundle: ReportBundle) -> str:
    return json.dumps(_jsonable(asdict(bundle)), sort_keys=True, indent=2) + "\n"


def bundle_from_json(text: str) -> ReportBundle:
    try:
        raw = json.loads(text)
        cells = [
            Cell(c["task"], c["train_regime"], c["group"], {k: tuple(v) for k, v in c["metrics"].items()},
                 dict(c["ensemble"]), int(c["n_models"]))
            for c in raw["cells"]
        ]
        roc = [
            RocTable(r["task"], r["train_regime"], r["group"], [tuple(_unfloat(v) for v in pt) for pt in r["points"]])
            for r in raw["roc"]
        ]
        ledger = [LedgerEntry(**e) for e in raw["ledger"]]
        return ReportBundle(cells, roc, ledger, raw["runs"], raw["provenance"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"not a report bundle: {exc}") from None


def load_bundle(path) -> ReportBundle:
    return bundle_from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# CSV

def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.4f}"


def bundle_csv(bundle: ReportBundle) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in sorted(bundle.cells, key=Cell.key):
        for name in METRIC_ORDER:
            if name in c.metrics:
                mean, sd = c.metrics[name]
                w.writerow([name, _fmt(mean), _fmt(sd), c.group, c.task, c.train_regime,
                            _fmt(c.ensemble.get(name)), c.n_models])
    return buf.getvalue()


def roc_csv(table: RocTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROC_COLUMNS)
    for pt in table.points:
        w.writerow([_fmt(v) for v in pt])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# markdown

def _pct(mean_sd) -> str:
    mean, sd = mean_sd
    return f"{100 * mean:.1f} ± {100 * sd:.1f}"


def _dice(mean_sd) -> str:
    mean, sd = mean_sd
    return f"{mean:.4f} ± {sd:.4f}"


def _table(header, rows) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


def bundle_markdown(bundle: ReportBundle) -> str:
    out = ["# Report", ""]
    blocks: dict = {}
    for c in sorted(bundle.cells, key=Cell.key):
        blocks.setdefault(c.task, {}).setdefault(c.train_regime, []).append(c)
    for task, regimes in blocks.items():
        if task.startswith("skull_segmentation"):
            groups = sorted({c.group for cs in regimes.values() for c in cs}, key=lambda g: GROUP_ORDER.get(g, 9))
            out += [f"## {task}: Dice", ""]
            rows = []
            for regime, cs in regimes.items():
                by = {c.group: c for c in cs}
                rows.append([regime] + [_dice(by[g].metrics["dice"]) if g in by else "" for g in groups])
                rows.append([f"{regime} (ensemble)"] +
                            [f"{by[g].ensemble['dice']:.4f}" if g in by else "" for g in groups])
            out += _table(["trained on \\ tested on"] + groups, rows) + [""]
            continue
        for regime, cs in regimes.items():
            out += [f"## {task}, trained on {regime}", ""]
            if task == "name_manufacturer":
                rows = []
                for c in cs:
                    auc = _pct(c.metrics["auroc"]) if "auroc" in c.metrics else ""
                    rows.append([c.group, _pct(c.metrics["accuracy"]), auc])
                out += _table(["test group", "Accuracy", "AUROC"], rows) + [""]
                continue
            header = ["metric"] + [f"tested on {c.group}" for c in cs]
            rows = [[ROW_LABELS[m]] + [_pct(c.metrics[m]) if m in c.metrics else "" for c in cs]
                    for m in ("accuracy", "specificity", "sensitivity", "auroc")]
            rows.append(["AUROC (averaged ensemble)"] +
                        [f"{100 * c.ensemble['auroc']:.1f}" if "auroc" in c.ensemble else "" for c in cs])
            out += _table(header, rows) + ["", f"n_models = {cs[0].n_models}", ""]
    if bundle.ledger:
        out += ["## Convergence", ""]
        rows = [[e.task, e.train_regime, str(e.attempted), str(e.converged), str(e.diverged), str(e.selected)]
                for e in sorted(bundle.ledger, key=LedgerEntry.key)]
        out += _table(["task", "train_regime", "attempted", "converged", "diverged", "selected"], rows) + [""]
    if bundle.provenance:
        out += ["## Provenance", ""]
        rows = [[p["task"], p["train_regime"], str(p["master_seed"]), p["config_hash"][:12], p["version"]]
                for p in bundle.provenance]
        out += _table(["task", "train_regime", "master seed", "config hash", "version"], rows) + [""]
    return "\n".join(out)


def emit_report(bundle: ReportBundle, fmt: str, out_dir) -> list[Path]:
    """Write ``bundle`` in ``fmt`` under ``out_dir``; returns the files written.

    csv also writes one ROC point file per averaged-ensemble curve.
    """
    if fmt not in FORMATS:
        raise ValidationError(f"format must be one of {list(FORMATS)}, got {fmt!r}")
    bundle.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if fmt == "json":
        files.append((out / "report.json", bundle_to_json(bundle)))
    elif fmt == "markdown":
        files.append((out / "report.md", bundle_markdown(bundle)))
    else:
        files.append((out / "report.csv", bundle_csv(bundle)))
        files += [(out / t.filename, roc_csv(t)) for t in sorted(bundle.roc, key=RocTable.key)]
    written = []
    for path, text in files:
        with path.open("w", newline="") as fh:
            fh.write(text)
        written.append(path)
    return written
