"""Experiment orchestration and the ``biasctl`` command line."""

from .config import EXPERIMENTS, REGIMES, ExperimentConfig, load_config, parse_override
from .data import PreparedData, SliceStackDataset, TensorDataset, derive_seed, prepare
from .experiment import RunOutcome, run_experiment, run_seed, train_ensemble, train_run
from .report import Cell, LedgerEntry, ReportBundle, RocTable, emit_report, load_bundle, merge_bundles
