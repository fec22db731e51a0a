from .config import ConfigError, ExperimentConfig, load, loads
from .pipeline import COLUMNS, PipelineError, run_experiment, train_victims
from .presets import PRESETS
from .report import ReportError, report

__all__ = [
    "ConfigError", "ExperimentConfig", "load", "loads", "COLUMNS", "PipelineError", "run_experiment",
    "train_victims", "PRESETS", "ReportError", "report",
]
