"""Experiment harness: configs, seeded cell runs, reports, plots, selftest."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .plot import plot_curves
from .report import generate_report
from .runner import run_experiment

__all__ = [
    "ConfigError", "ExperimentConfig", "generate_report", "load_config", "parse_config",
    "plot_curves", "run_experiment",
]
