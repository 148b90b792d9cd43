"""Experiment harness: configs, chunked runner, campaigns and CLI."""

from .config import ConfigError, ExperimentConfig, load_config, validate
from .runner import RunResult, read_results, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "RunResult", "load_config", "read_results", "run_experiment", "validate"]
