"""Scenario orchestration, metrics, reporting and the command line."""

from .config import ScenarioConfig, Variant
from .metrics import MetricsRow, metrics
from .scenarios import ScenarioResult, StageError, run_scenario

__all__ = ["MetricsRow", "ScenarioConfig", "ScenarioResult", "StageError", "Variant", "metrics", "run_scenario"]
