"""Experiment orchestration: scenarios, sweeps, selection reduction and reporting."""

from .runner import ScenarioFailed, ScenarioResult, apply_selection, compute_stats, run_scenario
from .scenario import Scenario, ScenarioError, build_domains, load_scenario
from .stats import DomainStats, format_stats_table, read_stats_csv, report_stats, write_stats_csv

__all__ = [
    "DomainStats",
    "Scenario",
    "ScenarioError",
    "ScenarioFailed",
    "ScenarioResult",
    "apply_selection",
    "build_domains",
    "compute_stats",
    "format_stats_table",
    "load_scenario",
    "read_stats_csv",
    "report_stats",
    "run_scenario",
    "write_stats_csv",
]
