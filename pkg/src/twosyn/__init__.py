"""Packet-level simulator of a multihoming edge router that races duplicated
SYNs across its WAN links, with static/random/bandit baselines and a
reproducible lab-experiment harness."""

from .metrics import RunReport, destination_overhead, export_csv, mean_fct, verify_run
from .nettopo import FlowKeyMode
from .runner import run_scenario
from .scenarios import Scenario, builtin_scenario, builtin_suite, load_scenario_file

__version__ = "0.1.0"

__all__ = [
    "FlowKeyMode",
    "RunReport",
    "Scenario",
    "builtin_scenario",
    "builtin_suite",
    "destination_overhead",
    "export_csv",
    "load_scenario_file",
    "mean_fct",
    "run_scenario",
    "verify_run",
    "__version__",
]
