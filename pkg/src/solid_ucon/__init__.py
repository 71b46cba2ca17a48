"""Blockchain-driven usage control for Solid-style pods, as a deterministic simulation."""

from .harness import RunReport, Scenario, Simulation, load_scenario, run_scenario, validate_scenario
from .policy import PurposeRestriction, TemporalRetention, UsagePolicy, check_purpose, expiry_at

__all__ = [
    "PurposeRestriction",
    "RunReport",
    "Scenario",
    "Simulation",
    "TemporalRetention",
    "UsagePolicy",
    "check_purpose",
    "expiry_at",
    "load_scenario",
    "run_scenario",
    "validate_scenario",
]
