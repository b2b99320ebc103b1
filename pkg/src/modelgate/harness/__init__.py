"""Desk-scale laboratory: synthetic backends, seeded traffic, scenario runner."""

from .stubs import ConfidenceModel, StubModel, StubModelConfig, TruthRule, synth_score
from .traffic import DriftEvent, MixtureComponent, TrafficConfig, gen_traffic
from .scenario import ConfigError, Scenario, ScenarioReport, ScenarioRunner, run_scenario, substream

__all__ = [
    "ConfidenceModel",
    "ConfigError",
    "DriftEvent",
    "MixtureComponent",
    "Scenario",
    "ScenarioReport",
    "ScenarioRunner",
    "StubModel",
    "StubModelConfig",
    "TrafficConfig",
    "TruthRule",
    "gen_traffic",
    "run_scenario",
    "substream",
    "synth_score",
]
