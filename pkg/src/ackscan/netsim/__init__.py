"""In-process network simulator with scripted endpoints."""

from .network import DEFAULT_SOURCES, LogEntry, NetConditions, SimNetwork, spawn
from .scenario import Placement, Scenario, ScenarioError, ground_truth, load
from .scripts import Behavior, Endpoint, EndpointScript

__all__ = [
    "Behavior", "DEFAULT_SOURCES", "Endpoint", "EndpointScript", "LogEntry", "NetConditions",
    "Placement", "Scenario", "ScenarioError", "SimNetwork", "ground_truth", "load", "spawn",
]
