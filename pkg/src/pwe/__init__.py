"""Programmable wireless environment modelling: geometry, tile EM functions, the tile
graph, ray propagation, objectives, K-paths configuration and scenario files."""

from .configurator import Deployment, PairRequest, kp_config
from .em_model import DEFAULT_PROFILE, EMProfile, TileFunction, WaveSpec
from .objectives import ObjectiveSet
from .propagation import nlos_prop
from .pwe_graph import PweGraph, build_graph
from .scenario_io import RunReport, Scenario, emit_report, load_scenario, run

__all__ = ["DEFAULT_PROFILE", "Deployment", "EMProfile", "ObjectiveSet", "PairRequest", "PweGraph",
           "RunReport", "Scenario", "TileFunction", "WaveSpec", "build_graph", "emit_report",
           "kp_config", "load_scenario", "nlos_prop", "run"]
