"""Locational energy pricing for microgrids of dynamic prosumers."""

from .convexsolver import ConvexProgram, PrimalDualSolution, SolverError, kkt_residuals, solve
from .market import (LocationalPrices, MarketConsistencyError, MarketOutcome, Scenario,
                     best_response, clear_market)
from .network import (Line, RadialNetwork, TopologyError, adjusted_voltage_bounds,
                      build_sensitivity_matrices, recover_line_flows)
from .prosumer import Boxes, LtiDynamics, ProsumerSpec, QuadraticUtility
from .scenario import PRESETS, ScenarioFileError, load_scenario, run, write_scenario
from .verify import (Assumption2Report, DecayConditionsReport, EquilibriumReport,
                     brute_force_welfare, check_assumption2, check_decay_conditions,
                     check_strict_implementability, detect_price_decay, verify_competitive_equilibrium,
                     verify_nash)

__all__ = [
    "Assumption2Report", "Boxes", "ConvexProgram", "DecayConditionsReport", "EquilibriumReport", "Line", "LocationalPrices",
    "LtiDynamics", "MarketConsistencyError", "MarketOutcome", "PRESETS", "PrimalDualSolution",
    "ProsumerSpec", "QuadraticUtility", "RadialNetwork", "Scenario", "ScenarioFileError",
    "SolverError", "TopologyError", "adjusted_voltage_bounds", "best_response",
    "brute_force_welfare", "build_sensitivity_matrices", "check_assumption2", "check_decay_conditions",
    "check_strict_implementability", "clear_market", "detect_price_decay", "kkt_residuals",
    "load_scenario", "recover_line_flows", "run", "solve", "verify_competitive_equilibrium",
    "verify_nash", "write_scenario",
]
