"""Persistent CSMA with multi-packet reception: equilibrium analysis, delays,
decoder success probabilities, a slot-level simulator and exact reference chains."""
from .errors import CsmaMprError
from .model import (AllOrNothingMpr, ClassSpec, GeneralSymmetricMpr, Scenario, load_scenario,
                    scenario_from_dict, scenario_to_dict, validate_scenario)
from .meanfield import EquilibriumResult, State, solve_equilibrium, solve_finite_fixed_point
from .delay import delay_report, design_tx_probs
from .phy import Decoder, PhyConfig, estimate_q
from .sim import SimConfig, run_simulation
from .oracle import TinySystem, exact_metrics

__all__ = [
    "AllOrNothingMpr", "ClassSpec", "CsmaMprError", "Decoder", "EquilibriumResult",
    "GeneralSymmetricMpr", "PhyConfig", "Scenario", "SimConfig", "State", "TinySystem",
    "delay_report", "design_tx_probs", "estimate_q", "exact_metrics", "load_scenario",
    "run_simulation", "scenario_from_dict", "scenario_to_dict", "solve_equilibrium",
    "solve_finite_fixed_point", "validate_scenario",
]
