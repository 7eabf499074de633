"""Shapley-value allocation of carbon emissions in power networks.

Coalition values come from a DC optimal power flow; large games are
approximated by paired kernel sampling, optionally with a neural surrogate
standing in for the OPF solves.
"""

__version__ = "0.1.0"

from .allocation import AllocationResult, relative_l2
from .bounds import a_tilde, epsilon_bound, epsilon_from_bias, estimate_eta, fit_power_law, total_bound
from .dcopf import OPFOracle, characteristic_emissions, solve_coalition
from .exact import CharacteristicTable, exact_shapley, tabulate_characteristic
from .grid import (Coalition, GridSystem, OperatingConditions, Scenario, generate_scenario, load_scenario,
                   load_system, synthesize_system)
from .pipeline import allocate_horizon, surroshap_allocate_period
from .properties import check_signs, perturb_and_compare, relative_distance, reshape_profile_search
from .sampling import kernelshap_allocate, stratified_mc_allocate
from .surrogate import (SurrogateModel, TrainConfig, evaluate_metrics, generate_dataset, load_model, predict_batch,
                        save_model, train)
