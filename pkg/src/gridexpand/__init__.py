"""Generation, storage and transmission expansion planning under n-1 security."""
from .bundle import BundlePlanner, run_bund
from .correction import TransmissionCorrector, corr_fixed_point, restricted_expansion_map
from .cycles import MinimalCycleBasis, fundamental_basis, minimal_cycle_basis
from .instance import Instance, generate_test_instance, load_bundled, load_instance, write_instance
from .network import Network, lodf, ptdf
from .subproblem import Scenario, TechParams, evaluate_portfolio

__all__ = [
    "BundlePlanner", "run_bund", "TransmissionCorrector", "corr_fixed_point", "restricted_expansion_map",
    "MinimalCycleBasis", "fundamental_basis", "minimal_cycle_basis", "Instance", "generate_test_instance",
    "load_bundled", "load_instance", "write_instance", "Network", "lodf", "ptdf", "Scenario",
    "TechParams", "evaluate_portfolio",
]
__version__ = "0.1.0"
