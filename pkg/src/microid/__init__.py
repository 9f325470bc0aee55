"""Simulate-and-recover laboratory for demand identification from micro data."""

from .core import JacobianMatrix, SimplexPoint, ZGrid, finite_diff_jacobian, line_integrate_gradient
from .dgp import DgpSpec, MarketRecord, simulate_markets, structural_ccp
from .errors import MicroIdError
from .index_recovery import IndexField, chain_and_integrate, find_common_ccp, find_matched_pairs, jacobian_ratio
from .inversion import CcpSurface, invert_sigma, solve_z_star
from .shock_recovery import NpivFit, conditional_demand, npiv_fit, recover_demand
from .nested_semi import estimate_nested
from .causal import CausalDag, ExclusionVerdict, audit_instrument, d_separated, parse_dag

__all__ = [
    "JacobianMatrix", "SimplexPoint", "ZGrid", "finite_diff_jacobian", "line_integrate_gradient",
    "DgpSpec", "MarketRecord", "simulate_markets", "structural_ccp", "MicroIdError",
    "IndexField", "chain_and_integrate", "find_common_ccp", "find_matched_pairs", "jacobian_ratio",
    "CcpSurface", "invert_sigma", "solve_z_star", "NpivFit", "conditional_demand", "npiv_fit",
    "recover_demand", "estimate_nested", "CausalDag", "ExclusionVerdict", "audit_instrument",
    "d_separated", "parse_dag",
]
__version__ = "0.1.0"
