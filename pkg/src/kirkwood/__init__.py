"""Kirkwood closure point processes in finite volume.

The closure process with intensity z and pair factor exp(-beta u) has
correlation functions z^n prod exp(-beta u(x_i - x_j)).  Its Janossy
densities are the grand-canonical Kirkwood-Salsburg solution at negative
activity, which this package computes, samples from and checks.
"""

from .closure import ClosureModel, closure_correlation, closure_janossy, lenard_check, ruelle_check
from .errors import *  # noqa: F401,F403
from .gnz import KernelQuery, gnz_residual, kernel_recursion_check, papangelou_kernel
from .grand_canonical import BoxRegion, McEstimate, partition_function, theta_explicit
from .hamiltonian import Configuration, MultiBodyHamiltonian, energy, interaction
from .ks_core import Grid, ThetaFamily, apply_ks, neumann_solve
from .multibody import kernel_kH, multibody_apply_ks, multibody_neumann_solve, norm_bound_example
from .potentials import HardCore, IdealGas, LennardJonesType, ModelParams, SquareWell, Tabulated, c_beta, z0
from .sampler import SampleBatch, estimate_correlations, sample, sample_batch

__version__ = "0.1.0"
