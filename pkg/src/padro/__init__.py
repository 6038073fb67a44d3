"""Perturbation-aware distributionally robust reconstruction for linear inverse problems."""

from .core import (DimensionError, DualProblem, EmpiricalJoint, EuclideanCost, GaussianReference,
                   Lebesgue, QuadraticLoss, Reconstructor, RngStream, euclidean_pair_cost,
                   loss_gradient_g, quadratic_loss)
from .perturbation import (AdmissibilityError, AnisotropicGaussianFamily, IsotropicGaussianFamily,
                           PerturbationFamily)
from .dual import DualEstimate, dual_objective, estimate_h, inner_integrand, sinkhorn_dual_reference
from .optimizer import (BisectionConfig, BsmdConfig, MlmcConfig, SolveReport, SolverDivergence,
                        bisect_lambda, bsmd_solve, rt_mlmc_gradient)

__version__ = "0.1.0"
