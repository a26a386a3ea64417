"""Dynamic-programming solvers for dynamic discrete choice models.

The core is a model-adaptive conjugate-gradient solver for the
policy-valuation system ``(I - T) V = u`` via the self-adjoint normal
equations, with successive approximation, projected-fixed-point, and
dense-LU baselines, discretization tools, three reference models, and an
adaptive MCMC estimator.
"""

from .discretization import (Ar1Spec, hammersley, interpolate_off_grid,
                             normalize_kernel, regular_grid, tauchen,
                             tensor_product)
from .drivers import (EULER_GAMMA, Ccp, ConditionalValues, DdcModel,
                      assemble_policy_valuation, hotz_miller_invert,
                      one_step_value_iteration_driver, policy_improvement,
                      policy_iteration, storable_policy_loop,
                      value_iteration_driver)
from .estimation import (McmcConfig, McmcResult, McmcState, Panel,
                         adaptive_mh_step, forward_simulate, run_mcmc,
                         simulated_log_likelihood)
from .models import (BusEngineModel, EntryExitModel, StorableGoodsModel,
                     build_desk_storable, conditional_logit_share,
                     desk_storable_from_params, inclusive_value,
                     storable_flow_utility)
from .params import read_flat_params
from .operators import (ConvergenceError, DiscountedOperator, GridMismatchError,
                        StateGrid, TransitionKernel, ValueVector, apply_T,
                        apply_T_adjoint, apply_normal, mix_kernel,
                        stationary_distribution)
from .solvers import (BreakdownError, SolverConfig, SolverNumericalError,
                      SolverReport, polynomial_interaction_basis, solve_exact,
                      solve_model_adaptive, solve_successive_approximation,
                      solve_temporal_difference)

__version__ = "0.1.0"
