"""Chance-constrained Bayesian optimization with Gaussian processes in the
joint controlled-uncertain input space."""

from .acquisition import (AcquisitionContext, current_feasible_min,
                          deviation_number, efi, empirical_quantile_constraint,
                          expected_c, expected_improvement,
                          prob_feasible_with_confidence,
                          variance_of_improvement)
from .bench import (CampaignConfig, ConvergenceTable, emit_report,
                    run_campaign, validate_final_model)
from .driver import (RunConfig, RunHistory, run, run_ceidevnum, run_efirand,
                     run_efisur)
from .gp import (GpPosterior, Matern52, fit, one_step_update, predict,
                 simulate_joint)
from .problem import (Evaluation, JointDesign, ProblemSpec, UniformBox,
                      analytical_benchmark, evaluate, get_problem,
                      reference_solution)
from .projection import UpdatedMeanLaw, ZProcess, updated_mean_law, z_cov, z_mean
from .quasirandom import CrnSet, LhsDesign, latin_hypercube, make_crn, \
    sobol_sequence
from .sampling import (Quantizer, SamplingContext, feasibility_variance_term,
                       improvement_variance_term, quantize_normal,
                       sampling_criterion, select_next_u)

__version__ = "0.1.0"
