"""Precision-based samplers for mixed-frequency VARs."""

from .analysis import (BenchmarkResult, DgpSpec, bn_cycle, bn_cycle_bands, run_benchmark,
                       simulate_dgp, timing_study)
from .band import BandMatrix, CholeskyFactor, band_cholesky, cho_solve, solve_lower, solve_upper
from .constraints import (LEVEL_AVERAGE, LOG_DIFF_TRIANGLE, SCHEMES, AggregationScheme, ConstraintSet,
                          build_Ma, sample_hard, sample_soft, sample_unconstrained, soft_posterior)
from .errors import (ConfigError, DimensionMismatch, EmptyStore, FilterDivergence, InputError,
                     MaskInconsistent, MFVarError, NonStationary, NotPositiveDefinite,
                     NumericalError, ParseError, SingularDesign, SingularW)
from .gibbs import DrawStore, GibbsConfig, NIWPrior, draw_var_params, posterior_summary, run_gibbs
from .kalman import StateSpaceForm, kalman_filter, simulation_smoother, to_state_space
from .model import (ConditionalGaussian, MixedPanel, PresamplePrior, VarParams, build_conditional,
                    build_stacked_H, build_xi_inverse, dense_conditional)

__version__ = "0.1.0"
