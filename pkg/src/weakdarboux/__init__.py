"""Weak Darboux residuals, conformal charts and flat immersions on grid-sampled surface metrics."""

from .beltrami import (BeltramiField, ConformalChart, PrincipalSolution, beltrami_coefficient, build_chart,
                       chart_transition_check, solve_principal)
from .corpus import CaseSpec, get_case, lacunary_field, list_cases
from .errors import (ChartError, ConfigError, DarbouxError, GridError, HypothesisViolation, MarginViolation,
                     NotFlatError, NumericalFailure, SPDError, SweepError)
from .fields import Bump, ComplexField, Grid2D, Mollifier, ScalarField, SweepPlan, mollify
from .flatten import (ImmersionField, darboux_from_immersion, default_battery, distributional_curvature,
                      flatten_metric, harmonic_conjugate, holomorphic_primitive, immersion_from_darboux,
                      verify_immersion)
from .geometry import MetricField, curvature_perturbed, gaussian_curvature_classical, perturbed_metric
from .weakprod import (DistributionValue, PairingConfig, build_divergence_potential, classical_darboux_residual,
                       pair_derivative_product, pair_hessian_form, weak_darboux_residual)

__version__ = "0.1.0"
