"""Quadratic BSDEs: regression Monte Carlo solver, control duality and PDE cross-checks."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BracketError,
    ConvergenceError,
    InadmissibleControlError,
    InfiniteValueError,
    NumericalError,
    QBSDEError,
    RankDeficientError,
    SubgradientCertificateError,
    ValidationError,
    WeightDegeneracyError,
)
from .generator import (  # noqa: E402
    GeneratorSpec,
    affine_in_y,
    check_assumptions,
    custom_generator,
    entropic_linear_y,
    eval_generator,
    inf_convolution,
    lipschitz_approximant,
    pure_quadratic,
)
from .fenchel import DualGeneratorView, ExtendedReal, fenchel_transform, fenchel_young_gap, subdifferential_select  # noqa: E402
from .paths import TimeGrid, brownian, girsanov_weights, simulate_forward  # noqa: E402
from .bsde import entropic_value, sandwich_lower_bound, solve_bsde_lsmc, solve_lipschitz_sequence  # noqa: E402
from .control import duality_gap, evaluate_control, optimal_control_from_solution, partition_count  # noqa: E402
from .pde import PdeGrid, PdeSpec, check_A4, cole_hopf_oracle, solve_pde_fd  # noqa: E402
