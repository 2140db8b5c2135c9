"""Shape-constrained demand learning and best-response pricing for competing sellers."""

from .errors import (
    ConfigurationError,
    ConvergenceError,
    DegenerateDerivativeError,
    DomainError,
    EstimateInvalidError,
    FormatError,
    PriceGameError,
    ShapeViolationError,
    SingularDesignError,
)
from .links import (
    LinkSpec,
    ShapeReport,
    check_shape,
    d_transform,
    g_map,
    h_transform,
    invert_virtual_valuation,
    virtual_valuation,
)
from .shape_regression import (
    ConcaveFit,
    ShapeFitReport,
    codomain_bounds,
    eval_fit,
    fit_transformed_concave,
    project_concave,
    uniform_error,
)

__version__ = "0.1.0"
