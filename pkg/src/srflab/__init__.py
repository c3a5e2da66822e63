"""Numerical laboratory for super-Ricci flows on discrete time-dependent spaces."""

__version__ = "0.1.0"

from .errors import NumericalFailure, SrfError  # noqa: E402
from .report import CheckReport  # noqa: E402
from .space import (  # noqa: E402
    DynamicSpace,
    FieldOnSpace,
    MeasureOnSpace,
    check_assumptions,
    distance_at,
    make_graph_space,
    make_grid_space,
    measure_at,
)
from .heat import heat_kernel, propagate, propagator_matrix  # noqa: E402
from .transport import wasserstein, wasserstein_inf, wasserstein_p  # noqa: E402
from .examples import EXAMPLES, build_example  # noqa: E402

__all__ = [
    "__version__", "SrfError", "NumericalFailure", "CheckReport", "DynamicSpace", "FieldOnSpace",
    "MeasureOnSpace", "check_assumptions", "distance_at", "make_graph_space", "make_grid_space",
    "measure_at", "heat_kernel", "propagate", "propagator_matrix", "wasserstein", "wasserstein_inf",
    "wasserstein_p", "EXAMPLES", "build_example",
]
