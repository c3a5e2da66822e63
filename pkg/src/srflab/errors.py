"""Exception types raised by srflab.

Every error carries a short machine-readable ``code`` so that the CLI and
reports can surface the failure category without parsing messages.
"""


class SrfError(ValueError):
    code = "error"


class InvalidSize(SrfError):
    code = "invalid-size"


class InvalidEvaluator(SrfError):
    code = "invalid-evaluator"


class OutOfHorizon(SrfError):
    code = "out-of-horizon"


class DegenerateMetric(SrfError):
    code = "degenerate-metric"


class InvalidInput(SrfError):
    code = "invalid-input"


class InvalidHorizon(SrfError):
    code = "invalid-horizon"


class BadInterval(SrfError):
    code = "bad-interval"


class InvalidMeasure(SrfError):
    code = "invalid-measure"


class UnbalancedInput(SrfError):
    code = "unbalanced-input"


class UnsupportedSpace(SrfError):
    code = "unsupported-space"


class InvalidParameter(SrfError):
    code = "invalid-parameter"


class InvalidTestFunction(SrfError):
    code = "invalid-test-function"


class InvalidGrid(SrfError):
    code = "invalid-grid"


class NumericalFailure(RuntimeError):
    code = "numerical-failure"
