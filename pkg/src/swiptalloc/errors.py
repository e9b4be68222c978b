"""Exception types shared across the package."""


class SwiptError(Exception):
    """Base class for all package-specific errors."""


class InfeasibleError(SwiptError):
    """The rate requirements cannot be met under the power budget."""


class NonConvergence(SwiptError):
    """An iterative solve hit its iteration limit without meeting tolerance."""


class MaxBacktrackError(SwiptError):
    """Backtracking line search exhausted its trial steps."""


class MultiplierUnavailable(SwiptError):
    """The solver did not expose the dual values needed for verification."""


class ConfigError(SwiptError):
    """Malformed or inconsistent configuration input."""
