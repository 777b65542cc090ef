"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid grid, cluster or run configuration."""


class InfeasibleError(ConfigError):
    """No grid configuration satisfies the constraints."""


class ShapeError(ValueError):
    """Matrix dimensions are incompatible with the grid."""


class ProtocolError(RuntimeError):
    """Collective called with inconsistent arguments across members."""


class StateError(RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""
