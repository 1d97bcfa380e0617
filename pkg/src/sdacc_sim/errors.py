class SimulatorError(Exception):
    pass

class TopologyError(SimulatorError):
    pass

class TraceError(SimulatorError):
    pass

class ConfigError(SimulatorError):
    pass


# Planning errors
class PlanError(SimulatorError):
    """A sampling plan violates one of its parameter invariants."""
    pass


class InfeasiblePlanError(SimulatorError):
    """A schedule plan breaks a buffer budget or grouping rule."""
    pass


# Numeric and consistency errors
class NumericFaultError(SimulatorError):
    """Nonlinear datapath received input it cannot process."""
    pass


class SchemaVersionError(SimulatorError):
    """A data file declares a schema version this release cannot read."""
    pass


class InvariantViolationError(SimulatorError):
    """A simulated report failed an internal consistency check."""
    pass
