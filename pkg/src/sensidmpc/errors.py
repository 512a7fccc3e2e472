"""Exception hierarchy shared by all modules."""


class DmpcError(Exception):
    """Base class for every error raised by this package."""


# network model
class DimensionMismatch(DmpcError):
    pass


class InconsistentTopology(DmpcError):
    pass


class NotEquilibrium(DmpcError):
    pass


class MissingNeighborState(DmpcError):
    pass


class InvalidConstraint(DmpcError):
    pass


class MissingTerminalWeights(DmpcError):
    pass


class DerivativeMismatch(DmpcError):
    def __init__(self, name, point, rel_error):
        super().__init__(f"{name}: relative error {rel_error:.3e} at {point}")
        self.name = name
        self.point = point
        self.rel_error = rel_error


# ocp solver
class Divergence(DmpcError):
    pass


class LineSearchFailure(DmpcError):
    pass


class OracleFailure(DmpcError):
    pass


# algorithm / bus
class NotAReceiver(DmpcError):
    pass


class AgentSolveError(DmpcError):
    def __init__(self, agent, cause):
        super().__init__(f"agent {agent}: {cause}")
        self.agent = agent
        self.cause = cause


class TopologyViolation(DmpcError):
    pass


class MissingReport(DmpcError):
    pass


# terminal design
class Infeasible(DmpcError):
    pass


class NumericalFailure(DmpcError):
    pass


class NoFeasibleLevel(DmpcError):
    pass


# cli
class ConfigError(DmpcError):
    pass
