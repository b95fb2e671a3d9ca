"""Exception hierarchy shared by every module."""


class RebalanceError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfiguration(RebalanceError, ValueError):
    """A CFMM state, configuration or problem violates its invariants."""


class UndefinedGradient(RebalanceError):
    """A spot price was requested where a partial derivative is not positive."""


class PoolExhausted(RebalanceError):
    """A trade would drain (or overdraw) the output pool."""


class InfeasibleRebalancing(RebalanceError):
    """A rebalancing is empty or leaves some pool non-positive."""


class NotProfitable(RebalanceError):
    """A cycle admits no strictly profitable input amount."""


class NotAnArbitrage(RebalanceError):
    """A trade sequence does not end with a non-negative, non-zero profit."""


class NonPositiveLiquidity(RebalanceError):
    """The log-liquidity objective is undefined at a non-positive liquidity."""


class SolverDiverged(RebalanceError):
    """The barrier method did not reach its KKT tolerance."""


class NoFeasiblePoint(RebalanceError):
    """No start of the trade-only search satisfied the equality constraints."""


class InconsistentPassiveDelta(RebalanceError):
    """A passive CFMM's net change cannot be executed as one standard trade."""


class StepInfeasible(RebalanceError):
    """Replaying a plan failed at a given step."""

    def __init__(self, step_index: int, reason: str):
        super().__init__(f"step {step_index}: {reason}")
        self.step_index = step_index
        self.reason = reason


class PlanMismatch(RebalanceError):
    """A replayed plan does not reach the pools it promised."""


class InfeasibleSpec(RebalanceError, ValueError):
    """A scenario generator specification cannot be realised."""


class ScenarioFormatError(RebalanceError, ValueError):
    """A scenario or plan file could not be parsed or validated."""
