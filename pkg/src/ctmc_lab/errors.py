"""Exception hierarchy shared by every module of the lab."""


class CTMCLabError(Exception):
    """Base class for all lab errors."""


class InvalidState(CTMCLabError, ValueError):
    pass


class InvalidConfig(CTMCLabError, ValueError):
    pass


class ExactModeUnavailable(CTMCLabError):
    """Raised when an enumerated computation is requested on a space larger than ``exact_cap``."""


class InvalidTime(CTMCLabError, ValueError):
    pass


class DegenerateConditioning(CTMCLabError):
    """Conditioning on a state of zero marginal mass."""


class InvalidNeighbor(CTMCLabError, ValueError):
    pass


class InvalidSpec(CTMCLabError, ValueError):
    pass


class InvalidRate(CTMCLabError, ValueError):
    pass


class InvalidGrid(CTMCLabError, ValueError):
    pass


class InvalidInput(CTMCLabError, ValueError):
    pass


class TruncationOverflow(CTMCLabError):
    pass


class SamplerError(CTMCLabError):
    """A sampler produced an invalid categorical.

    ``step`` and ``state`` are filled in by :func:`ctmc_lab.samplers.run_chain`
    when the failure happens inside a chain, so callers can report where it broke.
    """

    def __init__(self, message, step=None, state=None):
        super().__init__(message)
        self.step = step
        self.state = state

    def __str__(self):
        msg = super().__str__()
        if self.step is not None:
            msg += f" (step k={self.step}, state={self.state})"
        return msg


class StepTooLarge(SamplerError):
    pass


class NegativeMass(SamplerError):
    pass
