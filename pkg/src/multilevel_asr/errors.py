"""Exception hierarchy shared by every module in the package."""


class ASRError(Exception):
    """Base class for all errors raised by multilevel_asr."""


class ShapeError(ASRError, ValueError):
    """Operand dimensions do not agree."""


class ContractError(ASRError, ValueError):
    """A caller broke an operation's precondition."""


class NumericError(ASRError, FloatingPointError):
    """Non-finite values reached an operation that requires finite input."""


class InputError(ASRError, ValueError):
    """Input data is malformed or too short to process."""


class ConfigError(ASRError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(ASRError, ValueError):
    """Corpus, lexicon or vocabulary content is invalid."""


class InfeasibleError(ASRError, ValueError):
    """A CTC label sequence cannot be aligned to the available frames."""

    def __init__(self, num_frames, required):
        self.num_frames = num_frames
        self.required = required
        super().__init__(
            f"CTC alignment infeasible: T'={num_frames} frames, "
            f"label sequence needs at least {required}"
        )


class TrainingDiverged(ASRError, RuntimeError):
    """Loss stayed non-finite for too many consecutive steps."""
