class PullSegError(Exception):
    """Root of every error raised by pullseg."""


##########
# Config #
##########


class ConfigInvalid(PullSegError, ValueError):
    pass


#######
# I/O #
#######


class IoError(PullSegError, OSError):
    pass


class FormatError(IoError):
    pass


#################
# Shape & input #
#################


class ShapeMismatch(PullSegError, ValueError):
    pass


class EmptyInput(PullSegError, ValueError):
    pass


class EmptyBatch(PullSegError, ValueError):
    pass


class AllIgnored(PullSegError, ValueError):
    pass


class ClassMissing(PullSegError, KeyError):
    pass


class EmptyMatrix(PullSegError, ValueError):
    pass


class NoSourceNegatives(PullSegError, ValueError):
    pass


############
# Numerics #
############


class NumericFailure(PullSegError, ArithmeticError):
    pass


class SpectralResidue(NumericFailure):
    pass


class NonFiniteGradient(NumericFailure):
    pass


class GraphNotRecorded(NumericFailure):
    pass


class NoActiveClasses(NumericFailure):
    pass


############
# Warnings #
############


class DegenerateVector(UserWarning):
    pass


class DegeneratePair(UserWarning):
    pass


class NegativeDenominator(UserWarning):
    pass


EXIT_CODES = (
    (ConfigInvalid, 2),
    (IoError, 3),
    (NumericFailure, 4),
)


def exit_code(error: BaseException) -> int:
    for error_type, code in EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return 1
