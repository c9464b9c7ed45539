"""Exception hierarchy shared by all modules."""


class ISFedAvgError(Exception):
    """Base class for every error raised by this package."""


# sampling
class EmptyProbabilities(ISFedAvgError, ValueError):
    pass


class NegativeEntry(ISFedAvgError, ValueError):
    pass


class NotNormalized(ISFedAvgError, ValueError):
    pass


class InclusionOverflow(ISFedAvgError, ValueError):
    """Some entry would need an inclusion probability above one."""


class BatchTooLarge(ISFedAvgError, ValueError):
    pass


class TooLargeToEnumerate(ISFedAvgError, ValueError):
    pass


# estimator
class ZeroProbabilityDrawn(ISFedAvgError, ValueError):
    pass


class MissingMoments(ISFedAvgError, ValueError):
    pass


class InvalidPairMatrix(ISFedAvgError, ValueError):
    pass


# problems
class InvalidCovariance(ISFedAvgError, ValueError):
    pass


class SingularSystem(ISFedAvgError, ArithmeticError):
    pass


class IndexOutOfRange(ISFedAvgError, IndexError):
    pass


class ParseError(ISFedAvgError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimensionMismatch(ISFedAvgError, ValueError):
    pass


class PoolTooSmall(ISFedAvgError, ValueError):
    pass


# probabilities
class MassOverflow(ISFedAvgError, ArithmeticError):
    pass


# harness
class EmptyTestSet(ISFedAvgError, ValueError):
    pass


class ConfigError(ISFedAvgError, ValueError):
    pass
