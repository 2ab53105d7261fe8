"""Exception hierarchy shared by all proxymoe modules.

``InputError`` subclasses signal malformed user input (bad files, bad
config, size preconditions); everything else is an internal contract
violation.  The CLI maps the two groups to exit codes 2 and 1.
"""


class ProxymoeError(Exception):
    """Base class for all library errors."""


class InputError(ProxymoeError):
    """Base class for errors caused by user-supplied input."""


# -- parsing / configuration ------------------------------------------------

class ParseError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidSpec(InputError):
    pass


# -- shapes and sizes ---------------------------------------------------------

class DimensionMismatch(InputError):
    pass


class PoolTooSmall(InputError):
    pass


class PoolTooLarge(InputError):
    pass


class EmptySequence(InputError):
    pass


class EmptyClientData(InputError):
    pass


class EmptyTrainingSet(InputError):
    pass


class EmptyUnion(InputError):
    pass


class EmptyPrivateSet(InputError):
    pass


class InvalidCounts(InputError):
    pass


class ZeroVector(InputError):
    pass


class NonPositiveRelevance(InputError):
    pass


# -- numerical failures -------------------------------------------------------

class NotPositiveDefinite(ProxymoeError):
    pass


class NonPositiveSchur(ProxymoeError):
    pass


class SingularSubset(ProxymoeError):
    pass


class InsufficientRank(ProxymoeError):
    pass


class DegenerateSet(ProxymoeError):
    pass


class Diverged(ProxymoeError):
    pass


class IncompatibleExperts(ProxymoeError):
    pass
