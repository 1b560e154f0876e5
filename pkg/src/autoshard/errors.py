"""Exception hierarchy shared by all autoshard modules."""


class AutoshardError(Exception):
    """Base class for every error raised by this package."""


class GraphError(AutoshardError):
    pass


class CycleDetected(GraphError):
    pass


class UnknownTensor(GraphError):
    pass


class ArityMismatch(GraphError):
    pass


class DuplicateProducer(GraphError):
    pass


class ShapeMismatch(GraphError):
    pass


class UnknownName(GraphError):
    pass


class InvalidAttr(GraphError):
    pass


class UnknownProcess(GraphError):
    pass


class SchemaError(AutoshardError):
    pass


class ConflictingAnnotations(AutoshardError):
    pass


class CompletionError(AutoshardError):
    pass


class DanglingLink(SchemaError):
    pass


class Unreachable(AutoshardError):
    pass


class UnknownDevice(AutoshardError):
    pass


class NoCostAvailable(AutoshardError):
    pass


class Infeasible(AutoshardError):
    pass


class TooLarge(AutoshardError):
    pass


class MissingFeed(AutoshardError):
    pass


class ShardShapeMismatch(AutoshardError):
    pass


class UndeliveredMessage(AutoshardError):
    pass


class InvalidFusion(AutoshardError):
    pass


class Deadlock(AutoshardError):
    def __init__(self, message, cycle=()):
        super().__init__(message)
        self.cycle = tuple(cycle)


class InvalidParams(AutoshardError):
    pass


class StorageFull(AutoshardError):
    pass


class ConcurrentSaveConflict(AutoshardError):
    pass


class IncompleteManifest(AutoshardError):
    pass


class SchemeMismatchUnresolvable(AutoshardError):
    pass


class NoFeasibleScheme(AutoshardError):
    pass


class UnknownFixture(AutoshardError):
    pass
