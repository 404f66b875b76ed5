"""Exception hierarchy shared by every module of the package."""


class OsmeMamcError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(OsmeMamcError, ValueError):
    pass


class NumericOverflow(OsmeMamcError, ArithmeticError):
    pass


class LabelOutOfRange(OsmeMamcError, IndexError):
    pass


class NotScalar(OsmeMamcError, ValueError):
    pass


class DetachedTensor(OsmeMamcError, RuntimeError):
    pass


class NonDeterministicLoss(OsmeMamcError, RuntimeError):
    pass


class BranchOutOfRange(OsmeMamcError, IndexError):
    pass


class IndexOutOfRange(OsmeMamcError, IndexError):
    pass


class NoActiveConstraints(OsmeMamcError):
    """Raised by ``npair_loss`` when no anchor has an active family; callers may drop the term."""


class SpecInvalid(OsmeMamcError, ValueError):
    pass


class NotEnoughClasses(OsmeMamcError, ValueError):
    pass


class NotEnoughImagesInClass(OsmeMamcError, ValueError):
    pass


class NonFiniteLoss(OsmeMamcError, ArithmeticError):
    def __init__(self, message, parts=None):
        super().__init__(message)
        self.parts = dict(parts or {})


class EmptyDataset(OsmeMamcError, ValueError):
    pass


class VersionMismatch(OsmeMamcError):
    pass


class CorruptFile(OsmeMamcError):
    pass


class ConfigError(OsmeMamcError, ValueError):
    pass
