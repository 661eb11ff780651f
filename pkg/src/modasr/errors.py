"""Exception types shared across the package."""


class ModAsrError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ModAsrError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UnknownOpError(ModAsrError, ValueError):
    """A primitive kind that is not registered."""


class NonFiniteError(ModAsrError, ArithmeticError):
    """A primitive produced NaN or Inf values."""


class TapeError(ModAsrError, RuntimeError):
    """Misuse of a gradient tape (non-scalar loss, loss not on tape, reuse)."""


class NondeterministicFunctionError(ModAsrError, RuntimeError):
    """A function handed to the finite-difference oracle returned different
    values on repeated evaluation at the same point."""


class ConfigError(ModAsrError, ValueError):
    """Invalid or inconsistent model configuration."""


class DomainError(ModAsrError, ValueError):
    """Base class for domain-registry errors."""


class DuplicateDomainError(DomainError):
    pass


class UnknownDomainError(DomainError):
    pass


class InvalidPathError(DomainError):
    """A module path does not resolve against the model structure."""


class SiteConflictError(DomainError):
    """Overrides and adapters collide on the same site."""


class BundleError(ModAsrError, ValueError):
    """Base class for parameter-bundle I/O errors."""


class CorruptBundleError(BundleError):
    """Truncated or malformed bundle file."""


class FingerprintMismatchError(BundleError):
    """Bundle was written under a different model configuration."""


class BundleShapeError(BundleError):
    """An array in the bundle does not match the expected shape."""


class UnsupportedVersionError(BundleError):
    pass


class CorpusError(ModAsrError, ValueError):
    """Corpus file malformed or inconsistent with its manifest."""


class TrainingError(ModAsrError, RuntimeError):
    """Base class for training-harness errors."""


class DivergenceError(TrainingError):
    """Loss became non-finite during training."""


class NothingTrainableError(TrainingError):
    """A domain training run was requested with an empty trainable set."""
