"""Exception hierarchy shared by every pipeline stage."""


class SentinelError(Exception):
    """Base class for all pipeline errors."""


class ManifestError(SentinelError):
    """Slide manifest is missing, malformed, or inconsistent with its rasters."""


class BoundsError(SentinelError, ValueError):
    """A level index or rectangle falls outside the slide."""


class DegenerateInputError(SentinelError, ValueError):
    """Input has no usable variation (e.g. a constant image passed to Otsu)."""


class DegenerateStainError(DegenerateInputError):
    """Source stain statistics have a (near) zero standard deviation."""


class ShapeError(SentinelError, ValueError):
    """Array or layer shapes do not compose."""


class NumericFailure(SentinelError, ArithmeticError):
    """Non-finite values appeared during a numeric computation."""


class MissingArtifactError(SentinelError, FileNotFoundError):
    """An upstream pipeline artifact is absent.

    Carries the missing path and the subcommand that produces it so the CLI
    can print an actionable message.
    """

    def __init__(self, path, producer):
        self.path = str(path)
        self.producer = producer
        super().__init__(f"missing artifact {self.path} (run `sentinel {producer}` first)")
