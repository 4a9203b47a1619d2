"""
Exception types for Sigma Mapper
Every failure raised by the library derives from SigmaMapperError so the CLI can map it to an exit code.
"""


class SigmaMapperError(Exception):
    """Base class for all library errors"""


class ParameterError(SigmaMapperError, ValueError):
    """Invalid numeric parameter (negative std, non-positive R, bad schedule...)"""


class UsageError(SigmaMapperError):
    """Invalid command-line usage or configuration"""


class DimensionError(SigmaMapperError, ValueError):
    """Shapes of rasters, maps or tensors do not agree"""


class DegenerateInputError(SigmaMapperError, ValueError):
    """Input carries no usable signal (all-zero brightness or map)"""


class FormatError(SigmaMapperError):
    """File content does not follow the expected container layout"""


class UnsupportedFormatError(FormatError):
    """File is a valid image but uses a mode or bit depth we do not handle"""


class TruncatedFileError(FormatError):
    """File ends before the declared payload"""


class NumericalError(SigmaMapperError):
    """Non-finite values appeared during computation"""

    def __init__(self, message: str, layer: str = None):
        super().__init__(message)
        self.layer = layer
