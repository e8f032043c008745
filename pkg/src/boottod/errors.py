"""Exception hierarchy shared by the pre-training stack and the CLI."""


class BootTODError(Exception):
    """Base class for all errors raised by the package"""


class ConfigError(BootTODError, ValueError):
    """Invalid or inconsistent configuration"""


class DataError(BootTODError):
    """Corpus, label or checkpoint content that cannot be used"""


class CorpusFormatError(DataError):
    """Malformed corpus or labels file"""


class CheckpointError(DataError):
    """Checkpoint missing, truncated or failing its checksum"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written with an unsupported format version"""


class NumericalError(BootTODError):
    """Non-finite values in a forward pass, loss or gradient"""


class DimensionError(NumericalError, ValueError):
    """Operand shapes that an operation cannot combine"""


class TargetIndexError(NumericalError, IndexError):
    """Class index outside the logits' range"""


class BackwardError(NumericalError):
    """Backward pass requested on something that cannot be differentiated"""
