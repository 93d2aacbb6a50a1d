"""Exception hierarchy shared across the package."""


class BlockCNNError(Exception):
    """Base class for every error raised by blockcnn."""


class DataError(BlockCNNError):
    """Input data cannot be used (bad file, empty corpus, ...)."""


class ParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ColorspaceError(BlockCNNError):
    pass


class DimensionError(BlockCNNError, ValueError):
    pass


class BoundsError(BlockCNNError, IndexError):
    pass


class ParameterError(BlockCNNError, ValueError):
    pass


class BitstreamError(DataError):
    def __init__(self, message: str, bit_offset: int):
        super().__init__(f"{message} (at bit offset {bit_offset})")
        self.bit_offset = bit_offset


class ContainerError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ModelError(BlockCNNError):
    """Wrong model variant or model unusable for the request."""


class ModelMissingError(ModelError):
    pass


class StateError(BlockCNNError, RuntimeError):
    pass


class SequencingError(StateError):
    """A block was read from the reconstruction buffer before being written."""


class ConfigurationError(BlockCNNError):
    pass


class TrainingError(BlockCNNError, RuntimeError):
    pass
