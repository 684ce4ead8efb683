"""Learned image cipher: encryptor/decryptor networks whose weights are the keys."""

__version__ = "0.1.0"

from .errors import (CipherError, ConfigError, CorruptKeyFile, DigestMismatch, LayoutError,  # noqa: E402
                     NumericFailure, ShapeError, SpecError, TrainingDiverged)
from .images import ImageTensor  # noqa: E402
from .specs import LayerSpec, NetworkSpec, preset  # noqa: E402

__all__ = ["CipherError", "ConfigError", "CorruptKeyFile", "DigestMismatch", "ImageTensor", "LayerSpec",
           "LayoutError", "NetworkSpec", "NumericFailure", "ShapeError", "SpecError", "TrainingDiverged",
           "__version__", "preset"]
