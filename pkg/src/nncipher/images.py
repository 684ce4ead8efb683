"""ImageTensor: the unit of plaintext, ciphertext and masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

RANGES = {
    "unit_signed": (-1.0, 1.0),
    "byte": (0.0, 255.0),
    "unit": (0.0, 1.0),
}


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """H x W x C float image with a declared value range."""

    values: np.ndarray
    range_tag: str = "unit_signed"

    def __post_init__(self):
        if self.range_tag not in RANGES:
            raise ValueError(f"unknown range tag {self.range_tag!r}")
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ShapeError(f"expected HxWxC image, got shape {v.shape}")
        if v.shape[2] not in (1, 3):
            raise ShapeError(f"channels must be 1 or 3, got {v.shape[2]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image contains non-finite values")
        lo, hi = RANGES[self.range_tag]
        if v.size and (v.min() < lo - 1e-4 or v.max() > hi + 1e-4):
            raise ValueError(f"values outside declared {self.range_tag} range [{lo}, {hi}]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.range_tag == other.range_tag and np.array_equal(self.values, other.values)

    def to_unit_signed(self) -> "ImageTensor":
        if self.range_tag == "unit_signed":
            return self
        if self.range_tag == "byte":
            return ImageTensor(self.values / 127.5 - 1.0, "unit_signed")
        return ImageTensor(self.values * 2.0 - 1.0, "unit_signed")

    def to_byte(self) -> "ImageTensor":
        """Quantize to integer gray levels (still stored as float)."""
        if self.range_tag == "byte":
            return ImageTensor(np.round(self.values), "byte")
        if self.range_tag == "unit_signed":
            return ImageTensor(np.clip(np.round((self.values + 1.0) * 127.5), 0, 255), "byte")
        return ImageTensor(np.clip(np.round(self.values * 255.0), 0, 255), "byte")

    def as_uint8(self) -> np.ndarray:
        return self.to_byte().values.astype(np.uint8)

    def to_channels(self, channels: int) -> "ImageTensor":
        """Replicate a gray channel to 3, or average 3 channels down to 1."""
        if channels == self.channels:
            return self
        if channels == 3 and self.channels == 1:
            return ImageTensor(np.repeat(self.values, 3, axis=2), self.range_tag)
        if channels == 1 and self.channels == 3:
            return ImageTensor(self.values.mean(axis=2, keepdims=True), self.range_tag)
        raise ShapeError(f"cannot convert {self.channels} channels to {channels}")

    @classmethod
    def from_uint8(cls, array) -> "ImageTensor":
        return cls(np.asarray(array, dtype=np.float32), "byte")


def as_image(obj, range_tag=None) -> ImageTensor:
    """Coerce arrays to ImageTensor; uint8 arrays default to the byte range."""
    if isinstance(obj, ImageTensor):
        return obj
    arr = np.asarray(obj)
    if range_tag is None:
        range_tag = "byte" if arr.dtype == np.uint8 else "unit_signed"
    return ImageTensor(arr.astype(np.float32), range_tag)
