"""Region-of-interest segmentation applied directly to ciphertexts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, SpecError, TrainingDiverged
from .images import ImageTensor, as_image
from .metrics import dice
from .networks import run, to_batch

THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Soft mask in [0, 1] with the binarization threshold it was produced with."""

    values: np.ndarray
    threshold: float = THRESHOLD
    binarized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 3 and v.shape[2] == 1:
            v = v[:, :, 0]
        if v.ndim != 2:
            raise ShapeError(f"mask must be H x W, got {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0 or not np.isfinite(v).all()):
            raise ValueError("mask values must lie in [0, 1]")
        if self.binarized and not np.isin(v, (0.0, 1.0)).all():
            raise ValueError("binarized mask holds values other than 0 and 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def binarize(self) -> "SegmentationMask":
        if self.binarized:
            return self
        return SegmentationMask((self.values >= self.threshold).astype(np.float32), self.threshold, True)

    def as_bool(self) -> np.ndarray:
        return self.values >= self.threshold

    def __eq__(self, other):
        if not isinstance(other, SegmentationMask):
            return NotImplemented
        return self.binarized == other.binarized and np.array_equal(self.values, other.values)


def _payload(cipher) -> ImageTensor:
    from .cipher import CipherImage

    return cipher.payload if isinstance(cipher, CipherImage) else as_image(cipher)


def segment(cipher, roi_model) -> SegmentationMask:
    """Soft lung-field mask predicted from a ciphertext (or any image)."""
    if roi_model.spec.role != "roi":
        raise SpecError(f"segment needs an roi model, got role {roi_model.spec.role!r}")
    img = _payload(cipher)
    out = run(roi_model, to_batch([img], roi_model.spec.input_channels, roi_model.dtype))[0, 0]
    return SegmentationMask(np.clip(out.cpu().numpy(), 0.0, 1.0))


def segment_batch(ciphers, roi_model, batch_size: int = 32) -> list:
    if roi_model.spec.role != "roi":
        raise SpecError(f"segment needs an roi model, got role {roi_model.spec.role!r}")
    images = [_payload(c) for c in ciphers]
    masks = []
    for start in range(0, len(images), batch_size):
        x = to_batch(images[start:start + batch_size], roi_model.spec.input_channels, roi_model.dtype)
        out = run(roi_model, x)[:, 0].cpu().numpy()
        masks.extend(SegmentationMask(np.clip(m, 0.0, 1.0)) for m in out)
    return masks


def mean_dice(masks_true, masks_pred) -> float:
    if len(masks_true) != len(masks_pred):
        raise ShapeError("mask lists differ in length")
    scores = [dice(np.asarray(t, np.float32), p.values if isinstance(p, SegmentationMask) else p)
              for t, p in zip(masks_true, masks_pred)]
    return float(np.mean(scores))


@dataclass
class SegmentationComparison:
    dice_plain: float | None
    dice_cipher: float | None
    per_image_plain: list = field(default_factory=list)
    per_image_cipher: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    @property
    def gap(self) -> float | None:
        if self.dice_plain is None or self.dice_cipher is None:
            return None
        return abs(self.dice_plain - self.dice_cipher)

    def to_dict(self) -> dict:
        return {"dice_plain": self.dice_plain, "dice_cipher": self.dice_cipher, "gap": self.gap,
                "per_image_plain": self.per_image_plain, "per_image_cipher": self.per_image_cipher,
                "failures": self.failures}


def _fit_and_score(train_x, train_m, test_x, test_m, cfg, spec, train_fn=None):
    from .training import train_roi

    model, _ = (train_fn or train_roi)(train_x, train_m, cfg, spec)
    preds = segment_batch(test_x, model)
    return [dice(np.asarray(t, np.float32), p.values) for t, p in zip(test_m, preds)], model


def compare_plain_vs_cipher_segmentation(plain_dataset, cipher_dataset, masks, cfg, spec=None,
                                         holdout: int | None = None, train_fn=None) -> SegmentationComparison:
    """Train one ROI model on plaintexts and one on ciphertexts with identical settings.

    The last ``holdout`` aligned items (default one fifth) are held out for
    Dice evaluation. Training divergence is recorded, not raised.
    ``train_fn(images, masks, cfg, spec) -> (model, trace)`` replaces
    :func:`train_roi`, for instance to reuse cached models.
    """
    plain, cipher, masks = list(plain_dataset), [_payload(c) for c in cipher_dataset], list(masks)
    if not masks:
        raise ConfigError("no masks supplied", "masks")
    if not (len(plain) == len(cipher) == len(masks)):
        raise ShapeError(f"datasets not aligned: {len(plain)} plain, {len(cipher)} cipher, {len(masks)} masks")
    holdout = holdout if holdout is not None else max(1, len(masks) // 5)
    if not 0 < holdout < len(masks):
        raise ConfigError(f"holdout {holdout} must leave training data", "holdout")
    cut = len(masks) - holdout
    result = SegmentationComparison(None, None)
    for name, data in (("plain", plain), ("cipher", cipher)):
        try:
            scores, _ = _fit_and_score(data[:cut], masks[:cut], data[cut:], masks[cut:], cfg, spec, train_fn)
        except TrainingDiverged as exc:
            result.failures[name] = str(exc)
            continue
        setattr(result, f"dice_{name}", float(np.mean(scores)))
        setattr(result, f"per_image_{name}", scores)
    return result
