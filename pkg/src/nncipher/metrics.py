"""Security and quality metrics: entropy, NPCR, PSNR, SSIM, Dice, histograms.

All metrics accept ImageTensors or plain arrays. Arrays of dtype uint8 (and
byte-tagged ImageTensors) are read as gray levels 0..255; other float arrays
are assumed to be in [-1, 1].
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .images import ImageTensor, as_image

GRAY_LEVELS = 256
SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 255.0


def _byte_values(img) -> np.ndarray:
    """Gray levels as float64 (not rounded)."""
    img = as_image(img)
    if img.range_tag == "byte":
        return img.values.astype(np.float64)
    if img.range_tag == "unit_signed":
        return (img.values.astype(np.float64) + 1.0) * 127.5
    return img.values.astype(np.float64) * 255.0


def quantize(img) -> np.ndarray:
    """8-bit integer view of an image (H x W x C uint8)."""
    return np.clip(np.round(_byte_values(img)), 0, 255).astype(np.uint8)


def _pair(a, b, quantized=False):
    fa = quantize(a) if quantized else _byte_values(a)
    fb = quantize(b) if quantized else _byte_values(b)
    if fa.shape != fb.shape:
        raise ShapeError(f"shape mismatch: {fa.shape} vs {fb.shape}")
    return fa, fb


def histogram(image) -> np.ndarray:
    """256-bin gray-level counts over every pixel and channel."""
    q = quantize(image)
    return np.bincount(q.ravel(), minlength=GRAY_LEVELS).astype(np.int64)


def entropy(image) -> float:
    """Shannon entropy in bits of the 8-bit gray-level distribution."""
    counts = histogram(image)
    total = counts.sum()
    if total == 0:
        raise ShapeError("entropy of an empty image")
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum() + 0.0)


def chi_square(image) -> float:
    """Uniformity statistic of the histogram against a flat 256-bin law."""
    counts = histogram(image).astype(np.float64)
    expected = counts.sum() / GRAY_LEVELS
    return float(((counts - expected) ** 2 / expected).sum())


def npcr(t1, t2) -> float:
    """Percentage of positions whose 8-bit values differ."""
    a, b = _pair(t1, t2, quantized=True)
    if a.size == 0:
        raise ShapeError("npcr of empty images")
    return 100.0 * float(np.count_nonzero(a != b)) / a.size


def psnr(a, b) -> float:
    """20 log10(255 / RMSE); identical images give ``math.inf``."""
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(DATA_RANGE / math.sqrt(mse))


def _window_sums(x: np.ndarray, w: int) -> np.ndarray:
    """Sum over every w x w window of a 2-D array (valid positions only)."""
    s = np.zeros((x.shape[0] + 1, x.shape[1] + 1), np.float64)
    s[1:, 1:] = x.cumsum(0).cumsum(1)
    return s[w:, w:] - s[:-w, w:] - s[w:, :-w] + s[:-w, :-w]


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: int) -> float:
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    c3 = c2 / 2
    h, w = x.shape
    if min(h, w) < 2 * window:
        n = x.size
        mx, my = x.mean(), y.mean()
        vx = ((x - mx) ** 2).mean()
        vy = ((y - my) ** 2).mean()
        cxy = ((x - mx) * (y - my)).mean()
        mx, my, vx, vy, cxy = (np.array([v]) for v in (mx, my, vx, vy, cxy))
    else:
        n = window * window
        mx = _window_sums(x, window) / n
        my = _window_sums(y, window) / n
        vx = np.maximum(_window_sums(x * x, window) / n - mx ** 2, 0.0)
        vy = np.maximum(_window_sums(y * y, window) / n - my ** 2, 0.0)
        cxy = _window_sums(x * y, window) / n - mx * my
    sx, sy = np.sqrt(vx), np.sqrt(vy)
    lum = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
    con = (2 * sx * sy + c2) / (vx + vy + c2)
    struct = (cxy + c3) / (sx * sy + c3)
    return float(np.mean(lum * con * struct))


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over sliding ``window`` x ``window`` windows.

    Images whose shorter side is below ``2 * window`` are compared with one
    global window. Multi-channel images average the per-channel values.
    """
    x, y = _pair(a, b)
    if window < 1 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ShapeError(f"image {x.shape[:2]} too small for ssim window {window}")
    return float(np.mean([_ssim_channel(x[:, :, c], y[:, :, c], window) for c in range(x.shape[2])]))


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    m = np.asarray(mask.values if isinstance(mask, ImageTensor) else mask, dtype=np.float64)
    if isinstance(mask, ImageTensor) and mask.range_tag == "byte":
        m = m / 255.0
    return m >= threshold


def dice(gt_mask, pred_mask, threshold: float = 0.5) -> float:
    """Overlap |GT & AT| / ((|GT| + |AT|) / 2) of binarized masks; both empty gives 1."""
    g, p = binarize(gt_mask, threshold), binarize(pred_mask, threshold)
    g, p = np.squeeze(g), np.squeeze(p)
    if g.shape != p.shape:
        raise ShapeError(f"mask shape mismatch: {g.shape} vs {p.shape}")
    total = int(g.sum()) + int(p.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(g, p).sum()) / total


@dataclass
class MetricReport:
    entropy: float
    npcr: float
    psnr: float
    ssim: float
    histogram: list
    cipher_ssim: float | None = None
    plain_entropy: float | None = None
    chi_square: float | None = None
    dice: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.entropy <= 8.0 + 1e-9:
            raise ValueError(f"entropy {self.entropy} out of [0, 8]")
        if not 0.0 <= self.npcr <= 100.0:
            raise ValueError(f"npcr {self.npcr} out of [0, 100]")
        if not -1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9:
            raise ValueError(f"ssim {self.ssim} out of [-1, 1]")
        if self.dice is not None and not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice {self.dice} out of [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr"] = "inf" if math.isinf(self.psnr) else self.psnr
        if self.dice is None:
            d.pop("dice")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["psnr"] = math.inf if d["psnr"] == "inf" else float(d["psnr"])
        return cls(**d)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_table(self) -> str:
        rows = [("entropy (bits)", f"{self.entropy:.4f}"),
                ("npcr (%)", f"{self.npcr:.2f}"),
                ("psnr (dB)", "inf" if math.isinf(self.psnr) else f"{self.psnr:.2f}"),
                ("ssim", f"{self.ssim:.4f}")]
        if self.cipher_ssim is not None:
            rows.append(("ssim cipher/plain", f"{self.cipher_ssim:.4f}"))
        if self.plain_entropy is not None:
            rows.append(("plain entropy (bits)", f"{self.plain_entropy:.4f}"))
        if self.dice is not None:
            rows.append(("dice", f"{self.dice:.4f}"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def write_histogram_csv(counts, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "count"])
        for level, count in enumerate(counts):
            writer.writerow([level, int(count)])


def _gray(img) -> ImageTensor:
    img = as_image(img)
    return img.to_channels(1) if img.channels == 3 else img


def evaluate_pair(plain, cipher, decrypted, masks=None, metadata=None) -> MetricReport:
    """Bundle every applicable metric for one plaintext / ciphertext / decryption triple.

    ``masks`` is an optional (ground_truth, prediction) pair. Cross-domain
    comparisons (plain vs cipher) use channel-averaged gray images when the
    channel counts differ.
    """
    plain, cipher, decrypted = as_image(plain), as_image(cipher), as_image(decrypted)
    cp, cc = plain, cipher
    if plain.channels != cipher.channels:
        cp, cc = _gray(plain), _gray(cipher)
    dp, dd = plain, decrypted
    if plain.channels != decrypted.channels:
        dp, dd = _gray(plain), _gray(decrypted)
    return MetricReport(
        entropy=entropy(cipher),
        npcr=npcr(cp, cc),
        psnr=psnr(dp, dd),
        ssim=ssim(dp, dd),
        histogram=histogram(cipher).tolist(),
        cipher_ssim=ssim(cp, cc),
        plain_entropy=entropy(plain),
        chi_square=chi_square(cipher),
        dice=None if masks is None else dice(masks[0], masks[1]),
        metadata=dict(metadata or {}),
    )
