"""Dataset ingestion, procedural hidden-factor textures and synthetic plaintexts."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .images import ImageTensor

HIDDEN_FACTOR_KINDS = ("smoothed_noise", "stripe_texture", "blob_texture", "user_supplied")
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".tif", ".tiff", ".bmp")


class DatasetError(Exception):
    """A dataset file is missing, corrupt or fails checksum verification."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


# --------------------------------------------------------------------------
# image files

def read_image(path) -> ImageTensor:
    """Read a lossless raster as a byte-range ImageTensor (1 or 3 channels)."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F", "1", "P", "LA"):
                arr = np.asarray(im.convert("L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError as exc:
        raise DatasetError(f"missing image file {path}", path) from exc
    except OSError as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}", path) from exc
    return ImageTensor(arr.astype(np.float32), "byte")


def write_image(path, image) -> None:
    """Write an ImageTensor (any range) as an 8-bit lossless file."""
    if not isinstance(image, ImageTensor):
        image = ImageTensor(np.asarray(image, np.float32), "byte" if np.asarray(image).dtype == np.uint8 else "unit_signed")
    arr = image.as_uint8()
    path = Path(path)
    if path.suffix.lower() in (".jpg", ".jpeg", ".webp"):
        raise ValueError("lossy formats would corrupt cipher statistics; use .png or .pgm")
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], "L").save(path)
    else:
        if path.suffix.lower() == ".pgm":
            path = path.with_suffix(".ppm")
        Image.fromarray(arr, "RGB").save(path)


def write_mask(path, mask) -> None:
    m = np.squeeze(np.asarray(mask.values if isinstance(mask, ImageTensor) else mask))
    if m.dtype == bool or m.max(initial=0) <= 1:
        m = (m >= 0.5).astype(np.uint8) * 255
    Image.fromarray(m.astype(np.uint8), "L").save(path)


def read_mask(path) -> np.ndarray:
    return read_image(path).values[:, :, 0] >= 128


def resize(image: ImageTensor, resolution, nearest=False) -> ImageTensor:
    h, w = resolution
    if image.values.shape[:2] == (h, w):
        return image
    mode = Image.NEAREST if nearest else Image.BICUBIC
    chans = [np.asarray(Image.fromarray(image.values[:, :, c].astype(np.float32), "F").resize((w, h), mode))
             for c in range(image.channels)]
    lo, hi = (0, 255) if image.range_tag == "byte" else (-1, 1) if image.range_tag == "unit_signed" else (0, 1)
    return ImageTensor(np.clip(np.stack(chans, axis=2), lo, hi), image.range_tag)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestEntry:
    image: str
    mask: str | None = None
    split: str = "train"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    resolution: tuple = (64, 64)
    normalization: str = "unit_signed"
    checksums: dict = field(default_factory=dict)
    split_seed: int | None = None
    root: str = "."

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        paths = [e.image for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ConfigError("duplicate image paths in manifest", "entries")

    def to_dict(self) -> dict:
        return {"resolution": list(self.resolution), "normalization": self.normalization,
                "split_seed": self.split_seed, "checksums": dict(self.checksums),
                "entries": [asdict(e) for e in self.entries]}

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = yaml.safe_load(path.read_text())
        if not isinstance(data, dict) or "entries" not in data:
            raise ConfigError(f"{path}: not a dataset manifest", "entries")
        entries = tuple(ManifestEntry(**e) for e in data["entries"])
        return cls(entries, tuple(data.get("resolution", (64, 64))), data.get("normalization", "unit_signed"),
                   dict(data.get("checksums", {})), data.get("split_seed"), str(path.parent))

    def by_split(self, split: str) -> "DatasetManifest":
        return replace(self, entries=tuple(e for e in self.entries if e.split == split))


def build_manifest(image_dir, mask_dir=None, resolution=(64, 64), normalization="unit_signed",
                   root=None) -> DatasetManifest:
    """Scan a directory of images (and optional same-named masks) into a manifest."""
    image_dir = Path(image_dir)
    root = Path(root) if root is not None else image_dir.parent
    entries, sums = [], {}
    for p in sorted(image_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        rel = str(p.relative_to(root))
        mask_rel = None
        if mask_dir is not None:
            candidates = [q for q in Path(mask_dir).glob(p.stem + ".*") if q.suffix.lower() in IMAGE_SUFFIXES]
            if candidates:
                mask_rel = str(candidates[0].relative_to(root))
                sums[mask_rel] = file_checksum(candidates[0])
        entries.append(ManifestEntry(rel, mask_rel))
        sums[rel] = file_checksum(p)
    return DatasetManifest(tuple(entries), tuple(resolution), normalization, sums, None, str(root))


@dataclass
class Sample:
    image: ImageTensor
    mask: np.ndarray | None
    split: str
    path: str


def load_dataset(manifest: DatasetManifest, root=None) -> list:
    """Verify checksums, decode, resize and normalize every manifest entry.

    Gray sources are replicated to three channels.
    """
    root = Path(root if root is not None else manifest.root)
    samples = []
    for entry in manifest.entries:
        img = _load_verified(root, entry.image, manifest)
        img = resize(img, manifest.resolution).to_channels(3)
        if manifest.normalization == "unit_signed":
            img = img.to_unit_signed()
        mask = None
        if entry.mask:
            m = _load_verified(root, entry.mask, manifest)
            mask = resize(m.to_channels(1), manifest.resolution, nearest=True).values[:, :, 0] >= 128
        samples.append(Sample(img, mask, entry.split, entry.image))
    return samples


def _load_verified(root: Path, rel: str, manifest: DatasetManifest) -> ImageTensor:
    path = root / rel
    if not path.exists():
        raise DatasetError(f"missing file {rel}", rel)
    expected = manifest.checksums.get(rel)
    if expected is not None and file_checksum(path) != expected:
        raise DatasetError(f"checksum mismatch for {rel}", rel)
    return read_image(path)


def split(manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 0,
          names=("train", "val", "test")) -> DatasetManifest:
    """Deterministic disjoint partition; counts use largest-remainder rounding."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(names) or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be {len(names)} non-negative values summing to 1, got {fractions}",
                          "fractions")
    n = len(manifest.entries)
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    for i in sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)[: n - sum(counts)]:
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    tags = [None] * n
    pos = 0
    for name, c in zip(names, counts):
        for i in order[pos:pos + c]:
            tags[i] = name
        pos += c
    entries = tuple(replace(e, split=t) for e, t in zip(manifest.entries, tags))
    return replace(manifest, entries=entries, split_seed=seed)


# --------------------------------------------------------------------------
# hidden factors

@dataclass(frozen=True)
class HiddenFactorSpec:
    generator_kind: str = "smoothed_noise"
    parameters: dict = field(default_factory=dict)
    count: int = 200
    seed: int = 0
    resolution: tuple = (64, 64)
    channels: int = 3

    def __post_init__(self):
        if self.generator_kind not in HIDDEN_FACTOR_KINDS:
            raise ConfigError(f"unknown hidden-factor kind {self.generator_kind!r}", "generator_kind")
        if self.count < 0:
            raise ConfigError("count must be >= 0", "count")
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))

    def to_dict(self):
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d


def _equalize(z: np.ndarray) -> np.ndarray:
    """Map values to 0..255 by rank so every gray level is (nearly) equally used."""
    ranks = z.ravel().argsort(kind="stable").argsort(kind="stable").reshape(z.shape)
    return np.floor(ranks * 256.0 / z.size)


def _smoothed_noise(rng, shape, p):
    z = gaussian_filter(rng.normal(size=shape), float(p.get("sigma", 1.5)), mode="wrap")
    return _equalize(z)


def _stripes(rng, shape, p):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    z = np.zeros(shape)
    for _ in range(int(p.get("components", 3))):
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(float(p.get("min_period", 3.0)), float(p.get("max_period", 9.0)))
        phase = rng.uniform(0, 2 * np.pi)
        z += np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    z += float(p.get("noise", 0.3)) * rng.normal(size=shape)
    return _equalize(z)


def _blobs(rng, shape, p):
    h, w = shape
    z = np.zeros(shape)
    n = int(p.get("blobs", 40))
    ys, xs = rng.integers(0, h, n), rng.integers(0, w, n)
    z[ys, xs] = rng.normal(size=n) * 10
    z = gaussian_filter(z, float(p.get("sigma", 2.5)), mode="wrap") + 0.05 * rng.normal(size=shape)
    return _equalize(z)


def generate_hidden_factors(spec: HiddenFactorSpec) -> list:
    """Deterministic texture images forming the target (ciphertext) domain."""
    if spec.generator_kind == "user_supplied":
        directory = spec.parameters.get("path")
        if not directory:
            raise ConfigError("user_supplied hidden factors need parameters.path", "parameters")
        files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        images = [resize(read_image(f), spec.resolution).to_channels(spec.channels) for f in files]
        return images[: spec.count] if spec.count else images
    fn = {"smoothed_noise": _smoothed_noise, "stripe_texture": _stripes, "blob_texture": _blobs}[spec.generator_kind]
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.count):
        chans = [fn(rng, spec.resolution, spec.parameters) for _ in range(spec.channels)]
        out.append(ImageTensor(np.stack(chans, axis=2).astype(np.float32), "byte"))
    return out


# --------------------------------------------------------------------------
# synthetic plaintexts

def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0


def generate_synthetic_plaintexts(count: int, seed: int = 0, resolution=(64, 64), noise: float = 2.0,
                                  blur: float = 0.8):
    """Chest-radiograph-like phantoms with an exact analytic mask of the left lung.

    Each image has a dark background, a bright body ellipse with a vertical
    intensity gradient, two darker lung ellipses and a bright spine band. The
    mask is the membership set of the (image-left) lung ellipse.
    """
    h, w = resolution
    s = min(h, w) / 64.0
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    images, masks = [], []
    for _ in range(count):
        img = np.full((h, w), 15.0)
        cy, cx = h / 2 + 2 * s + rng.normal(0, 2 * s), w / 2 + rng.normal(0, 2 * s)
        body = _ellipse(yy, xx, cy, cx, (28 + rng.normal(0, 1.5)) * s, (26 + rng.normal(0, 1.5)) * s)
        img[body] = 140 + rng.normal(0, 4) + (yy[body] - cy) * 0.6 / s
        lung_mask = None
        for side in (-1, 1):
            ly = cy - 2 * s + rng.normal(0, 1) * s
            lx = cx + side * (11 + rng.normal(0, 1)) * s
            lung = _ellipse(yy, xx, ly, lx, (15 + rng.normal(0, 1.5)) * s, (7 + rng.normal(0, 1)) * s)
            img[lung] = 60 + rng.normal(0, 5)
            if side == -1:
                lung_mask = lung
        img[(np.abs(xx - cx) < 2.5 * s) & body] = 200
        img = gaussian_filter(img, blur * s) + rng.normal(0, noise, (h, w))
        images.append(ImageTensor(np.clip(np.round(img), 0, 255).astype(np.float32), "byte"))
        masks.append(lung_mask)
    return images, masks


def dominant_bin_fraction(image: ImageTensor) -> float:
    vals = image.as_uint8().ravel()
    return float(np.bincount(vals, minlength=256).max() / vals.size)


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2))


@dataclass
class DeskData:
    """Aligned synthetic plaintexts, masks and hidden factors for desk-scale runs."""

    train_images: list
    train_masks: list
    test_images: list
    test_masks: list
    hidden_factors: list
    provenance: dict


def desk_dataset(seed: int = 0, count: int = 400, holdout: int = 40, hidden: HiddenFactorSpec | None = None,
                 resolution=(64, 64)) -> DeskData:
    """Synthetic plaintexts (``count`` train + ``holdout`` test) and a hidden-factor set.

    The hidden factors default to smoothed noise with seed ``seed + 1``.
    """
    images, masks = generate_synthetic_plaintexts(count + holdout, seed, resolution)
    hidden = hidden or HiddenFactorSpec("smoothed_noise", {"sigma": 1.5}, 200, seed + 1, tuple(resolution))
    factors = generate_hidden_factors(hidden)
    prov = {"plaintext_seed": seed, "count": count, "holdout": holdout, "resolution": list(resolution),
            "hidden_factors": hidden.to_dict()}
    return DeskData(images[:count], masks[:count], images[count:], masks[count:], factors, prov)
