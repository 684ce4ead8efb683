"""Encryption and decryption of images with trained parameter keys."""
from __future__ import annotations

import json
import os
import platform
import threading
import time
import warnings
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CipherError, ShapeError
from .images import ImageTensor, as_image
from .keystore import KeyPair, ParameterKey, key_fingerprint
from .networks import build_model, run, to_batch


class FingerprintWarning(UserWarning):
    """A ciphertext is being decrypted with a key pair that did not produce it."""


class BatchError(CipherError):
    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class CipherImage:
    payload: ImageTensor
    key_fingerprint: str
    spec_digest: str = ""

    def __post_init__(self):
        if not self.key_fingerprint:
            raise ValueError("cipher image needs the encrypting key fingerprint")
        if self.payload.range_tag not in ("byte", "unit_signed"):
            raise ValueError(f"cipher payload range {self.payload.range_tag!r} is not a storage range")

    @property
    def quantized(self) -> bool:
        return self.payload.range_tag == "byte"

    def sidecar(self) -> dict:
        return {"key_fingerprint": self.key_fingerprint, "spec_digest": self.spec_digest,
                "range_tag": self.payload.range_tag, "height": self.payload.height,
                "width": self.payload.width, "channels": self.payload.channels}


# models are rebuilt from keys on demand; keep the most recent few around
_CACHE_SIZE = 8
_cache: OrderedDict = OrderedDict()
_cache_lock = threading.Lock()


def _model(spec, key: ParameterKey, role: str):
    spec = spec.with_role(role)
    ident = (key_fingerprint(key), spec.digest(), role)
    with _cache_lock:
        if ident in _cache:
            _cache.move_to_end(ident)
            return _cache[ident]
    model = build_model(spec, key)
    with _cache_lock:
        _cache[ident] = model
        while len(_cache) > _CACHE_SIZE:
            _cache.popitem(last=False)
    return model


def clear_model_cache() -> None:
    with _cache_lock:
        _cache.clear()


def _apply(model, image: ImageTensor) -> np.ndarray:
    out = run(model, to_batch([image], model.spec.input_channels, model.dtype))[0]
    return np.clip(out.permute(1, 2, 0).cpu().numpy().astype(np.float32), -1.0, 1.0)


def encrypt(image, enc_key: ParameterKey, spec, quantize: bool = True) -> CipherImage:
    """Map a plaintext into the ciphertext domain.

    Gray inputs are replicated to three channels. By default the result is
    quantized to 8-bit gray levels, which is what gets stored and attacked;
    ``quantize=False`` keeps the float output for lossless comparison.
    """
    img = as_image(image)
    enc_key.check_applicable(spec)
    out = ImageTensor(_apply(_model(spec, enc_key, "encryptor"), img), "unit_signed")
    if quantize:
        out = out.to_byte()
    return CipherImage(out, key_fingerprint(enc_key), spec.digest())


def decrypt(cipher, dec_key, spec, gray: bool = True) -> ImageTensor:
    """Reconstruct a plaintext; ``dec_key`` is a ParameterKey or a KeyPair.

    When a KeyPair is given and the cipher was produced by a different
    encryption key, a :class:`FingerprintWarning` is issued and decryption is
    still attempted. The result is channel-averaged to gray unless
    ``gray=False``.
    """
    if isinstance(dec_key, KeyPair):
        expected = key_fingerprint(dec_key.encryption_key)
        if isinstance(cipher, CipherImage) and cipher.key_fingerprint != expected:
            warnings.warn(f"ciphertext was encrypted with key {cipher.key_fingerprint[:12]}, "
                          f"not this pair's {expected[:12]}", FingerprintWarning, stacklevel=2)
        dec_key = dec_key.decryption_key
    dec_key.check_applicable(spec)
    payload = cipher.payload if isinstance(cipher, CipherImage) else as_image(cipher)
    out = ImageTensor(_apply(_model(spec, dec_key, "decryptor"), payload), "unit_signed")
    return out.to_channels(1) if gray else out


def _map(fn, items, workers):
    items = list(items)
    results = [None] * len(items)

    def one(i):
        try:
            results[i] = fn(items[i])
        except Exception as exc:  # noqa: BLE001 - re-raised with the index
            raise BatchError(f"item {i} failed: {exc}", i) from exc

    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(one, i) for i in range(len(items))]
            for f in futures:
                f.result()
    else:
        for i in range(len(items)):
            one(i)
    return results


def encrypt_batch(images, enc_key, spec, workers: int = 0, quantize: bool = True) -> list:
    """Elementwise :func:`encrypt`; order preserved, the first failure raises with its index."""
    return _map(lambda img: encrypt(img, enc_key, spec, quantize), images, workers)


def decrypt_batch(ciphers, dec_key, spec, workers: int = 0, gray: bool = True) -> list:
    return _map(lambda c: decrypt(c, dec_key, spec, gray), ciphers, workers)


# --------------------------------------------------------------------------
# throughput

def hardware_descriptor() -> dict:
    return {"machine": platform.machine(), "processor": platform.processor() or "unknown",
            "system": platform.system(), "cpu_count": os.cpu_count(),
            "torch_threads": torch.get_num_threads(), "torch": torch.__version__,
            "device": "cuda" if torch.cuda.is_available() else "cpu"}


@dataclass
class ThroughputReport:
    images_per_second: float
    resolution: tuple
    images: int
    seconds: float
    hardware: dict

    def to_dict(self):
        return {"images_per_second": self.images_per_second, "resolution": list(self.resolution),
                "images": self.images, "seconds": self.seconds, "hardware": self.hardware}


def measure_throughput(spec, key: ParameterKey, resolution=256, duration: float = 2.0,
                       role: str = "encryptor", seed: int = 0) -> ThroughputReport:
    """Sustained single-image encryption (or decryption) rate over at least ``duration`` seconds."""
    h, w = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
    model = _model(spec, key, role)
    rng = np.random.default_rng(seed)
    x = to_batch([ImageTensor(rng.uniform(-1, 1, (h, w, spec.input_channels)).astype(np.float32))],
                 spec.input_channels, model.dtype)
    run(model, x)  # warm-up
    count, start = 0, time.perf_counter()
    while True:
        run(model, x)
        count += 1
        elapsed = time.perf_counter() - start
        if elapsed >= duration:
            break
    return ThroughputReport(count / elapsed, (h, w), count, elapsed, hardware_descriptor())


# --------------------------------------------------------------------------
# files

def save_cipher(cipher: CipherImage, path, keep_float: bool = False) -> Path:
    """Write the 8-bit ciphertext image plus a JSON sidecar (and optionally a float .npy)."""
    from .data import write_image

    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm", ".pgm"):
        raise ValueError("ciphertexts are stored losslessly as .png or .ppm")
    if cipher.payload.channels == 3 and path.suffix.lower() == ".pgm":
        path = path.with_suffix(".ppm")
    write_image(path, cipher.payload)
    meta = cipher.sidecar()
    if keep_float and not cipher.quantized:
        np.save(path.with_suffix(".npy"), cipher.payload.values)
        meta["float_sidecar"] = path.with_suffix(".npy").name
    meta["range_tag"] = "byte"
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_cipher(path, prefer_float: bool = False) -> CipherImage:
    from .data import read_image

    path = Path(path)
    side = path.with_suffix(".json")
    if not side.exists():
        raise CipherError(f"{path}: missing sidecar {side.name}")
    meta = json.loads(side.read_text())
    if prefer_float and meta.get("float_sidecar"):
        payload = ImageTensor(np.load(path.parent / meta["float_sidecar"]), "unit_signed")
    else:
        payload = read_image(path)
    if (payload.height, payload.width) != (meta["height"], meta["width"]):
        raise ShapeError(f"{path}: image size does not match its sidecar")
    return CipherImage(payload, meta["key_fingerprint"], meta.get("spec_digest", ""))
