"""Network parameters as private keys.

A :class:`ParameterKey` is the ordered, flattened float32 parameter vector of
one network together with its layout and the digest of the spec that induced
it. Keys are immutable; training produces new keys.

Key file layout (all integers little-endian)::

    b"DEDN" | u16 version | 32-byte spec digest | u32 len + provenance JSON
    | u32 entry count | per entry: u16 len + utf-8 id, u8 ndim, ndim * u32 dims
    | raw float32 values in layout order | 32-byte sha256 of everything before
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptKeyFile, DigestMismatch, LayoutError

MAGIC = b"DEDN"
FORMAT_VERSION = 1
BITS_PER_PARAMETER = 32


@dataclass(frozen=True)
class Provenance:
    rng_seed: int | None = None
    created: float = field(default_factory=time.time)
    run_id: str = "untrained"

    def to_dict(self):
        return {"rng_seed": self.rng_seed, "created": self.created, "run_id": self.run_id}


@dataclass(frozen=True, eq=False)
class ParameterKey:
    layout: tuple
    values: np.ndarray
    architecture_digest: str
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        layout = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in self.layout)
        values = np.ascontiguousarray(self.values, dtype="<f4").ravel()
        expected = sum(int(np.prod(shape)) for _, shape in layout)
        if values.size != expected:
            raise LayoutError(f"key has {values.size} values but layout declares {expected}")
        values.setflags(write=False)
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, ParameterKey):
            return NotImplemented
        return (self.layout == other.layout
                and self.architecture_digest == other.architecture_digest
                and self.values.tobytes() == other.values.tobytes())

    def __hash__(self):
        return hash(key_fingerprint(self))

    def check_applicable(self, spec) -> None:
        if self.architecture_digest != spec.digest():
            raise DigestMismatch(
                f"key digest {self.architecture_digest[:12]} does not match spec digest {spec.digest()[:12]}"
            )

    def tensors(self):
        """Yield (layer_id, ndarray view) pairs in layout order."""
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            yield name, self.values[offset:offset + n].reshape(shape)
            offset += n

    def with_values(self, values, **provenance) -> "ParameterKey":
        prov = Provenance(**provenance) if provenance else self.provenance
        return ParameterKey(self.layout, values, self.architecture_digest, prov)


@dataclass(frozen=True)
class KeyPair:
    encryption_key: ParameterKey
    decryption_key: ParameterKey

    def __post_init__(self):
        if self.encryption_key.layout != self.decryption_key.layout:
            raise LayoutError("encryption and decryption keys must share one architecture")


# --------------------------------------------------------------------------
# initialization

def _init_bounds(layout):
    """Per-entry (low, high) of the centered fan-in uniform init law.

    Weights with >= 2 dims draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) where
    fan_in = prod(shape[1:]). Biases reuse their sibling weight's bound; norm
    scales draw from U(0.9, 1.1) so every coordinate is random.
    """
    bounds = []
    weight_bound = {}
    for name, shape in layout:
        prefix = name.rsplit(".", 1)[0]
        if len(shape) >= 2:
            b = 1.0 / math.sqrt(max(1, int(np.prod(shape[1:]))))
            weight_bound[prefix] = b
            bounds.append((-b, b))
        elif name.endswith("weight"):
            bounds.append((0.9, 1.1))
        else:
            b = weight_bound.get(prefix, 0.1)
            bounds.append((-b, b))
    return bounds


def _draw(rng, layout):
    chunks = []
    for (lo, hi), (_, shape) in zip(_init_bounds(layout), layout):
        chunks.append(rng.uniform(lo, hi, size=int(np.prod(shape))).astype(np.float32))
    return np.concatenate(chunks) if chunks else np.zeros(0, np.float32)


def init_random(spec, seed: int) -> ParameterKey:
    """Fresh random key for ``spec``; identical (spec, seed) gives identical keys."""
    from .networks import param_layout

    layout = param_layout(spec)
    rng = np.random.default_rng(int(seed))
    return ParameterKey(layout, _draw(rng, layout), spec.digest(), Provenance(rng_seed=int(seed)))


def key_from_module(spec, net, rng_seed=None, run_id="untrained") -> ParameterKey:
    layout = [(name, tuple(p.shape)) for name, p in net.named_parameters()]
    values = np.concatenate([p.detach().cpu().float().numpy().ravel() for _, p in net.named_parameters()]) \
        if layout else np.zeros(0, np.float32)
    return ParameterKey(layout, values, spec.digest(), Provenance(rng_seed=rng_seed, run_id=run_id))


def perturb_key(key: ParameterKey, fraction: float, seed: int) -> ParameterKey:
    """Re-randomize exactly ceil(fraction * len) uniformly chosen coordinates."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(key)
    # round first so 0.07 * 100 counts 7, not 8
    count = min(n, math.ceil(round(fraction * n, 9)))
    rng = np.random.default_rng(int(seed))
    positions = rng.choice(n, size=count, replace=False)
    bounds = np.empty((n, 2), np.float64)
    offset = 0
    for (lo, hi), (_, shape) in zip(_init_bounds(key.layout), key.layout):
        size = int(np.prod(shape))
        bounds[offset:offset + size] = (lo, hi)
        offset += size
    values = key.values.copy()
    lo, hi = bounds[positions, 0], bounds[positions, 1]
    fresh = rng.uniform(lo, hi).astype(np.float32)
    same = fresh == values[positions]
    while same.any():
        fresh[same] = rng.uniform(lo[same], hi[same]).astype(np.float32)
        same = fresh == values[positions]
    values[positions] = fresh
    return key.with_values(values, rng_seed=int(seed), run_id=f"perturbed:{key_fingerprint(key)[:16]}")


def key_fingerprint(key: ParameterKey) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([[n, list(s)] for n, s in key.layout], separators=(",", ":")).encode())
    h.update(key.values.astype("<f4").tobytes())
    return h.hexdigest()


def key_space_bits(key_or_count) -> int:
    """Key space size in bits: 32 per float32 parameter."""
    n = key_or_count if isinstance(key_or_count, int) else len(key_or_count)
    return BITS_PER_PARAMETER * int(n)


# --------------------------------------------------------------------------
# serialization

def _encode(key: ParameterKey) -> bytes:
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), bytes.fromhex(key.architecture_digest)]
    prov = json.dumps(key.provenance.to_dict(), sort_keys=True).encode()
    parts += [struct.pack("<I", len(prov)), prov, struct.pack("<I", len(key.layout))]
    for name, shape in key.layout:
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", len(shape)),
                  struct.pack(f"<{len(shape)}I", *shape)]
    parts.append(key.values.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def _decode(blob: bytes, source="<bytes>") -> ParameterKey:
    if len(blob) < 4 + 2 + 32 + 32 or blob[:4] != MAGIC:
        raise CorruptKeyFile(f"{source}: not a key file (bad magic or too short)")
    body, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise CorruptKeyFile(f"{source}: checksum mismatch (truncated or modified)")
    try:
        pos = 4
        (version,) = struct.unpack_from("<H", body, pos)
        pos += 2
        if version != FORMAT_VERSION:
            raise CorruptKeyFile(f"{source}: unsupported format version {version}")
        digest = body[pos:pos + 32].hex()
        pos += 32
        (plen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        prov = json.loads(body[pos:pos + plen])
        pos += plen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        layout = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            layout.append((name, tuple(shape)))
        total = sum(int(np.prod(s)) for _, s in layout)
        raw = body[pos:]
        if len(raw) != 4 * total:
            raise CorruptKeyFile(f"{source}: expected {total} values, found {len(raw) // 4}")
        values = np.frombuffer(raw, dtype="<f4").copy()
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptKeyFile(f"{source}: {exc}") from exc
    return ParameterKey(tuple(layout), values, digest, Provenance(**prov))


def save_key(key: ParameterKey, path) -> None:
    Path(path).write_bytes(_encode(key))


def load_key(path) -> ParameterKey:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CorruptKeyFile(f"{path}: cannot read key file ({exc})") from exc
    return _decode(blob, str(path))
