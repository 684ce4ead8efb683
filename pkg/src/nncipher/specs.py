"""Declarative network descriptions and the shipped presets.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` entries plus a
role. Specs are plain data: they validate their own channel chain, serialize to
YAML and hash to an architecture digest that binds parameter keys to them.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import yaml

from .errors import SpecError

ROLES = ("encryptor", "decryptor", "discriminator", "roi")
KINDS = ("conv", "strided_conv", "up_conv", "residual_block", "id_block", "conv_block")
ACTIVATIONS = ("relu", "lrelu", "tanh", "sigmoid", "none")
NORMALIZATIONS = ("batch_norm", "instance_norm", "none")
PADDINGS = ("zero", "reflect")
PROFILES = ("paper", "desk")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    activation: str = "relu"
    alpha: float = 0.2
    normalization: str = "none"
    bias: bool = False
    padding: str = "zero"
    norm_after_activation: bool = False
    # bottleneck width for id_block / conv_block; None means out_channels // 4
    mid_channels: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.normalization not in NORMALIZATIONS:
            raise SpecError(f"unknown normalization {self.normalization!r}")
        if self.padding not in PADDINGS:
            raise SpecError(f"unknown padding {self.padding!r}")
        for name in ("kernel_size", "in_channels", "out_channels", "stride"):
            if int(getattr(self, name)) < 1:
                raise SpecError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kind in ("residual_block", "id_block") and self.in_channels != self.out_channels:
            raise SpecError(f"{self.kind} must preserve channels ({self.in_channels} != {self.out_channels})")
        if self.kind == "strided_conv" and self.stride < 2:
            raise SpecError("strided_conv needs stride >= 2")
        if self.kind == "up_conv" and self.stride < 2:
            raise SpecError("up_conv needs stride >= 2")

    @property
    def bottleneck(self) -> int:
        return self.mid_channels or max(1, self.out_channels // 4)

    @property
    def scale(self) -> float:
        """Spatial resize factor this layer applies (0.5 per stride-2 downsample)."""
        if self.kind == "up_conv":
            return float(self.stride)
        if self.kind in ("strided_conv", "conv_block"):
            return 1.0 / self.stride
        return 1.0


@dataclass(frozen=True)
class NetworkSpec:
    role: str
    input_channels: int
    layers: tuple[LayerSpec, ...]
    # roi only: width of the per-block side projections fused by the head
    side_channels: int = 0
    name: str = "custom"

    def __post_init__(self):
        if self.role not in ROLES:
            raise SpecError(f"unknown role {self.role!r}")
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    @property
    def residual_block_count(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "residual_block")

    @property
    def block_count(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "conv_block")

    @property
    def output_channels(self) -> int:
        return self.layers[-1].out_channels if self.layers else self.input_channels

    def validate(self) -> None:
        channels = self.input_channels
        in_head = False
        for i, layer in enumerate(self.layers):
            if self.role == "roi" and layer.kind in ("conv", "strided_conv", "up_conv") and not in_head:
                # head consumes [input, side_1..side_B] concatenated at full resolution
                in_head = True
                channels = self.input_channels + self.block_count * self.side_channels
            if in_head and layer.kind not in ("conv",):
                raise SpecError(f"layer {i}: roi head may only contain conv layers")
            if layer.in_channels != channels:
                raise SpecError(
                    f"layer {i} ({layer.kind}): in_channels {layer.in_channels} "
                    f"does not chain from previous output {channels}"
                )
            channels = layer.out_channels
        if self.role == "roi":
            if self.block_count == 0:
                raise SpecError("roi spec needs at least one conv_block")
            if self.side_channels < 1:
                raise SpecError("roi spec needs side_channels >= 1")
            if self.layers and self.layers[0].kind != "conv_block":
                raise SpecError("roi spec must start with a conv_block")

    def size_multiple(self) -> int:
        """Input height/width must be a multiple of this for the stride chain."""
        factor = 1
        for layer in self.layers:
            if layer.kind in ("strided_conv", "conv_block"):
                factor *= layer.stride
        return factor

    def structure(self) -> dict:
        """Everything that determines the parameter layout (no role, no name)."""
        return {
            "input_channels": self.input_channels,
            "side_channels": self.side_channels,
            "layers": [asdict(layer) for layer in self.layers],
            "roi_topology": self.role == "roi",
        }

    def digest(self) -> str:
        blob = json.dumps(self.structure(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_role(self, role: str) -> "NetworkSpec":
        return replace(self, role=role)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "role": self.role,
            "input_channels": self.input_channels,
            "side_channels": self.side_channels,
            "residual_block_count": self.residual_block_count,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        try:
            layers = tuple(LayerSpec(**layer) for layer in data["layers"])
            spec = cls(
                role=data["role"],
                input_channels=int(data["input_channels"]),
                layers=layers,
                side_channels=int(data.get("side_channels", 0)),
                name=data.get("name", "custom"),
            )
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed spec: {exc}") from exc
        declared = data.get("residual_block_count")
        if declared is not None and int(declared) != spec.residual_block_count:
            raise SpecError(
                f"residual_block_count {declared} disagrees with layer list ({spec.residual_block_count})"
            )
        return spec


def save_spec(spec: NetworkSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))


def load_spec(path) -> NetworkSpec:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise SpecError(f"{path}: expected a mapping")
    return NetworkSpec.from_dict(data)


# --------------------------------------------------------------------------
# presets

def generator_spec(role="encryptor", width=32, residual_blocks=9, channels=3, name="custom") -> NetworkSpec:
    """Encoder / residual stack / decoder generator (shared by G and F)."""
    if role not in ("encryptor", "decryptor"):
        raise SpecError("generator specs are for encryptor/decryptor roles")
    norm = "instance_norm"
    w1, w2, w3 = width, 2 * width, 4 * width
    layers = [
        LayerSpec("conv", 7, channels, w1, normalization=norm, padding="reflect"),
        LayerSpec("strided_conv", 3, w1, w2, stride=2, normalization=norm),
        LayerSpec("strided_conv", 3, w2, w3, stride=2, normalization=norm),
    ]
    layers += [LayerSpec("residual_block", 3, w3, w3, normalization=norm) for _ in range(residual_blocks)]
    layers += [
        LayerSpec("up_conv", 3, w3, w2, stride=2, normalization=norm),
        LayerSpec("up_conv", 3, w2, w1, stride=2, normalization=norm),
        LayerSpec("conv", 7, w1, channels, activation="tanh", padding="reflect"),
    ]
    return NetworkSpec(role, channels, tuple(layers), name=name)


def discriminator_spec(width=32, channels=3, name="custom") -> NetworkSpec:
    def block(kind, cin, cout, stride=1):
        return LayerSpec(kind, 3, cin, cout, stride=stride, activation="lrelu", alpha=0.2,
                         normalization="batch_norm", norm_after_activation=True)

    layers = (
        block("conv", channels, width),
        block("strided_conv", width, 2 * width, 2),
        block("strided_conv", 2 * width, 4 * width, 2),
        block("conv", 4 * width, 4 * width),
        LayerSpec("conv", 3, 4 * width, 1, activation="sigmoid", bias=True),
    )
    return NetworkSpec("discriminator", channels, layers, name=name)


def roi_spec(widths=(64, 256, 512, 1024, 2048), repeats=(2, 3, 12, 18, 1), side_channels=16,
             head_width=32, channels=3, name="custom") -> NetworkSpec:
    """Five downsampling blocks (conv_block + id_blocks) fused by a full-res head."""
    if len(widths) != len(repeats):
        raise SpecError("widths and repeats must have equal length")
    norm = "instance_norm"
    layers = []
    cin = channels
    for b, (w, reps) in enumerate(zip(widths, repeats)):
        kernel = 7 if b == 0 else 3
        layers.append(LayerSpec("conv_block", kernel, cin, w, stride=2, normalization=norm))
        layers += [LayerSpec("id_block", 3, w, w, normalization=norm) for _ in range(reps - 1)]
        cin = w
    head_in = channels + len(widths) * side_channels
    layers += [
        LayerSpec("conv", 3, head_in, head_width, normalization=norm),
        LayerSpec("conv", 3, head_width, 1, activation="sigmoid", bias=True),
    ]
    return NetworkSpec("roi", channels, tuple(layers), side_channels=side_channels, name=name)


def preset(role: str, profile: str = "desk", residual_blocks: int | None = None) -> NetworkSpec:
    """Named configurations: ``paper`` (full scale) and ``desk`` (commodity hardware)."""
    if profile not in PROFILES:
        raise SpecError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    if role in ("encryptor", "decryptor"):
        if profile == "paper":
            return generator_spec(role, 32, 9 if residual_blocks is None else residual_blocks, name="paper")
        return generator_spec(role, 16, 3 if residual_blocks is None else residual_blocks, name="desk")
    if role == "discriminator":
        return discriminator_spec(32 if profile == "paper" else 16, name=profile)
    if role == "roi":
        if profile == "paper":
            return roi_spec(name="paper")
        return roi_spec(widths=(16, 32, 48, 64, 96), repeats=(2, 2, 3, 3, 1), side_channels=8,
                        head_width=16, name="desk")
    raise SpecError(f"unknown role {role!r}")


# Image edge used by each profile.
PROFILE_RESOLUTION = {"paper": 256, "desk": 64}
