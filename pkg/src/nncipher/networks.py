"""Builds the four architectures from a NetworkSpec and evaluates them.

Every network is a torch module assembled from the spec's layer list. A
:class:`Model` pairs that module with the spec; its parameters are always
loaded from (and extractable to) a flat :class:`~nncipher.keystore.ParameterKey`.
"""
from __future__ import annotations

import threading

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LayoutError, NumericFailure, ShapeError, SpecError
from .images import ImageTensor, as_image
from .specs import LayerSpec, NetworkSpec


def _activation(layer: LayerSpec) -> nn.Module:
    if layer.activation == "relu":
        return nn.ReLU()
    if layer.activation == "lrelu":
        return nn.LeakyReLU(layer.alpha)
    if layer.activation == "tanh":
        return nn.Tanh()
    if layer.activation == "sigmoid":
        return nn.Sigmoid()
    return nn.Identity()


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch_norm":
        # batch statistics only: no running buffers, so the key alone fixes the network
        return nn.BatchNorm2d(channels, affine=True, track_running_stats=False)
    if kind == "instance_norm":
        return nn.InstanceNorm2d(channels, affine=False)
    return nn.Identity()


class ConvUnit(nn.Module):
    """conv -> norm -> activation (or conv -> activation -> norm)."""

    def __init__(self, layer: LayerSpec, kernel=None, cin=None, cout=None, stride=None,
                 activation=True, transposed=False):
        super().__init__()
        k = layer.kernel_size if kernel is None else kernel
        cin = layer.in_channels if cin is None else cin
        cout = layer.out_channels if cout is None else cout
        s = layer.stride if stride is None else stride
        self.reflect = layer.padding == "reflect" and k > 1 and not transposed
        pad = k // 2
        if transposed:
            self.conv = nn.ConvTranspose2d(cin, cout, k, stride=s, padding=pad,
                                           output_padding=s - 1, bias=layer.bias)
        else:
            self.conv = nn.Conv2d(cin, cout, k, stride=s, padding=0 if self.reflect else pad, bias=layer.bias)
        self.pad = pad
        self.norm = _norm(layer.normalization, cout)
        self.act = _activation(layer) if activation else nn.Identity()
        self.norm_first = not layer.norm_after_activation

    def forward(self, x):
        if self.reflect:
            x = F.pad(x, (self.pad,) * 4, mode="reflect")
        x = self.conv(x)
        if self.norm_first:
            return self.act(self.norm(x))
        return self.norm(self.act(x))


class ResidualBlock(nn.Module):
    def __init__(self, layer: LayerSpec):
        super().__init__()
        self.conv1 = ConvUnit(layer)
        self.conv2 = ConvUnit(layer, activation=False)

    def forward(self, x):
        return x + self.conv2(self.conv1(x))


class IdBlock(nn.Module):
    """Bottleneck identity block: 1x1 reduce, kxk, 1x1 expand, identity skip."""

    def __init__(self, layer: LayerSpec):
        super().__init__()
        mid = layer.bottleneck
        self.reduce = ConvUnit(layer, kernel=1, cout=mid)
        self.body = ConvUnit(layer, cin=mid, cout=mid)
        self.expand = ConvUnit(layer, kernel=1, cin=mid, activation=False)
        self.act = _activation(layer)

    def forward(self, x):
        return self.act(x + self.expand(self.body(self.reduce(x))))


class ConvBlock(nn.Module):
    """Bottleneck block whose kxk conv downsamples; projected 1x1 shortcut."""

    def __init__(self, layer: LayerSpec):
        super().__init__()
        mid = layer.bottleneck
        self.reduce = ConvUnit(layer, kernel=1, cout=mid, stride=1)
        self.body = ConvUnit(layer, cin=mid, cout=mid)
        self.expand = ConvUnit(layer, kernel=1, cin=mid, stride=1, activation=False)
        self.shortcut = ConvUnit(layer, kernel=1, activation=False)
        self.act = _activation(layer)

    def forward(self, x):
        return self.act(self.shortcut(x) + self.expand(self.body(self.reduce(x))))


def make_layer(layer: LayerSpec) -> nn.Module:
    if layer.kind in ("conv", "strided_conv"):
        return ConvUnit(layer)
    if layer.kind == "up_conv":
        return ConvUnit(layer, transposed=True)
    if layer.kind == "residual_block":
        return ResidualBlock(layer)
    if layer.kind == "id_block":
        return IdBlock(layer)
    if layer.kind == "conv_block":
        return ConvBlock(layer)
    raise SpecError(f"unknown layer kind {layer.kind!r}")


class SequentialNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.layers = nn.ModuleList(make_layer(layer) for layer in spec.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class RoiNet(nn.Module):
    """Downsampling blocks whose side projections are fused at full resolution."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.sides = nn.ModuleList()
        head = []
        current = None
        for layer in spec.layers:
            if layer.kind == "conv_block":
                current = nn.Sequential(make_layer(layer))
                self.blocks.append(current)
                self.sides.append(nn.Conv2d(layer.out_channels, spec.side_channels, 1, bias=True))
            elif layer.kind == "id_block":
                current.append(make_layer(layer))
            else:
                head.append(make_layer(layer))
        self.head = nn.Sequential(*head)

    def forward(self, x):
        size = x.shape[-2:]
        features = [x]
        h = x
        for block, side in zip(self.blocks, self.sides):
            h = block(h)
            features.append(F.interpolate(side(h), size=size, mode="bilinear", align_corners=False))
        return self.head(torch.cat(features, dim=1))


def build_module(spec: NetworkSpec) -> nn.Module:
    return RoiNet(spec) if spec.role == "roi" else SequentialNet(spec)


def param_layout(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (layer_id, shape) pairs induced by a spec, without allocating weights."""
    with torch.device("meta"):
        module = build_module(spec)
    return [(name, tuple(p.shape)) for name, p in module.named_parameters()]


class Model:
    """A network of one spec whose parameters come from a ParameterKey.

    The wrapped torch module is exposed as ``net`` for training; evaluation
    goes through :func:`forward`, which always runs in eval mode without
    gradient tracking.
    """

    def __init__(self, spec: NetworkSpec, net: nn.Module, key):
        self.spec = spec
        self.net = net
        self.key = key
        self._lock = threading.Lock()

    @property
    def parameters(self):
        return self.key

    def current_key(self, **provenance):
        """Snapshot the module's current weights as a new ParameterKey."""
        from .keystore import key_from_module

        return key_from_module(self.spec, self.net, **provenance)

    def refresh_key(self, **provenance):
        self.key = self.current_key(**provenance)
        return self.key

    @property
    def dtype(self):
        for p in self.net.parameters():
            return p.dtype
        return torch.float32

    def __repr__(self):
        return f"Model(role={self.spec.role}, spec={self.spec.name}, params={count_parameters(self)})"


def load_parameters(net: nn.Module, spec: NetworkSpec, key) -> None:
    """Copy key values into the module, checking the layout entry by entry."""
    expected = [(name, tuple(p.shape)) for name, p in net.named_parameters()]
    got = list(key.layout)
    for i, exp in enumerate(expected):
        if i >= len(got):
            raise LayoutError(f"key is missing layer {exp[0]} (has only {len(got)} entries)", exp[0])
        if (got[i][0], tuple(got[i][1])) != exp:
            raise LayoutError(f"layout mismatch at layer {exp[0]}: key has {got[i][0]} {tuple(got[i][1])}, "
                              f"spec expects {exp[1]}", exp[0])
    if len(got) > len(expected):
        raise LayoutError(f"key has extra layer {got[len(expected)][0]}", got[len(expected)][0])
    flat = torch.from_numpy(np.asarray(key.values, dtype=np.float32).copy())
    with torch.no_grad():
        offset = 0
        for _, p in net.named_parameters():
            n = p.numel()
            p.copy_(flat[offset:offset + n].view_as(p).to(p.dtype))
            offset += n


def _build(spec: NetworkSpec, init, role: str, dtype=torch.float32) -> Model:
    if spec.role != role:
        raise SpecError(f"expected a {role} spec, got role {spec.role!r}")
    net = build_module(spec).to(dtype)
    if init.architecture_digest != spec.digest():
        # report the first structural difference rather than just the digest
        load_parameters(net, spec, init)
        from .errors import DigestMismatch

        raise DigestMismatch("key was generated for a different architecture")
    load_parameters(net, spec, init)
    net.eval()
    return Model(spec, net, init)


def build_encryptor(spec: NetworkSpec, init, dtype=torch.float32) -> Model:
    return _build(spec, init, "encryptor", dtype)


def build_decryptor(spec: NetworkSpec, init, dtype=torch.float32) -> Model:
    return _build(spec, init, "decryptor", dtype)


def build_discriminator(spec: NetworkSpec, init, dtype=torch.float32) -> Model:
    return _build(spec, init, "discriminator", dtype)


def build_roi_net(spec: NetworkSpec, init, dtype=torch.float32) -> Model:
    return _build(spec, init, "roi", dtype)


def build_model(spec: NetworkSpec, init, dtype=torch.float32) -> Model:
    return _build(spec, init, spec.role, dtype)


def count_parameters(model) -> int:
    """Scalar trainable parameters of a Model, torch module or spec."""
    if isinstance(model, NetworkSpec):
        return sum(int(np.prod(shape)) for _, shape in param_layout(model))
    net = model.net if isinstance(model, Model) else model
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def analytic_parameter_count(spec: NetworkSpec) -> int:
    """Closed-form count (sum of k^2 * c_in * c_out plus biases/affines) from the layer list."""
    total = 0

    def conv(k, cin, cout, layer):
        n = k * k * cin * cout + (cout if layer.bias else 0)
        if layer.normalization == "batch_norm":
            n += 2 * cout
        return n

    for layer in spec.layers:
        k, cin, cout = layer.kernel_size, layer.in_channels, layer.out_channels
        if layer.kind in ("conv", "strided_conv", "up_conv"):
            total += conv(k, cin, cout, layer)
        elif layer.kind == "residual_block":
            total += 2 * conv(k, cin, cout, layer)
        elif layer.kind in ("id_block", "conv_block"):
            mid = layer.bottleneck
            total += conv(1, cin, mid, layer) + conv(k, mid, mid, layer) + conv(1, mid, cout, layer)
            if layer.kind == "conv_block":
                total += conv(1, cin, cout, layer)
    if spec.role == "roi":
        total += spec.block_count * spec.side_channels
        total += sum(layer.out_channels * spec.side_channels for layer in spec.layers if layer.kind == "conv_block")
    return total


def to_batch(images, channels: int, dtype=torch.float32) -> torch.Tensor:
    """Stack ImageTensors (or arrays) into an N x C x H x W tensor in [-1, 1]."""
    arrays = []
    for img in images:
        img = as_image(img)
        if img.range_tag != "unit":
            img = img.to_unit_signed()
        img = img.to_channels(channels) if img.channels != channels else img
        arrays.append(np.transpose(img.values, (2, 0, 1)))
    # the CPU convolution backward pass crashes on channels-last strides, so force a dense layout
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays))).to(dtype)


def _locate_nonfinite(model: Model, x: torch.Tensor) -> str:
    bad = []

    def hook(name):
        def fn(_module, _inp, out):
            if not bad and isinstance(out, torch.Tensor) and not torch.isfinite(out).all():
                bad.append(name)
        return fn

    handles = [m.register_forward_hook(hook(name)) for name, m in model.net.named_modules() if name]
    try:
        with torch.no_grad():
            model.net(x)
    finally:
        for h in handles:
            h.remove()
    return bad[0] if bad else "<output>"


def run(model: Model, x: torch.Tensor) -> torch.Tensor:
    """Evaluate the network on a prepared N x C x H x W batch (no grad, eval mode)."""
    spec = model.spec
    if x.ndim != 4 or x.shape[1] != spec.input_channels:
        raise ShapeError(f"expected N x {spec.input_channels} x H x W input, got {tuple(x.shape)}")
    m = spec.size_multiple()
    if x.shape[2] % m or x.shape[3] % m:
        raise ShapeError(f"spatial size {tuple(x.shape[2:])} must be a multiple of {m}")
    if m > 1 and min(x.shape[2:]) < 2 * m:
        # the deepest feature map needs more than one pixel for per-image normalization
        raise ShapeError(f"input must be at least {2 * m} pixels per side")
    with model._lock, torch.no_grad():
        was_training = model.net.training
        model.net.eval()
        try:
            out = model.net(x.to(model.dtype))
        finally:
            model.net.train(was_training)
    if not torch.isfinite(out).all():
        layer = _locate_nonfinite(model, x)
        raise NumericFailure(f"non-finite output produced at layer {layer}", layer)
    return out


def forward(model: Model, image) -> ImageTensor:
    """Evaluate one image.

    Encryptor/decryptor return an image in [-1, 1] with the input's spatial
    size; the discriminator returns its patch score map and the ROI network a
    full-resolution mask, both in [0, 1].
    """
    img = as_image(image)
    channels = model.spec.input_channels
    if img.channels != channels and not (img.channels == 1 and channels == 3):
        raise ShapeError(f"image has {img.channels} channels, model expects {channels}")
    out = run(model, to_batch([img], channels, model.dtype))[0]
    values = out.permute(1, 2, 0).cpu().numpy().astype(np.float32)
    if model.spec.role in ("encryptor", "decryptor"):
        return ImageTensor(np.clip(values, -1.0, 1.0), "unit_signed")
    return ImageTensor(np.clip(values, 0.0, 1.0), "unit")
