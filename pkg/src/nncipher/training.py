"""Losses, the gradient-descent contract and the training procedures.

Score convention: a discriminator output near 1 means "belongs to the
hidden-factor domain". The generator and discriminator are optimized
alternately (one discriminator update per generator/decryptor update); the
weighted sum of the three losses is tracked as a reporting quantity only.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .errors import ConfigError, LayoutError, ShapeError, TrainingDiverged
from .keystore import KeyPair, ParameterKey, init_random
from .networks import Model, build_discriminator, build_model, to_batch
from .specs import NetworkSpec, preset

log = logging.getLogger(__name__)

EPS = 1e-7
DEFAULT_WEIGHTS = (1.0, 1.0, 10.0)


# --------------------------------------------------------------------------
# losses

def _as_scores(scores):
    if isinstance(scores, torch.Tensor):
        t = scores
    else:
        t = torch.as_tensor(np.asarray(scores, dtype=np.float64))
    if t.numel() == 0:
        raise ValueError("empty score batch")
    return t.clamp(EPS, 1.0 - EPS)


def _out(value, like):
    return value if isinstance(like, torch.Tensor) else float(value)


def generator_loss(disc_scores_on_fakes, non_saturating: bool = False):
    """Mean log(1 - D(G(x))), or -mean log D(G(x)) with ``non_saturating``."""
    d = _as_scores(disc_scores_on_fakes)
    value = -torch.log(d).mean() if non_saturating else torch.log1p(-d).mean()
    return _out(value, disc_scores_on_fakes)


def discriminator_loss(disc_scores_on_reals, disc_scores_on_fakes):
    """-(mean log D(y) + mean log(1 - D(G(x)))); minimizing it maximizes accuracy."""
    dr = _as_scores(disc_scores_on_reals)
    df = _as_scores(disc_scores_on_fakes)
    value = -(torch.log(dr).mean() + torch.log1p(-df).mean())
    return _out(value, disc_scores_on_reals)


def _pair_tensors(a, b):
    ta = a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=np.float64))
    tb = b if isinstance(b, torch.Tensor) else torch.as_tensor(np.asarray(b, dtype=np.float64))
    if ta.shape != tb.shape:
        raise ShapeError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if ta.numel() == 0:
        raise ShapeError("empty batch")
    return ta, tb


def reconstruction_loss(reconstructed, original):
    """Mean absolute difference over pixels and batch."""
    a, b = _pair_tensors(reconstructed, original)
    return _out((a - b).abs().mean(), reconstructed)


def segmentation_loss(predicted, labels):
    """Mean squared error over all pixels."""
    a, b = _pair_tensors(predicted, labels)
    return _out(((a - b) ** 2).mean(), predicted)


def total_loss(l_g, l_d, l_r, weights=DEFAULT_WEIGHTS) -> float:
    values = [float(v) for v in (l_g, l_d, l_r)]
    w = [float(v) for v in weights]
    if len(w) != 3:
        raise ValueError("weights must be a (w_G, w_D, w_R) triple")
    if not all(math.isfinite(v) for v in values + w):
        raise ValueError(f"non-finite loss input {values} / weights {w}")
    return w[0] * values[0] + w[1] * values[1] + w[2] * values[2]


# --------------------------------------------------------------------------
# gradient descent

def gradient_step(model: Model, loss_gradient, learning_rate: float) -> Model:
    """theta <- theta - learning_rate * gradient, for every parameter of ``model``.

    ``loss_gradient`` is a flat array in key layout order, a ParameterKey-like
    object with the same layout, or a list of per-layer arrays. Returns a new
    Model; the input model is untouched.
    """
    key = model.key
    if isinstance(loss_gradient, ParameterKey):
        if loss_gradient.layout != key.layout:
            raise LayoutError("gradient layout does not match parameter layout")
        g = loss_gradient.values.astype(np.float64)
    elif isinstance(loss_gradient, (list, tuple)):
        if len(loss_gradient) != len(key.layout):
            raise LayoutError(f"expected {len(key.layout)} gradient tensors, got {len(loss_gradient)}")
        for (name, shape), arr in zip(key.layout, loss_gradient):
            if tuple(np.shape(arr)) != tuple(shape):
                raise LayoutError(f"gradient for {name} has shape {np.shape(arr)}, expected {shape}", name)
        g = np.concatenate([np.asarray(a, np.float64).ravel() for a in loss_gradient]) if loss_gradient else np.zeros(0)
    else:
        g = np.asarray(loss_gradient, dtype=np.float64).ravel()
    if g.size != len(key):
        raise LayoutError(f"gradient has {g.size} entries, parameters have {len(key)}")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    values = (key.values.astype(np.float64) - learning_rate * g).astype(np.float32)
    new_key = key.with_values(values)
    return build_model(model.spec, new_key, dtype=model.dtype)


def descend_(parameters, learning_rate: float) -> None:
    """In-place variant of :func:`gradient_step` on live torch parameters."""
    with torch.no_grad():
        for p in parameters:
            if p.grad is None:
                raise LayoutError("parameter received no gradient")
            if not torch.isfinite(p.grad).all():
                raise ValueError("non-finite gradient")
            p.sub_(learning_rate * p.grad)


def flat_gradient(model: Model, loss_fn) -> np.ndarray:
    """Gradient of ``loss_fn(net)`` w.r.t. every parameter, flattened in key order."""
    net = model.net
    net.zero_grad(set_to_none=True)
    loss = loss_fn(net)
    loss.backward()
    grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in net.parameters()]
    out = torch.cat([g.reshape(-1) for g in grads]).detach().double().numpy() if grads else np.zeros(0)
    net.zero_grad(set_to_none=True)
    return out


# --------------------------------------------------------------------------
# configuration and trace

@dataclass
class TrainingConfig:
    learning_rate: float = 2e-4
    epochs: int = 10
    batch_size: int = 4
    loss_weights: tuple = DEFAULT_WEIGHTS
    rng_seed: int = 0
    stability_window: int = 10
    stability_tolerance: float = 0.01
    # "sgd" is plain theta <- theta - lr * grad; "adam" is the opt-in accelerator
    optimizer: str = "sgd"
    adam_betas: tuple = (0.5, 0.999)
    generator_loss: str = "saturating"
    quantization_noise: bool = True
    holdout: int = 8
    # discriminator step size; None reuses learning_rate
    disc_learning_rate: float | None = None

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self):
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be a positive number, got {self.learning_rate!r}", "learning_rate")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs!r}", "epochs")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size!r}", "batch_size")
        if len(self.loss_weights) != 3 or not all(math.isfinite(w) and w >= 0 for w in self.loss_weights):
            raise ConfigError(f"loss_weights must be three finite non-negative reals, got {self.loss_weights!r}",
                              "loss_weights")
        if self.stability_window < 1:
            raise ConfigError("stability_window must be >= 1", "stability_window")
        if not self.stability_tolerance >= 0:
            raise ConfigError("stability_tolerance must be >= 0", "stability_tolerance")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}", "optimizer")
        if self.generator_loss not in ("saturating", "non_saturating"):
            raise ConfigError(f"generator_loss must be 'saturating' or 'non_saturating', got {self.generator_loss!r}",
                              "generator_loss")
        if self.disc_learning_rate is not None and not (self.disc_learning_rate > 0
                                                        and math.isfinite(self.disc_learning_rate)):
            raise ConfigError(f"disc_learning_rate must be positive, got {self.disc_learning_rate!r}",
                              "disc_learning_rate")
        if self.holdout < 0:
            raise ConfigError("holdout must be >= 0", "holdout")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            name = sorted(unknown)[0]
            raise ConfigError(f"unknown config field {name!r}", name)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def desk_config(seed: int = 0, **overrides) -> TrainingConfig:
    """Settings used for desk-scale key generation (64 x 64 images)."""
    base = dict(learning_rate=1e-3, disc_learning_rate=2e-4, epochs=14, batch_size=4, rng_seed=seed, optimizer="adam",
                generator_loss="non_saturating", stability_window=5, stability_tolerance=0.0)
    base.update(overrides)
    return TrainingConfig(**base)


def roi_desk_config(seed: int = 0, **overrides) -> TrainingConfig:
    """Settings used to fit the desk-scale ROI segmenter."""
    base = dict(learning_rate=1e-3, epochs=30, batch_size=8, rng_seed=seed, optimizer="adam",
                stability_tolerance=0.0)
    base.update(overrides)
    return TrainingConfig(**base)


def load_config(path) -> TrainingConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    data = data.get("training", data)
    return TrainingConfig.from_dict(data)


@dataclass
class EpochRecord:
    epoch: int
    l_total: float
    seconds: float
    l_g: float | None = None
    l_d: float | None = None
    l_r: float | None = None
    l_s: float | None = None
    disc_accuracy: float | None = None
    d_updates: int = 0
    g_updates: int = 0


@dataclass
class TrainingTrace:
    kind: str = "encdec"
    records: list = field(default_factory=list)
    stopped: str = "not started"
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def totals(self):
        return [r.l_total for r in self.records]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "stopped": self.stopped, "config": self.config,
                "records": [asdict(r) for r in self.records]}

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    def write_report(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d) -> "TrainingTrace":
        return cls(d["kind"], [EpochRecord(**r) for r in d["records"]], d["stopped"], d.get("config", {}))


def is_stable(totals, window: int, tolerance: float) -> bool:
    """Relative change between the last two windowed means is below ``tolerance``."""
    if len(totals) < 2 * window:
        return False
    recent = float(np.mean(totals[-window:]))
    before = float(np.mean(totals[-2 * window:-window]))
    return abs(recent - before) <= tolerance * max(abs(before), 1e-12)


# --------------------------------------------------------------------------
# training procedures

def _seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n)]


def _make_optimizer(params, cfg: TrainingConfig, lr=None):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr or cfg.learning_rate, betas=cfg.adam_betas)
    return None


def _step(optimizer, params, cfg, loss, trace, where, lr=None):
    for p in params:
        p.grad = None
    loss.backward()
    if not all(torch.isfinite(p.grad).all() for p in params if p.grad is not None):
        trace.stopped = "diverged"
        raise TrainingDiverged(f"non-finite gradient at {where}", trace)
    if optimizer is None:
        descend_(params, lr or cfg.learning_rate)
    else:
        optimizer.step()


def _finite(*values):
    return all(math.isfinite(float(v)) for v in values)


def _split_holdout(n: int, holdout: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    h = min(holdout, max(0, n - 1))
    return perm[h:], perm[:h]


def train_encdec(plain_dataset, hidden_factor_dataset, cfg: TrainingConfig, spec: NetworkSpec | None = None,
                 disc_spec: NetworkSpec | None = None, run_id: str | None = None, progress=None):
    """Alternating adversarial training of encryptor G, decryptor F and discriminator D.

    Per batch: one D update on hidden-factor images vs G outputs, then one
    joint G/F update on ``w_G * generator_loss + w_R * reconstruction_loss``.
    Stops after ``cfg.epochs`` or once the windowed total loss is stable.
    Returns the KeyPair (G and F parameters) and the per-epoch trace.
    """
    spec = spec or preset("encryptor", "desk")
    if spec.role != "encryptor":
        spec = spec.with_role("encryptor")
    dec_spec = spec.with_role("decryptor")
    disc_spec = disc_spec or preset("discriminator", "desk")
    plain = _prepare(plain_dataset, spec.input_channels, "plain_dataset")
    hidden = _prepare(hidden_factor_dataset, spec.input_channels, "hidden_factor_dataset")
    if plain.shape[2:] != hidden.shape[2:]:
        raise ShapeError(f"plaintext size {tuple(plain.shape[2:])} != hidden-factor size {tuple(hidden.shape[2:])}")
    _check_size(spec, plain)

    g_seed, f_seed, d_seed, data_seed = _seeds(cfg.rng_seed, 4)
    run_id = run_id or f"encdec-seed{cfg.rng_seed}"
    g_init, f_init = init_random(spec, g_seed), init_random(dec_spec, f_seed)
    trace = TrainingTrace("encdec", config=cfg.to_dict())
    if cfg.epochs == 0:
        trace.stopped = "epochs"
        return KeyPair(g_init, f_init), trace

    torch.manual_seed(data_seed)
    gen = torch.Generator().manual_seed(data_seed)
    G = build_model(spec, g_init)
    Fd = build_model(dec_spec, f_init)
    D = build_discriminator(disc_spec, init_random(disc_spec, d_seed))
    train_idx, hold_idx = _split_holdout(len(plain), cfg.holdout, gen)
    h_train_idx, h_hold_idx = _split_holdout(len(hidden), cfg.holdout, gen)

    gf_params = list(G.net.parameters()) + list(Fd.net.parameters())
    d_params = list(D.net.parameters())
    d_lr = cfg.disc_learning_rate or cfg.learning_rate
    opt_gf, opt_d = _make_optimizer(gf_params, cfg), _make_optimizer(d_params, cfg, d_lr)
    w_g, w_d, w_r = cfg.loss_weights
    non_sat = cfg.generator_loss == "non_saturating"
    bs = cfg.batch_size

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        G.net.train(), Fd.net.train(), D.net.train()
        order = train_idx[torch.randperm(len(train_idx), generator=gen)]
        sums = np.zeros(3)
        n_batches = d_updates = g_updates = 0
        for start in range(0, len(order), bs):
            x = plain[order[start:start + bs]]
            pick = torch.randint(0, len(h_train_idx), (len(x),), generator=gen)
            y = hidden[h_train_idx[pick]]

            fake = G.net(x)
            l_d = discriminator_loss(D.net(y), D.net(fake.detach()))
            _step(opt_d, d_params, cfg, w_d * l_d, trace, f"epoch {epoch} batch {n_batches}", d_lr)
            d_updates += 1

            l_g = generator_loss(D.net(fake), non_saturating=non_sat)
            carrier = fake
            if cfg.quantization_noise:
                carrier = fake + (torch.rand(fake.shape, generator=gen) - 0.5) * (2.0 / 255.0)
            l_r = reconstruction_loss(Fd.net(carrier), x)
            _step(opt_gf, gf_params, cfg, w_g * l_g + w_r * l_r, trace, f"epoch {epoch} batch {n_batches}")
            g_updates += 1

            vals = (l_g.item(), l_d.item(), l_r.item())
            if not _finite(*vals):
                trace.stopped = "diverged"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {n_batches}: {vals}", trace)
            sums += vals
            n_batches += 1
        mean_g, mean_d, mean_r = sums / max(n_batches, 1)
        acc = _disc_accuracy(G, D, plain[hold_idx], hidden[h_hold_idx])
        rec = EpochRecord(epoch=epoch, l_total=total_loss(mean_g, mean_d, mean_r, cfg.loss_weights),
                          seconds=time.perf_counter() - t0, l_g=mean_g, l_d=mean_d, l_r=mean_r,
                          disc_accuracy=acc, d_updates=d_updates, g_updates=g_updates)
        trace.records.append(rec)
        log.info("epoch %d  L_G=%.4f L_D=%.4f L_R=%.4f total=%.4f acc=%s (%.1fs)", epoch, mean_g, mean_d,
                 mean_r, rec.l_total, "n/a" if acc is None else f"{acc:.3f}", rec.seconds)
        if progress is not None:
            progress(rec)
        if cfg.stability_tolerance > 0 and is_stable(trace.totals(), cfg.stability_window, cfg.stability_tolerance):
            trace.stopped = "stable"
            break
    else:
        trace.stopped = "epochs"

    G.net.eval(), Fd.net.eval()
    enc = G.refresh_key(rng_seed=cfg.rng_seed, run_id=run_id)
    dec = Fd.refresh_key(rng_seed=cfg.rng_seed, run_id=run_id)
    return KeyPair(enc, dec), trace


def _disc_accuracy(G: Model, D: Model, plain_hold, hidden_hold):
    if len(plain_hold) == 0 or len(hidden_hold) == 0:
        return None
    n = min(len(plain_hold), len(hidden_hold))
    with torch.no_grad():
        G.net.eval()
        fakes = G.net(plain_hold[:n])
        G.net.train()
        real_scores = D.net(hidden_hold[:n]).mean(dim=(1, 2, 3))
        fake_scores = D.net(fakes).mean(dim=(1, 2, 3))
    correct = (real_scores > 0.5).float().sum() + (fake_scores <= 0.5).float().sum()
    return float(correct / (2 * n))


def _check_size(spec: NetworkSpec, images: torch.Tensor) -> None:
    m = spec.size_multiple()
    h, w = images.shape[2:]
    if h % m or w % m:
        raise ShapeError(f"image size {(h, w)} incompatible with stride chain (multiple of {m})")
    if m > 1 and min(h, w) < 2 * m:
        raise ShapeError(f"images must be at least {2 * m} pixels per side for this spec")


def _prepare(dataset, channels, name) -> torch.Tensor:
    if isinstance(dataset, torch.Tensor):
        t = dataset.float().contiguous()
        if t.ndim != 4:
            raise ShapeError(f"{name}: expected N x C x H x W tensor")
    else:
        items = list(dataset)
        if not items:
            raise ValueError(f"{name} is empty")
        t = to_batch(items, channels)
    if len(t) == 0:
        raise ValueError(f"{name} is empty")
    return t


def _prepare_masks(masks, n) -> torch.Tensor:
    arrays = []
    for m in masks:
        a = np.asarray(m.values if hasattr(m, "values") else m, dtype=np.float32)
        if hasattr(m, "range_tag") and m.range_tag == "byte":
            a = a / 255.0
        elif a.max(initial=0) > 1.0:
            a = a / 255.0
        arrays.append(np.squeeze(a)[None])
    if len(arrays) != n:
        raise ShapeError(f"{n} images but {len(arrays)} mask labels")
    return torch.from_numpy(np.stack(arrays))


def train_roi(cipher_dataset, mask_labels, cfg: TrainingConfig, spec: NetworkSpec | None = None,
              run_id: str | None = None, progress=None):
    """Fit the ROI segmenter on (ciphertext, mask) pairs by minimizing the pixel MSE."""
    spec = spec or preset("roi", "desk")
    images = _prepare(cipher_dataset, spec.input_channels, "cipher_dataset")
    masks = _prepare_masks(mask_labels, len(images))
    if masks.shape[2:] != images.shape[2:]:
        raise ShapeError(f"mask size {tuple(masks.shape[2:])} != image size {tuple(images.shape[2:])}")
    _check_size(spec, images)
    init_seed, data_seed = _seeds(cfg.rng_seed, 2)
    model = build_model(spec, init_random(spec, init_seed))
    trace = TrainingTrace("roi", config=cfg.to_dict())
    if cfg.epochs == 0:
        trace.stopped = "epochs"
        return model, trace
    torch.manual_seed(data_seed)
    gen = torch.Generator().manual_seed(data_seed)
    params = list(model.net.parameters())
    opt = _make_optimizer(params, cfg)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.net.train()
        order = torch.randperm(len(images), generator=gen)
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = segmentation_loss(model.net(images[idx]), masks[idx])
            _step(opt, params, cfg, loss, trace, f"epoch {epoch} batch {n}")
            if not _finite(loss.item()):
                trace.stopped = "diverged"
                raise TrainingDiverged(f"non-finite segmentation loss at epoch {epoch}", trace)
            total += loss.item()
            n += 1
        mean = total / max(n, 1)
        rec = EpochRecord(epoch=epoch, l_total=mean, l_s=mean, seconds=time.perf_counter() - t0, g_updates=n)
        trace.records.append(rec)
        log.info("roi epoch %d  L_S=%.5f (%.1fs)", epoch, mean, rec.seconds)
        if progress is not None:
            progress(rec)
        if cfg.stability_tolerance > 0 and is_stable(trace.totals(), cfg.stability_window, cfg.stability_tolerance):
            trace.stopped = "stable"
            break
    else:
        trace.stopped = "epochs"
    model.net.eval()
    model.refresh_key(rng_seed=cfg.rng_seed, run_id=run_id or f"roi-seed{cfg.rng_seed}")
    return model, trace
