import json
import math

import numpy as np
import pytest
import torch

from nncipher.errors import ConfigError, LayoutError, ShapeError, TrainingDiverged
from nncipher.keystore import init_random, key_fingerprint
from nncipher.networks import build_model, param_layout
from nncipher.specs import LayerSpec, NetworkSpec
from nncipher.training import (EpochRecord, TrainingConfig, TrainingTrace, desk_config, discriminator_loss,
                               flat_gradient, generator_loss, gradient_step, is_stable, load_config,
                               reconstruction_loss, segmentation_loss, total_loss, train_encdec, train_roi)
from micro_models import micro_net, micro_specs, parameter_count, weighted_sum_loss
from oracles import fd_gradient_errors, fd_mismatches

LN2 = math.log(2.0)


# ---------------------------------------------------------------- losses

def test_generator_loss_examples():
    assert generator_loss([0.5, 0.5]) == pytest.approx(math.log(0.5), abs=1e-9)
    # a score of 0 is clamped to 1e-7, so the value is log(1 - 1e-7) rather than exactly 0
    assert generator_loss([0.0, 0.0]) == pytest.approx(math.log1p(-1e-7), abs=1e-15)
    assert generator_loss([0.25, 0.75]) == pytest.approx((math.log(0.75) + math.log(0.25)) / 2, abs=1e-9)


def test_generator_loss_clamps_and_rejects_empty():
    assert math.isfinite(generator_loss([1.0]))
    assert generator_loss([1.0]) == pytest.approx(math.log(1e-7), rel=1e-6)
    with pytest.raises(ValueError):
        generator_loss([])


def test_non_saturating_generator_loss():
    assert generator_loss([0.5], non_saturating=True) == pytest.approx(LN2, abs=1e-9)


def test_discriminator_loss_examples():
    assert discriminator_loss([1.0, 1.0], [0.0, 0.0]) == pytest.approx(0.0, abs=1e-6)
    assert discriminator_loss([0.5] * 4, [0.5] * 4) == pytest.approx(2 * LN2, abs=1e-9)
    assert discriminator_loss([0.9], [0.2]) == pytest.approx(-(math.log(0.9) + math.log(0.8)), abs=1e-9)
    with pytest.raises(ValueError):
        discriminator_loss([], [0.5])


def test_reconstruction_loss_examples():
    x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 4, 4))
    assert reconstruction_loss(x, x) == 0.0
    assert reconstruction_loss(x + 0.1, x) == pytest.approx(0.1, abs=1e-9)
    assert reconstruction_loss([[0, 1], [1, 0]], [[1, 1], [0, 0]]) == pytest.approx(0.5, abs=1e-9)
    with pytest.raises(ShapeError):
        reconstruction_loss(x, x[:1])


def test_segmentation_loss_examples():
    assert segmentation_loss([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert segmentation_loss([0, 0], [1, 0]) == pytest.approx(0.5, abs=1e-9)
    assert segmentation_loss([0.5, 1, 0.5], [1, 1, 0]) == pytest.approx(0.5 / 3, abs=1e-9)
    with pytest.raises(ShapeError):
        segmentation_loss([0.1], [0.1, 0.2])


def test_losses_nonnegative_and_zero_iff_equal(rng):
    for _ in range(20):
        a, b = rng.random((3, 5)), rng.random((3, 5))
        assert reconstruction_loss(a, b) > 0 and segmentation_loss(a, b) > 0


def test_total_loss_examples():
    assert total_loss(1, 2, 3, (1, 1, 1)) == 6
    assert total_loss(0, 0, 0) == 0
    assert total_loss(-0.69, 1.39, 0.05) == pytest.approx(1.20, abs=1e-9)
    with pytest.raises(ValueError):
        total_loss(float("nan"), 0, 0)


def test_tensor_losses_keep_graph():
    s = torch.full((4,), 0.3, requires_grad=True)
    out = generator_loss(s)
    assert isinstance(out, torch.Tensor)
    out.backward()
    assert s.grad is not None


# ---------------------------------------------------------------- gradient descent

def _one_param_model(value):
    spec = NetworkSpec("encryptor", 1, (LayerSpec("conv", 1, 1, 1, activation="none"),))
    from nncipher.keystore import ParameterKey
    return build_model(spec, ParameterKey(param_layout(spec), np.array([value], np.float32), spec.digest()))


def test_gradient_step_scalar():
    m = _one_param_model(1.0)
    out = gradient_step(m, np.array([0.5]), 0.1)
    assert out.key.values[0] == pytest.approx(0.95, abs=1e-7)
    assert m.key.values[0] == 1.0


def test_gradient_step_zero_gradient_is_fixed_point(desk_enc):
    m = build_model(desk_enc, init_random(desk_enc, 0))
    out = gradient_step(m, np.zeros(len(m.key)), 0.5)
    assert np.array_equal(out.key.values, m.key.values)


def test_gradient_step_visits_every_parameter(desk_enc):
    m = build_model(desk_enc, init_random(desk_enc, 0))
    out = gradient_step(m, np.ones(len(m.key)), 1e-3)
    assert np.all(out.key.values != m.key.values)


def test_gradient_step_errors(desk_enc):
    m = build_model(desk_enc, init_random(desk_enc, 0))
    with pytest.raises(LayoutError):
        gradient_step(m, np.zeros(len(m.key) - 1), 0.1)
    with pytest.raises(LayoutError):
        gradient_step(m, [np.zeros(3)], 0.1)
    bad = np.zeros(len(m.key))
    bad[5] = np.nan
    with pytest.raises(ValueError):
        gradient_step(m, bad, 0.1)


def test_squared_norm_gradient_matches_finite_differences():
    spec = micro_specs()["residual_block"]
    net = micro_net(spec)
    rows = fd_gradient_errors(net, lambda n: sum((p ** 2).sum() for p in n.parameters()))
    assert not fd_mismatches(rows)
    for _, _, analytic, _ in rows[:5]:
        assert analytic != 0


def test_flat_gradient_is_twice_theta():
    spec = micro_specs()["conv_reflect_relu"]
    m = build_model(spec, init_random(spec, 3))
    g = flat_gradient(m, lambda n: sum((p ** 2).sum() for p in n.parameters()))
    np.testing.assert_allclose(g, 2 * m.key.values.astype(np.float64), rtol=1e-6)


@pytest.mark.parametrize("name", sorted(micro_specs()))
def test_layer_gradients_match_finite_differences(name):
    spec = micro_specs()[name]
    net = micro_net(spec)
    assert parameter_count(net) <= 200
    rows = fd_gradient_errors(net, weighted_sum_loss(spec))
    assert rows
    assert fd_mismatches(rows) == []


# ---------------------------------------------------------------- configuration

@pytest.mark.parametrize("field,value", [("learning_rate", 0), ("learning_rate", -1e-3), ("batch_size", 0),
                                         ("epochs", -1), ("loss_weights", (1, float("inf"), 1)),
                                         ("loss_weights", (1, 1)), ("optimizer", "rmsprop"),
                                         ("generator_loss", "hinge"), ("disc_learning_rate", 0.0)])
def test_config_validation_names_field(field, value):
    with pytest.raises(ConfigError) as exc:
        TrainingConfig(**{field: value})
    assert exc.value.field == field


def test_config_round_trip_and_unknown_field(tmp_path):
    cfg = desk_config(3)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError) as exc:
        TrainingConfig.from_dict({"learning_rat": 0.1})
    assert exc.value.field == "learning_rat"
    p = tmp_path / "c.yaml"
    p.write_text("training:\n  learning_rate: 0.01\n  epochs: 3\n")
    loaded = load_config(p)
    assert loaded.learning_rate == 0.01 and loaded.epochs == 3
    p.write_text("[1, 2")
    with pytest.raises(ConfigError):
        load_config(p)


def test_is_stable():
    assert not is_stable([1.0] * 5, 3, 0.01)
    assert is_stable([1.0] * 6, 3, 0.01)
    assert not is_stable([3, 3, 3, 1, 1, 1], 3, 0.01)
    assert is_stable([1.0, 1.0, 1.0, 1.001, 1.0, 1.0], 3, 0.01)


def test_trace_serialization(tmp_path):
    t = TrainingTrace("encdec", [EpochRecord(0, 1.5, 0.1, l_g=0.5, l_d=1.0, l_r=0.0, disc_accuracy=0.5)], "epochs")
    t.write_log(tmp_path / "log.jsonl")
    t.write_report(tmp_path / "r.json")
    back = TrainingTrace.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back.records == t.records and back.stopped == "epochs"


# ---------------------------------------------------------------- training procedures

def _tiny_data(n=8, size=16, seed=0):
    rng = np.random.default_rng(seed)
    plain = [rng.integers(0, 256, (size, size, 1)).astype(np.uint8) for _ in range(n)]
    hidden = [rng.integers(0, 256, (size, size, 3)).astype(np.uint8) for _ in range(n)]
    return plain, hidden


def _tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=4, holdout=2, optimizer="adam", learning_rate=1e-3, rng_seed=5)
    base.update(kw)
    return TrainingConfig(**base)


def test_epochs_zero_returns_initialization(desk_enc):
    plain, hidden = _tiny_data()
    pair, trace = train_encdec(plain, hidden, _tiny_cfg(epochs=0), desk_enc)
    pair2, _ = train_encdec(plain, hidden, _tiny_cfg(epochs=0), desk_enc)
    assert len(trace) == 0
    assert np.array_equal(pair.encryption_key.values, pair2.encryption_key.values)
    assert key_fingerprint(pair.encryption_key) != key_fingerprint(pair.decryption_key)


def test_train_encdec_deterministic_and_fair(desk_enc):
    plain, hidden = _tiny_data()
    a, ta = train_encdec(plain, hidden, _tiny_cfg(), desk_enc)
    b, tb = train_encdec(plain, hidden, _tiny_cfg(), desk_enc)
    c, _ = train_encdec(plain, hidden, _tiny_cfg(rng_seed=6), desk_enc)
    assert np.array_equal(a.encryption_key.values, b.encryption_key.values)
    assert np.array_equal(a.decryption_key.values, b.decryption_key.values)
    assert key_fingerprint(a.encryption_key) != key_fingerprint(c.encryption_key)
    assert len(ta) == 2 and ta.stopped == "epochs"
    for rec in ta.records:
        assert rec.d_updates == rec.g_updates > 0
        assert all(math.isfinite(v) for v in (rec.l_g, rec.l_d, rec.l_r, rec.l_total))
        assert 0 <= rec.disc_accuracy <= 1
    assert a.encryption_key.provenance.rng_seed == 5


def test_train_encdec_sgd_changes_every_tensor(desk_enc):
    plain, hidden = _tiny_data()
    init, _ = train_encdec(plain, hidden, _tiny_cfg(epochs=0, optimizer="sgd", learning_rate=0.05), desk_enc)
    pair, _ = train_encdec(plain, hidden, _tiny_cfg(epochs=1, optimizer="sgd", learning_rate=0.05), desk_enc)
    for (name, _), a, b in zip(init.encryption_key.layout, init.encryption_key.tensors(),
                               pair.encryption_key.tensors()):
        assert not np.array_equal(a, b), name


def test_train_encdec_stops_when_stable(desk_enc):
    plain, hidden = _tiny_data()
    _, trace = train_encdec(plain, hidden, _tiny_cfg(epochs=50, stability_window=1, stability_tolerance=10.0),
                            desk_enc)
    assert trace.stopped == "stable" and len(trace) == 2


def test_train_encdec_divergence_carries_trace(desk_enc):
    plain, hidden = _tiny_data()
    bad = torch.full((8, 3, 16, 16), float("nan"))
    with pytest.raises(TrainingDiverged) as exc:
        train_encdec(bad, hidden, _tiny_cfg(), desk_enc)
    assert exc.value.trace.stopped == "diverged"


def test_train_encdec_rejects_size_mismatch(desk_enc):
    plain, _ = _tiny_data()
    _, hidden = _tiny_data(size=32)
    with pytest.raises(ShapeError):
        train_encdec(plain, hidden, _tiny_cfg(), desk_enc)
    with pytest.raises(ShapeError):
        train_encdec([p[:10, :10] for p in plain], [h[:10, :10] for h in hidden], _tiny_cfg(), desk_enc)


def test_train_roi_constant_zero_labels():
    rng = np.random.default_rng(0)
    images = [rng.integers(0, 256, (64, 64, 3)).astype(np.uint8) for _ in range(8)]
    masks = [np.zeros((64, 64), bool) for _ in range(8)]
    cfg = TrainingConfig(epochs=25, batch_size=4, optimizer="adam", learning_rate=1e-2, rng_seed=0)
    model, trace = train_roi(images, masks, cfg)
    assert trace.records[-1].l_s < 0.2 * trace.records[0].l_s
    assert trace.records[-1].l_s < 1e-3
    from nncipher.networks import forward
    pred = forward(model, images[0])
    assert float(np.max(pred.values)) < 0.1


def test_train_roi_requires_one_mask_per_image():
    rng = np.random.default_rng(0)
    images = [rng.integers(0, 256, (64, 64, 3)).astype(np.uint8) for _ in range(4)]
    with pytest.raises(ShapeError):
        train_roi(images, [np.zeros((64, 64))] * 3, TrainingConfig(epochs=1))
    with pytest.raises(ShapeError):
        train_roi(images, [np.zeros((16, 16))] * 4, TrainingConfig(epochs=1))


def test_train_roi_rejects_images_too_small_for_the_stride_chain():
    images = [np.zeros((32, 32, 3), np.uint8)] * 2
    with pytest.raises(ShapeError):
        train_roi(images, [np.zeros((32, 32))] * 2, TrainingConfig(epochs=1))
