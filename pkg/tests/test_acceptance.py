"""Desk-scale acceptance criteria.

Trainings are cached under ``tests/.cache`` (override with NNCIPHER_TEST_CACHE)
keyed by configuration, data and package source, so reruns reuse keys produced
by identical code. Set NNCIPHER_RETRAIN=1 to ignore the cache. An uncached run
trains seven encryptor/decryptor pairs and three ROI models (about 40 minutes
on one CPU core).
"""
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import nncipher
from nncipher import attacks
from nncipher.attacks import Party, dataset_id
from nncipher.cipher import decrypt, encrypt, encrypt_batch
from nncipher.cli import main as cli_main
from nncipher.data import HiddenFactorSpec, desk_dataset, generate_hidden_factors
from nncipher.keystore import KeyPair, load_key, save_key
from nncipher.metrics import dice, entropy, evaluate_pair, histogram, npcr, psnr, ssim
from nncipher.networks import build_roi_net
from nncipher.roi import compare_plain_vs_cipher_segmentation, mean_dice, segment_batch
from nncipher.specs import preset
from nncipher.training import (desk_config, discriminator_loss, generator_loss, reconstruction_loss,
                               roi_desk_config, segmentation_loss, train_encdec, train_roi)
from micro_models import micro_net, micro_specs, parameter_count, weighted_sum_loss
from oracles import (fd_gradient_errors, fd_mismatches, o_dice, o_entropy, o_histogram, o_npcr, o_psnr, o_ssim)

CACHE = Path(os.environ.get("NNCIPHER_TEST_CACHE", Path(__file__).parent / ".cache"))
RETRAIN = os.environ.get("NNCIPHER_RETRAIN") == "1"
SOURCES = ("training.py", "networks.py", "specs.py", "keystore.py", "data.py", "images.py")
VICTIM_SEED = 0
N_RETRAINS = 4

criterion = pytest.mark.criterion


def _source_hash():
    root = Path(nncipher.__file__).parent
    h = hashlib.sha256()
    for name in SOURCES:
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


def _cache_dir(kind, **parts):
    parts["source"] = _source_hash()
    digest = hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:20]
    return CACHE / f"{kind}-{digest}"


def _mask_id(masks):
    h = hashlib.sha256()
    for m in masks:
        h.update(np.packbits(np.asarray(m) >= 0.5).tobytes())
    return h.hexdigest()[:16]


def cached_encdec(plain, hidden, cfg, spec):
    d = _cache_dir("encdec", cfg=cfg.to_dict(), spec=spec.digest(), plain=dataset_id(plain),
                   hidden=dataset_id(hidden))
    if not RETRAIN and (d / "dec.key").exists():
        return KeyPair(load_key(d / "enc.key"), load_key(d / "dec.key")), None
    pair, trace = train_encdec(plain, hidden, cfg, spec)
    d.mkdir(parents=True, exist_ok=True)
    trace.write_report(d / "trace.json")
    save_key(pair.encryption_key, d / "enc.key")
    save_key(pair.decryption_key, d / "dec.key")
    return pair, trace


def cached_roi(images, masks, cfg, spec):
    spec = spec or preset("roi", "desk")
    d = _cache_dir("roi", cfg=cfg.to_dict(), spec=spec.digest(), images=dataset_id(images), masks=_mask_id(masks))
    if not RETRAIN and (d / "roi.key").exists():
        return build_roi_net(spec, load_key(d / "roi.key")), None
    model, trace = train_roi(images, masks, cfg, spec)
    d.mkdir(parents=True, exist_ok=True)
    trace.write_report(d / "trace.json")
    save_key(model.parameters, d / "roi.key")
    return model, trace


def detail(record, text):
    record("detail", text)
    print(text)


# --------------------------------------------------------------------------
# shared desk artifacts

@pytest.fixture(scope="module", autouse=True)
def _threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="module")
def desk():
    return desk_dataset(0)


@pytest.fixture(scope="module")
def spec():
    return preset("encryptor", "desk")


@pytest.fixture(scope="module")
def victim(desk, spec):
    cfg = desk_config(VICTIM_SEED)
    pair, _ = cached_encdec(desk.train_images, desk.hidden_factors, cfg, spec)
    return Party(f"key-{VICTIM_SEED}", pair, spec, VICTIM_SEED, dataset_id(desk.hidden_factors))


@pytest.fixture(scope="module")
def victim_ciphers(desk, victim, spec):
    return [encrypt(x, victim.keypair.encryption_key, spec) for x in desk.test_images]


@pytest.fixture(scope="module")
def full_leak(desk, victim, spec):
    return attacks.run_full_leak(desk_config(VICTIM_SEED), N_RETRAINS, desk.train_images, desk.hidden_factors,
                                 desk.test_images, spec, train_fn=cached_encdec, parties=[victim])


# --------------------------------------------------------------------------
# 1-3: properties

@criterion(1, "metric-oracle equivalence")
def test_criterion_01_metric_oracles(record_property):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    n = 1000
    for i in range(n):
        h, w = rng.integers(2, 17, 2)
        c = int(rng.choice([1, 3]))
        a = rng.integers(0, 256, (h, w, c)).astype(np.uint8)
        b = rng.integers(0, 256, (h, w, c)).astype(np.uint8)
        if i % 5 == 0:
            b = a.copy()
            b[rng.random(a.shape) < 0.1] = 7
        assert histogram(a).tolist() == o_histogram(a)
        # equal up to floating-point summation order
        assert math.isclose(entropy(a), o_entropy(a), rel_tol=0, abs_tol=1e-12)
        assert npcr(a, b) == o_npcr(a, b)
        expected = o_psnr(a, b)
        got = psnr(a, b)
        assert (math.isinf(got) and math.isinf(expected)) or math.isclose(got, expected, rel_tol=1e-6)
        assert math.isclose(ssim(a, b), o_ssim(a, b), rel_tol=1e-6, abs_tol=1e-12)
        g, p = rng.random((h, w)), rng.random((h, w))
        assert dice(g, p) == o_dice(g, p)
    elapsed = time.perf_counter() - start
    detail(record_property, f"{n} random images, {elapsed:.1f} s")
    assert elapsed < 60


@criterion(2, "analytic loss values")
def test_criterion_02_analytic_losses(record_property):
    checks = [
        (generator_loss([0.5] * 8), math.log(0.5)),
        (generator_loss([0.25, 0.75]), (math.log(0.75) + math.log(0.25)) / 2),
        (discriminator_loss([0.5] * 8, [0.5] * 8), 2 * math.log(2)),
        (discriminator_loss([0.9], [0.2]), -(math.log(0.9) + math.log(0.8))),
        (reconstruction_loss([[0, 1], [1, 0]], [[1, 1], [0, 0]]), 0.5),
        (reconstruction_loss(np.full((2, 2), 0.6), np.full((2, 2), 0.5)), 0.1),
        (segmentation_loss([0, 0], [1, 0]), 0.5),
        (segmentation_loss([0.5, 1, 0.5], [1, 1, 0]), 0.5 / 3),
    ]
    worst = max(abs(got - want) for got, want in checks)
    detail(record_property, f"max abs error {worst:.2e}")
    assert worst <= 1e-9


@criterion(3, "finite-difference gradient checks")
def test_criterion_03_gradient_checks(record_property):
    start = time.perf_counter()
    bad = {}
    for name, s in micro_specs().items():
        net = micro_net(s)
        assert parameter_count(net) <= 200
        mism = fd_mismatches(fd_gradient_errors(net, weighted_sum_loss(s)), rel=1e-4)
        if mism:
            bad[name] = len(mism)
    elapsed = time.perf_counter() - start
    detail(record_property, f"{len(micro_specs())} layer kinds, {elapsed:.1f} s, mismatches {bad or 'none'}")
    assert not bad and elapsed < 120


# --------------------------------------------------------------------------
# 4-6: cipher quality

@criterion(4, "round-trip quality")
def test_criterion_04_round_trip(record_property, desk, victim, victim_ciphers, spec):
    ss, ps, ss_float = [], [], []
    for x, c in zip(desk.test_images, victim_ciphers):
        r = decrypt(c, victim.keypair, spec).to_byte()
        ss.append(ssim(r, x))
        ps.append(psnr(r, x))
        f = encrypt(x, victim.keypair.encryption_key, spec, quantize=False)
        ss_float.append(ssim(decrypt(f, victim.keypair, spec).to_byte(), x))
    detail(record_property, f"SSIM {np.mean(ss):.3f}, PSNR {np.mean(ps):.2f} dB over {len(ss)} held-out images "
                            f"(unquantized cipher path SSIM {np.mean(ss_float):.3f})")
    assert np.mean(ss) >= 0.80 and np.mean(ps) >= 30.0


@criterion(5, "ciphertext dissimilarity")
def test_criterion_05_cipher_dissimilarity(record_property, desk, victim_ciphers):
    values = [ssim(c.payload.to_channels(1), x) for c, x in zip(victim_ciphers, desk.test_images)]
    detail(record_property, f"SSIM(cipher, plain) mean {np.mean(values):.3f}, max {np.max(values):.3f}")
    assert np.mean(values) <= 0.15


@criterion(6, "ciphertext entropy")
def test_criterion_06_cipher_entropy(record_property, desk, victim_ciphers):
    values = [entropy(c.payload) for c in victim_ciphers]
    plain = [entropy(x) for x in desk.test_images]
    detail(record_property, f"cipher entropy mean {np.mean(values):.3f} bits (plaintexts {np.mean(plain):.3f})")
    assert np.mean(values) >= 7.0


# --------------------------------------------------------------------------
# 7-10: security analyses

@criterion(7, "key randomness across retrains")
def test_criterion_07_key_randomness(record_property, full_leak):
    cip = np.array(full_leak.matrices["ciphertext_ssim"]["values"])
    off = cip[~np.eye(len(cip), dtype=bool)]
    print(attacks.format_matrix("ciphertext SSIM", full_leak.matrices["ciphertext_ssim"]["labels"], cip))
    detail(record_property, f"{len(cip)} retrains, off-diagonal ciphertext SSIM max {off.max():.3f}, "
                            f"fingerprints distinct {full_leak.stats['fingerprints_distinct']}")
    assert len(cip) == N_RETRAINS and not full_leak.failures
    assert off.max() <= 0.2 and full_leak.stats["fingerprints_distinct"]


@criterion(8, "key sensitivity")
def test_criterion_08_key_sensitivity(record_property, desk, victim, spec):
    report = attacks.run_key_sensitivity(victim.keypair, spec, desk.test_images, 0.05, seeds=(0, 1, 2))
    sweep = attacks.key_sensitivity_sweep(victim.keypair, spec, desk.test_images[:10], (0.05, 0.25, 0.5, 1.0),
                                          seeds=(0,))
    print(report.to_text())
    detail(record_property, f"5% perturbed SSIM {report.stats['perturbed_ssim_mean']:.3f} "
                            f"(worst trial {report.stats['perturbed_ssim_max_trial']:.3f}), control "
                            f"{report.stats['control_ssim']:.3f}; sweep "
                            + ", ".join(f"{f:g}:{v:.2f}" for f, v in sweep.items()))
    assert report.stats["control_ssim"] >= 0.80
    assert report.stats["perturbed_ssim_max_trial"] <= 0.30


@criterion(9, "differential and chosen-ciphertext NPCR")
def test_criterion_09_npcr(record_property, desk, victim, victim_ciphers, spec):
    diff = attacks.run_differential_attack(victim.keypair, spec, desk.test_images, 0.01, seed=0)
    chosen = attacks.run_chosen_ciphertext(victim.keypair, spec, victim_ciphers, 0.01, seed=0)
    detail(record_property, f"differential {diff.stats['npcr_mean']:.2f}% (full-scale reference 94.21), "
                            f"chosen-ciphertext {chosen.stats['npcr_mean']:.2f}% (reference 94.87)")
    assert diff.stats["npcr_mean"] >= 90.0
    assert chosen.stats["npcr_mean"] >= 90.0


@criterion(10, "leakage experiments")
def test_criterion_10_leakage(record_property, desk, victim, spec, full_leak):
    cfg = desk_config(VICTIM_SEED)
    variants = [preset("encryptor", "desk", residual_blocks=2), preset("encryptor", "desk", residual_blocks=4)]
    hf = attacks.run_hidden_factor_leak(victim, variants, desk.hidden_factors, cfg, desk.train_images,
                                        desk.test_images, train_fn=cached_encdec)
    stripes = generate_hidden_factors(HiddenFactorSpec("stripe_texture", count=200, seed=2))
    arch = attacks.run_architecture_leak(victim, [desk.hidden_factors, stripes], cfg, desk.train_images,
                                         desk.test_images, train_fn=cached_encdec)
    dec = np.array(full_leak.matrices["decryption_ssim"]["values"])
    print(hf.to_text(), arch.to_text(), full_leak.to_text(), sep="\n\n")
    rows = {
        "hidden_factor_leak": (hf.stats["max_attacker_ssim_mean"], hf.stats["control_ssim"]),
        "architecture_leak": (arch.stats["max_attacker_ssim_mean"], arch.stats["control_ssim"]),
        "full_leak": (full_leak.stats["max_cross_ssim"], full_leak.stats["min_self_ssim"]),
    }
    detail(record_property, "; ".join(f"{k} cross {c:.3f} / self {s:.3f}" for k, (c, s) in rows.items()))
    assert not hf.failures and not arch.failures
    assert len(hf.attackers) == 3 and len(arch.attackers) == 2 and dec.shape == (N_RETRAINS, N_RETRAINS)
    for cross, control in rows.values():
        assert cross <= 0.30 and control >= 0.80


# --------------------------------------------------------------------------
# 11-13

@criterion(11, "ROI segmentation on ciphertexts")
def test_criterion_11_roi(record_property, desk, victim, spec):
    plain = list(desk.train_images) + list(desk.test_images)
    masks = list(desk.train_masks) + list(desk.test_masks)
    ciphers = encrypt_batch(plain, victim.keypair.encryption_key, spec)
    cfg = roi_desk_config(0)
    holdout = len(desk.test_images)
    result = compare_plain_vs_cipher_segmentation(plain, ciphers, masks, cfg, holdout=holdout,
                                                  train_fn=cached_roi)
    # cross-key control: a segmenter fitted to another key's ciphertexts, applied to the victim's
    other_pair, _ = cached_encdec(desk.train_images, desk.hidden_factors, desk_config(VICTIM_SEED + 1), spec)
    other_ciphers = [c.payload for c in encrypt_batch(desk.train_images, other_pair.encryption_key, spec)]
    other_model, _ = cached_roi(other_ciphers, desk.train_masks, cfg, None)
    cross = mean_dice(desk.test_masks, segment_batch(ciphers[-holdout:], other_model))
    detail(record_property, f"Dice cipher {result.dice_cipher:.3f}, plain {result.dice_plain:.3f}, "
                            f"gap {result.gap:.3f}; other-key segmenter on victim ciphertexts {cross:.3f}")
    assert not result.failures
    assert result.dice_cipher >= 0.85 and result.gap <= 0.05
    assert cross < result.dice_cipher


@criterion(12, "throughput report")
def test_criterion_12_throughput(record_property, tmp_path, victim, capsys):
    key_path = tmp_path / "enc.key"
    save_key(victim.keypair.encryption_key, key_path)
    code = cli_main(["bench", "--key", str(key_path), "--resolution", "256", "512", "--seconds", "3",
                     "--out", str(tmp_path / "bench")])
    out = capsys.readouterr().out
    report = json.loads((tmp_path / "bench" / "bench.json").read_text())
    fps = {tuple(r["resolution"]): r["images_per_second"] for r in report["results"]}
    detail(record_property, f"256x256 {fps[(256, 256)]:.2f} img/s, 512x512 {fps[(512, 512)]:.2f} img/s on "
                            f"{report['hardware']['cpu_count']} CPU(s) (full-scale GPU reference 14.28 / 3.65)")
    assert code == 0 and "256x256" in out and "512x512" in out
    assert fps[(256, 256)] > fps[(512, 512)] > 0


@criterion(13, "serialization and determinism")
def test_criterion_13_determinism(record_property, tmp_path, desk, victim, spec):
    for key in (victim.keypair.encryption_key, victim.keypair.decryption_key):
        save_key(key, tmp_path / "k.key")
        back = load_key(tmp_path / "k.key")
        assert back.values.tobytes() == key.values.tobytes() and back.layout == key.layout
    small = desk_dataset(5, count=12, holdout=2, resolution=(32, 32),
                         hidden=HiddenFactorSpec(count=6, seed=6, resolution=(32, 32)))
    cfg = desk_config(9, epochs=2, holdout=2)
    a, _ = train_encdec(small.train_images, small.hidden_factors, cfg, spec)
    b, _ = train_encdec(small.train_images, small.hidden_factors, cfg, spec)
    assert a.encryption_key.values.tobytes() == b.encryption_key.values.tobytes()
    assert a.decryption_key.values.tobytes() == b.decryption_key.values.tobytes()
    x = small.test_images[0]
    ca, cb = encrypt(x, a.encryption_key, spec), encrypt(x, b.encryption_key, spec)
    assert np.array_equal(ca.payload.values, cb.payload.values)
    ra = evaluate_pair(x, ca.payload, decrypt(ca, a, spec).to_byte()).to_dict()
    rb = evaluate_pair(x, cb.payload, decrypt(cb, b, spec).to_byte()).to_dict()
    assert ra == rb
    da = attacks.run_differential_attack(a, spec, small.test_images, 0.01, seed=3).to_dict()
    db = attacks.run_differential_attack(b, spec, small.test_images, 0.01, seed=3).to_dict()
    assert da == db
    detail(record_property, "key files bit-exact; repeated seeded training, ciphertexts and reports identical")


# --------------------------------------------------------------------------
# supplementary checks (not numbered criteria)

def test_victim_as_attacker_is_a_passing_control(desk, victim, spec):
    report = attacks.run_hidden_factor_leak(victim, [victim], desk.hidden_factors, desk_config(0),
                                            desk.train_images, desk.test_images[:10])
    assert report.attackers[1]["ssim_mean"] >= 0.80


def test_key_sensitivity_sweep_non_increasing(desk, victim, spec):
    sweep = attacks.key_sensitivity_sweep(victim.keypair, spec, desk.test_images[:10], (0.0, 0.01, 0.05, 0.25),
                                          seeds=(0, 1))
    values = list(sweep.values())
    assert all(later <= earlier + 0.01 for earlier, later in zip(values, values[1:])), sweep


def test_discriminator_accuracy_approaches_chance(spec):
    d = desk_dataset(7, count=200, holdout=0, hidden=HiddenFactorSpec(count=200, seed=8))
    # half the images of the victim run, so twice the epochs for the same number of updates
    cfg = desk_config(7, epochs=2 * desk_config(7).epochs)
    cache = _cache_dir("trace", cfg=cfg.to_dict(), plain=dataset_id(d.train_images),
                       hidden=dataset_id(d.hidden_factors))
    if not RETRAIN and (cache / "trace.json").exists():
        records = json.loads((cache / "trace.json").read_text())["records"]
    else:
        _, trace = train_encdec(d.train_images, d.hidden_factors, cfg, spec)
        cache.mkdir(parents=True, exist_ok=True)
        trace.write_report(cache / "trace.json")
        records = trace.to_dict()["records"]
    last = [r["disc_accuracy"] for r in records[-cfg.stability_window:]]
    print("held-out discriminator accuracy per epoch:", [round(r["disc_accuracy"], 3) for r in records])
    assert 0.35 <= float(np.mean(last)) <= 0.65
