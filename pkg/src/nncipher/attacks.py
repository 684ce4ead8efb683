"""Adversary experiments: imitation (retraining) attacks and perturbation analyses.

Every experiment returns an :class:`AttackReport` whose verdict is computed
only from the statistics recorded in it and the declared thresholds.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cipher import CipherImage, decrypt, encrypt
from .errors import ConfigError, TrainingDiverged
from .images import ImageTensor, as_image
from .keystore import KeyPair, key_fingerprint, perturb_key
from .metrics import npcr, psnr, ssim

KINDS = ("hidden_factor_leak", "architecture_leak", "full_leak", "differential", "chosen_ciphertext",
         "key_sensitivity")
BROKEN_SSIM = 0.3       # cross-decryption at or below this is unrecognizable
CONTROL_SSIM = 0.8      # legitimate decryption must reach this
NPCR_THRESHOLD = 90.0
REFERENCE_NPCR = {"differential": 94.21, "chosen_ciphertext": 94.87}


@dataclass
class Party:
    """A trained (or supplied) encryptor/decryptor pair taking part in an experiment."""

    name: str
    keypair: KeyPair
    spec: object
    seed: int | None = None
    hidden_factors: str | None = None

    def provenance(self) -> dict:
        return {"name": self.name, "seed": self.seed, "hidden_factors": self.hidden_factors,
                "spec_digest": self.spec.digest(), "residual_blocks": self.spec.residual_block_count,
                "enc_fingerprint": key_fingerprint(self.keypair.encryption_key),
                "dec_fingerprint": key_fingerprint(self.keypair.decryption_key)}


@dataclass
class AttackScenario:
    kind: str
    victim: Party | None = None
    attacker_configs: list = field(default_factory=list)
    trial_images: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}", "kind")
        if self.kind == "hidden_factor_leak" and self.victim is not None:
            ids = {c.get("hidden_factors") for c in self.attacker_configs if isinstance(c, dict)}
            if len(ids - {None, self.victim.hidden_factors}) > 0:
                raise ConfigError("hidden_factor_leak attackers must share the victim's hidden factors",
                                  "attacker_configs")


@dataclass
class AttackReport:
    kind: str
    stats: dict
    verdict: str
    thresholds: dict
    provenance: dict = field(default_factory=dict)
    attackers: list = field(default_factory=list)
    matrices: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return json.loads(json.dumps({
            "kind": self.kind, "verdict": self.verdict, "thresholds": self.thresholds,
            "reference": self.reference, "stats": self.stats, "attackers": self.attackers,
            "matrices": self.matrices, "failures": self.failures, "provenance": self.provenance,
        }, default=_jsonable))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        lines = [f"attack: {self.kind}", f"verdict: {self.verdict}"]
        for name, value in self.reference.items():
            lines.append(f"reference {name}: {value}")
        for name, value in self.stats.items():
            if isinstance(value, float):
                lines.append(f"{name}: {value:.4f}")
            elif not isinstance(value, (list, dict)):
                lines.append(f"{name}: {value}")
        for a in self.attackers:
            lines.append(f"  {a['name']}: ssim {a['ssim_mean']:.4f} (max {a['ssim_max']:.4f}), "
                         f"psnr {a['psnr_mean']:.2f} dB")
        for title, m in self.matrices.items():
            lines.append(format_matrix(title, m["labels"], m["values"]))
        for name, why in self.failures.items():
            lines.append(f"  failed {name}: {why}")
        return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    raise TypeError(f"not serializable: {type(obj)}")


def format_matrix(title, labels, values) -> str:
    width = max(8, max(len(str(x)) for x in labels) + 1)
    rows = [title, " " * width + "".join(str(x).rjust(width) for x in labels)]
    for label, row in zip(labels, values):
        rows.append(str(label).ljust(width) + "".join(f"{v:.3f}".rjust(width) for v in row))
    return "\n".join(rows)


def dataset_id(images) -> str:
    h = hashlib.sha256()
    for img in images:
        h.update(as_image(img).as_uint8().tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# shared helpers

def _round(img: ImageTensor) -> ImageTensor:
    return img.to_byte()


def _plain_gray(img) -> ImageTensor:
    img = as_image(img)
    return img.to_channels(1) if img.channels == 3 else img


def _decrypt_scores(ciphers, party: Party, originals):
    """Per-image (ssim, psnr) of the party's 8-bit decryption against the plaintexts."""
    ss, ps = [], []
    for c, x in zip(ciphers, originals):
        r = _round(decrypt(c, party.keypair.decryption_key, party.spec))
        ss.append(ssim(r, x))
        ps.append(psnr(r, x))
    return ss, ps


def _summary(name, ss, ps, extra=None) -> dict:
    finite = [p for p in ps if math.isfinite(p)]
    d = {"name": name, "ssim_mean": float(np.mean(ss)), "ssim_min": float(np.min(ss)),
         "ssim_max": float(np.max(ss)), "psnr_mean": float(np.mean(finite)) if finite else math.inf,
         "ssim": [float(s) for s in ss], "psnr": [float(p) for p in ps]}
    d.update(extra or {})
    return d


def _train(train_fn, plain, hidden, cfg, spec, name, hidden_id, failures):
    try:
        pair, _ = train_fn(plain, hidden, cfg, spec)
    except TrainingDiverged as exc:
        failures[name] = str(exc)
        return None
    return Party(name, pair, spec, cfg.rng_seed, hidden_id)


def _default_trainer():
    from .training import train_encdec

    return lambda plain, hidden, cfg, spec: train_encdec(plain, hidden, cfg, spec)


def _cross_report(kind, victim: Party, attackers, trials, failures, extra_provenance=None) -> AttackReport:
    originals = [_plain_gray(x) for x in trials]
    ciphers = [encrypt(x, victim.keypair.encryption_key, victim.spec) for x in trials]
    self_ss, self_ps = _decrypt_scores(ciphers, victim, originals)
    control = _summary(victim.name, self_ss, self_ps, {"role": "self-control"})
    rows = []
    for party in attackers:
        ss, ps = _decrypt_scores(ciphers, party, originals)
        rows.append(_summary(party.name, ss, ps, party.provenance()))
    dominated = all(all(c > a for c, a in zip(self_ss, r["ssim"])) for r in rows)
    worst = max((r["ssim_max"] for r in rows), default=None)
    resisted = (bool(rows) and all(r["ssim_mean"] <= BROKEN_SSIM for r in rows)
                and control["ssim_mean"] >= CONTROL_SSIM and not failures)
    stats = {"control_ssim": control["ssim_mean"], "control_psnr": control["psnr_mean"],
             "max_attacker_ssim_mean": max((r["ssim_mean"] for r in rows), default=None),
             "max_attacker_ssim_any_image": worst, "control_dominates_every_image": dominated,
             "trials": len(trials)}
    prov = {"victim": victim.provenance(), "trial_set": dataset_id(trials)}
    prov.update(extra_provenance or {})
    return AttackReport(kind, stats, "resisted" if resisted else "broken",
                        {"attacker_ssim_max": BROKEN_SSIM, "control_ssim_min": CONTROL_SSIM},
                        prov, [control] + rows, {}, dict(failures))


# --------------------------------------------------------------------------
# imitation attacks

def run_hidden_factor_leak(victim: Party, variant_specs, shared_hidden_factors, cfg, plain_dataset, trial_images,
                           train_fn=None) -> AttackReport:
    """Attackers know the hidden factors and training data but not the architecture.

    ``variant_specs`` holds encryptor specs (trained here with ``cfg``) or
    ready-made :class:`Party` objects, for instance the victim itself as a
    sanity control.
    """
    if not variant_specs:
        raise ConfigError("at least one attacker variant is required", "variant_specs")
    train_fn = train_fn or _default_trainer()
    hid = dataset_id(shared_hidden_factors)
    failures, attackers = {}, []
    for i, v in enumerate(variant_specs):
        if isinstance(v, Party):
            attackers.append(v)
            continue
        name = f"attacker-{v.residual_block_count}res-{i}"
        party = _train(train_fn, plain_dataset, shared_hidden_factors, cfg, v, name, hid, failures)
        if party is not None:
            attackers.append(party)
    return _cross_report("hidden_factor_leak", victim, attackers, trial_images, failures,
                         {"hidden_factors": hid, "config": cfg.to_dict()})


def run_architecture_leak(victim: Party | None, hidden_factor_datasets, cfg, plain_dataset, trial_images,
                          spec=None, train_fn=None) -> AttackReport:
    """Attackers know the architecture, training data and settings but use other hidden factors.

    The victim corresponds to ``hidden_factor_datasets[0]`` (trained here when
    ``victim`` is None); one attacker is trained per remaining dataset with the
    same spec and seed, so the hidden factors are the only difference.
    """
    datasets = list(hidden_factor_datasets)
    if len(datasets) < 2:
        raise ConfigError("architecture_leak needs at least two hidden-factor datasets", "hidden_factor_datasets")
    train_fn = train_fn or _default_trainer()
    failures = {}
    if victim is None:
        if spec is None:
            raise ConfigError("spec is required when no victim is supplied", "spec")
        victim = _train(train_fn, plain_dataset, datasets[0], cfg, spec, "victim", dataset_id(datasets[0]), failures)
        if victim is None:
            raise TrainingDiverged(f"victim training failed: {failures['victim']}")
    attackers = []
    for i, hidden in enumerate(datasets[1:], start=1):
        party = _train(train_fn, plain_dataset, hidden, cfg, victim.spec, f"attacker-factors-{i}",
                       dataset_id(hidden), failures)
        if party is not None:
            attackers.append(party)
    return _cross_report("architecture_leak", victim, attackers, trial_images, failures,
                         {"hidden_factor_sets": [dataset_id(d) for d in datasets], "config": cfg.to_dict()})


def retrain_seeds(base_seed: int, n: int) -> list[int]:
    """Distinct seeds for repeated trainings under otherwise identical conditions."""
    return [int(base_seed) + i for i in range(n)]


def run_full_leak(victim_cfg, n_retrains: int, plain_dataset, hidden_factors, trial_images, spec,
                  train_fn=None, parties=None) -> AttackReport:
    """Retrain ``n_retrains`` times with everything shared except the init seed.

    Reports the cross-decryption SSIM matrix (row: encrypting run, column:
    decrypting run) and the pairwise ciphertext SSIM matrix.
    """
    if n_retrains < 2:
        raise ConfigError("full_leak needs n_retrains >= 2", "n_retrains")
    train_fn = train_fn or _default_trainer()
    hid = dataset_id(hidden_factors)
    failures = {}
    runs = list(parties or [])
    for seed in retrain_seeds(victim_cfg.rng_seed, n_retrains)[len(runs):]:
        cfg = replace(victim_cfg, rng_seed=seed)
        party = _train(train_fn, plain_dataset, hidden_factors, cfg, spec, f"key-{seed}", hid, failures)
        if party is not None:
            runs.append(party)
    originals = [_plain_gray(x) for x in trial_images]
    ciphers = [[encrypt(x, p.keypair.encryption_key, p.spec) for x in trial_images] for p in runs]
    n = len(runs)
    dec = np.zeros((n, n))
    per_image = {}
    for i in range(n):
        for j in range(n):
            ss, _ = _decrypt_scores(ciphers[i], runs[j], originals)
            dec[i, j] = np.mean(ss)
            per_image[(i, j)] = ss
    cip = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            v = np.mean([ssim(_plain_gray(a.payload), _plain_gray(b.payload))
                         for a, b in zip(ciphers[i], ciphers[j])])
            cip[i, j] = cip[j, i] = v
    off = ~np.eye(n, dtype=bool)
    fps = [key_fingerprint(p.keypair.encryption_key) for p in runs]
    dominated = all(per_image[(i, i)][k] > per_image[(i, j)][k]
                    for i in range(n) for j in range(n) if i != j for k in range(len(originals)))
    stats = {"max_cross_ssim": float(dec[off].max()) if n > 1 else None,
             "min_self_ssim": float(np.diag(dec).min()) if n else None,
             "max_cipher_pair_ssim": float(cip[off].max()) if n > 1 else None,
             "fingerprints_distinct": len(set(fps)) == len(fps),
             "control_dominates_every_image": dominated, "trials": len(trial_images)}
    resisted = (n >= 2 and not failures and stats["max_cross_ssim"] <= BROKEN_SSIM
                and stats["min_self_ssim"] >= CONTROL_SSIM)
    labels = [p.name for p in runs]
    return AttackReport(
        "full_leak", stats, "resisted" if resisted else "broken",
        {"attacker_ssim_max": BROKEN_SSIM, "control_ssim_min": CONTROL_SSIM},
        {"runs": [p.provenance() for p in runs], "hidden_factors": hid, "trial_set": dataset_id(trial_images),
         "config": victim_cfg.to_dict()},
        [], {"decryption_ssim": {"labels": labels, "values": dec.tolist()},
             "ciphertext_ssim": {"labels": labels, "values": cip.tolist()}},
        failures, {"ciphertext_ssim_off_diagonal": "mostly below 0.1 at full scale"})


# --------------------------------------------------------------------------
# perturbation analyses

def flip_pixels(image, fraction: float, rng) -> ImageTensor:
    """Invert (v -> 255 - v) every channel of ceil(fraction * H * W) random pixel positions."""
    img = as_image(image).to_byte()
    h, w = img.height, img.width
    count = math.ceil(round(fraction * h * w, 9))
    vals = img.values.copy()
    if count:
        pos = rng.choice(h * w, size=count, replace=False)
        flat = vals.reshape(h * w, -1)
        flat[pos] = 255.0 - flat[pos]
    return ImageTensor(vals, "byte")


def _npcr_report(kind, pairs, flip_fraction, seed, provenance) -> AttackReport:
    values = [npcr(a, b) for a, b in pairs]
    mean = float(np.mean(values))
    stats = {"npcr_mean": mean, "npcr_min": float(np.min(values)), "npcr_max": float(np.max(values)),
             "npcr": values, "flip_fraction": flip_fraction, "seed": seed, "trials": len(values)}
    verdict = "resisted" if mean >= NPCR_THRESHOLD else "broken"
    return AttackReport(kind, stats, verdict, {"npcr_min": NPCR_THRESHOLD}, provenance,
                        reference={"npcr_full_scale_percent": REFERENCE_NPCR[kind]})


def _check_fraction(f):
    if not 0.0 <= f < 1.0:
        raise ConfigError(f"flip_fraction must be in [0, 1), got {f}", "flip_fraction")


def run_differential_attack(keypair: KeyPair, spec, dataset, flip_fraction: float = 0.01,
                            seed: int = 0) -> AttackReport:
    """NPCR between ciphertexts of plaintext pairs that differ in ``flip_fraction`` of pixels."""
    _check_fraction(flip_fraction)
    rng = np.random.default_rng(seed)
    key = keypair.encryption_key
    pairs = []
    for x in dataset:
        x = _plain_gray(x).to_byte()
        x2 = flip_pixels(x, flip_fraction, rng)
        pairs.append((encrypt(x, key, spec).payload, encrypt(x2, key, spec).payload))
    return _npcr_report("differential", pairs, flip_fraction, seed,
                        {"enc_fingerprint": key_fingerprint(key), "spec_digest": spec.digest(),
                         "trial_set": dataset_id(dataset)})


def run_chosen_ciphertext(keypair: KeyPair, spec, cipher_dataset, flip_fraction: float = 0.01,
                          seed: int = 0) -> AttackReport:
    """NPCR between decryptions of ciphertext pairs that differ in ``flip_fraction`` of pixels."""
    _check_fraction(flip_fraction)
    rng = np.random.default_rng(seed)
    key = keypair.decryption_key
    pairs = []
    payloads = [c.payload if isinstance(c, CipherImage) else as_image(c) for c in cipher_dataset]
    for c in payloads:
        c = c.to_byte()
        c2 = flip_pixels(c, flip_fraction, rng)
        pairs.append((decrypt(c, key, spec).to_byte(), decrypt(c2, key, spec).to_byte()))
    return _npcr_report("chosen_ciphertext", pairs, flip_fraction, seed,
                        {"dec_fingerprint": key_fingerprint(key), "spec_digest": spec.digest(),
                         "trial_set": dataset_id(payloads)})


def run_key_sensitivity(keypair: KeyPair, spec, dataset, fraction: float = 0.05, seeds=(0, 1, 2)) -> AttackReport:
    """Decrypt with keys whose ``fraction`` of coordinates were re-randomized.

    ``fraction=0`` runs the unperturbed control. Each seed is one trial; the
    verdict requires every trial's mean SSIM to be at most the broken threshold.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction must be in [0, 1], got {fraction}", "fraction")
    originals = [_plain_gray(x) for x in dataset]
    ciphers = [encrypt(x, keypair.encryption_key, spec) for x in dataset]
    victim = Party("victim", keypair, spec)
    control_ss, control_ps = _decrypt_scores(ciphers, victim, originals)
    trials = []
    for s in (seeds if fraction > 0 else ()):
        key = perturb_key(keypair.decryption_key, fraction, s)
        party = Party(f"perturbed-{s}", KeyPair(keypair.encryption_key, key), spec, s)
        ss, ps = _decrypt_scores(ciphers, party, originals)
        trials.append(_summary(party.name, ss, ps, {"seed": s, "dec_fingerprint": key_fingerprint(key)}))
    if fraction > 0:
        means = [t["ssim_mean"] for t in trials]
        stats = {"fraction": fraction, "perturbed_ssim_mean": float(np.mean(means)),
                 "perturbed_ssim_max_trial": float(np.max(means)), "control_ssim": float(np.mean(control_ss))}
        resisted = all(m <= BROKEN_SSIM for m in means) and stats["control_ssim"] >= CONTROL_SSIM
    else:
        stats = {"fraction": 0.0, "perturbed_ssim_mean": float(np.mean(control_ss)),
                 "control_ssim": float(np.mean(control_ss))}
        resisted = False
    return AttackReport("key_sensitivity", stats, "resisted" if resisted else "broken",
                        {"perturbed_ssim_max": BROKEN_SSIM, "control_ssim_min": CONTROL_SSIM},
                        {"victim": victim.provenance(), "seeds": list(seeds), "trial_set": dataset_id(dataset)},
                        [_summary("control", control_ss, control_ps)] + trials)


def key_sensitivity_sweep(keypair, spec, dataset, fractions=(0.0, 0.01, 0.05, 0.25), seeds=(0, 1, 2)) -> dict:
    """Mean decryption SSIM per perturbation fraction."""
    return {f: run_key_sensitivity(keypair, spec, dataset, f, seeds).stats["perturbed_ssim_mean"]
            for f in fractions}
