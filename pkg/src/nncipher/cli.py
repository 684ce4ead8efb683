"""Command-line entry point.

Every artifact-producing command writes its outputs plus one ``run.json``
record under ``--out``. Exit status: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import (ConfigError, CorruptKeyFile, DigestMismatch, LayoutError, NumericFailure, ShapeError,
                     SpecError, TrainingDiverged)
from .specs import PROFILE_RESOLUTION, load_spec, preset, save_spec

DATA_ENV = "NNCIPHER_DATA"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("nncipher")


class UsageError(Exception):
    pass


@dataclass
class RunRecord:
    command: str
    config: dict
    seeds: dict
    key_fingerprints: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    version: str = __version__
    argv: list = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "run.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=str))
        return path


# --------------------------------------------------------------------------
# helpers

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_yaml(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: cannot parse ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: expected a mapping at top level")
    return data


def _training_config(data: dict, seed: int, section="training", roi=False):
    from .training import TrainingConfig, desk_config, roi_desk_config

    values = dict(data.get(section) or {})
    if "rng_seed" in values:
        raise ConfigError("set the seed with --seed, not rng_seed", "rng_seed")
    base = (roi_desk_config(seed) if roi else desk_config(seed)).to_dict()
    base.update(values)
    return TrainingConfig.from_dict(base)


def _resolution(args, data: dict):
    res = data.get("data", {}).get("resolution") or PROFILE_RESOLUTION[args.profile]
    return (res, res) if isinstance(res, int) else tuple(res)


def _spec_for(args, role: str, key_path=None):
    """Spec from --spec, else spec.yaml beside the key, else the profile preset."""
    candidates = [args.spec] if getattr(args, "spec", None) else []
    if key_path is not None:
        candidates.append(Path(key_path).parent / "spec.yaml")
    for c in candidates:
        if c and Path(c).exists():
            return load_spec(c).with_role(role)
    if getattr(args, "spec", None):
        raise UsageError(f"spec file not found: {args.spec}")
    return preset(role, args.profile)


def _load_key(path):
    from .keystore import load_key

    if path is None:
        raise UsageError("--key is required")
    if not Path(path).exists():
        raise UsageError(f"key file not found: {path}")
    return load_key(path)


def _image_files(path) -> list:
    from .data import IMAGE_SUFFIXES

    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise UsageError(f"no such file or directory: {p}")
    return sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)


def _plaintexts(args, data: dict, resolution):
    """Plaintexts and masks from --data / $NNCIPHER_DATA, or synthetic ones."""
    from .data import generate_synthetic_plaintexts, read_image, read_mask, resize

    root = args.data or os.environ.get(DATA_ENV)
    if root:
        files = _image_files(root)
        if not files:
            raise UsageError(f"no images found under {root}")
        images = [resize(read_image(f), resolution).to_channels(1) for f in files]
        mask_dir = Path(root) / "masks"
        masks = None
        if mask_dir.is_dir():
            masks = [resize_mask(read_mask(next(mask_dir.glob(f.stem + ".*"))), resolution) for f in files]
        return images, masks, {"source": str(root), "count": len(images)}
    count = int(data.get("data", {}).get("count", 400))
    images, masks = generate_synthetic_plaintexts(count, args.seed, resolution)
    return images, masks, {"source": "synthetic", "count": count, "seed": args.seed}


def resize_mask(mask, resolution):
    from .data import resize
    from .images import ImageTensor

    img = ImageTensor(mask.astype(np.float32), "unit")
    return resize(img, resolution, nearest=True).values[:, :, 0] >= 0.5


def _hidden(args, data: dict, resolution, offset=1):
    from .data import HiddenFactorSpec, generate_hidden_factors

    h = dict(data.get("data", {}).get("hidden") or {})
    h.setdefault("seed", args.seed + offset)
    h.setdefault("count", 200)
    h["resolution"] = tuple(resolution)
    try:
        spec = HiddenFactorSpec(**h)
    except TypeError as exc:
        raise ConfigError(f"bad hidden-factor section: {exc}", "data.hidden") from exc
    return generate_hidden_factors(spec), spec.to_dict()


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    from .keystore import key_fingerprint, save_key
    from .training import train_encdec, train_roi

    t0 = time.time()
    data = _read_yaml(args.config)
    cfg = _training_config(data, args.seed, roi=args.model == "roi")
    out = _out_dir(args)
    resolution = _resolution(args, data)
    plain, masks, plain_info = _plaintexts(args, data, resolution)
    outputs = []
    if args.model == "roi":
        if masks is None:
            raise UsageError("roi training needs masks (synthetic data or a masks/ directory)")
        from .cipher import encrypt

        enc_key = _load_key(args.key)
        enc_spec = _spec_for(args, "encryptor", args.key)
        enc_key.check_applicable(enc_spec)
        ciphers = [encrypt(x, enc_key, enc_spec).payload for x in plain]
        roi_spec = preset("roi", args.profile)
        model, trace = train_roi(ciphers, masks, cfg, roi_spec, run_id=f"cli-roi-{args.seed}")
        save_key(model.parameters, out / "roi.key")
        save_spec(roi_spec, out / "spec.yaml")
        prints = {"roi": key_fingerprint(model.parameters), "encryption": key_fingerprint(enc_key)}
        outputs += ["roi.key", "spec.yaml"]
    else:
        hidden, hidden_info = _hidden(args, data, resolution)
        spec = preset("encryptor", args.profile, data.get("residual_blocks"))
        pair, trace = train_encdec(plain, hidden, cfg, spec, run_id=f"cli-{args.seed}")
        save_key(pair.encryption_key, out / "enc.key")
        save_key(pair.decryption_key, out / "dec.key")
        save_spec(spec, out / "spec.yaml")
        plain_info["hidden"] = hidden_info
        prints = {"encryption": key_fingerprint(pair.encryption_key),
                  "decryption": key_fingerprint(pair.decryption_key)}
        outputs += ["enc.key", "dec.key", "spec.yaml"]
    trace.write_log(out / "trace.jsonl")
    trace.write_report(out / "trace.json")
    outputs += ["trace.jsonl", "trace.json"]
    RunRecord("train", {"training": cfg.to_dict(), "data": plain_info, "model": args.model,
                        "profile": args.profile}, {"seed": args.seed}, prints, outputs,
              time.time() - t0, argv=sys.argv[1:]).write(out)
    print(json.dumps(prints, indent=2))
    return EXIT_OK


def cmd_encrypt(args) -> int:
    from .cipher import encrypt, save_cipher
    from .data import read_image
    from .keystore import key_fingerprint

    t0 = time.time()
    key = _load_key(args.key)
    spec = _spec_for(args, "encryptor", args.key)
    files = _image_files(args.inputs)
    out = _out_dir(args)
    outputs = []
    for f in files:
        c = encrypt(read_image(f).to_channels(1), key, spec)
        outputs.append(save_cipher(c, out / (f.stem + ".png")).name)
    RunRecord("encrypt", {"inputs": str(args.inputs), "spec_digest": spec.digest()}, {"seed": args.seed},
              {"encryption": key_fingerprint(key)}, outputs, time.time() - t0, argv=sys.argv[1:]).write(out)
    print(f"encrypted {len(outputs)} image(s) into {out}")
    return EXIT_OK


def cmd_decrypt(args) -> int:
    from .cipher import decrypt, load_cipher
    from .data import read_image, write_image
    from .keystore import KeyPair, key_fingerprint

    t0 = time.time()
    key = _load_key(args.key)
    spec = _spec_for(args, "decryptor", args.key)
    target = KeyPair(_load_key(args.enc_key), key) if args.enc_key else key
    files = [f for f in _image_files(args.inputs)]
    out = _out_dir(args)
    outputs = []
    for f in files:
        cipher = load_cipher(f) if f.with_suffix(".json").exists() else read_image(f)
        write_image(out / (f.stem + ".png"), decrypt(cipher, target, spec))
        outputs.append(f.stem + ".png")
    RunRecord("decrypt", {"inputs": str(args.inputs), "spec_digest": spec.digest()}, {"seed": args.seed},
              {"decryption": key_fingerprint(key)}, outputs, time.time() - t0, argv=sys.argv[1:]).write(out)
    print(f"decrypted {len(outputs)} image(s) into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import read_image
    from .metrics import evaluate_pair

    t0 = time.time()
    groups = [_image_files(d) for d in (args.plain, args.cipher, args.decrypted)]
    if not (len(groups[0]) == len(groups[1]) == len(groups[2])) or not groups[0]:
        raise UsageError(f"directory sizes differ or are empty: {[len(g) for g in groups]}")
    out = _out_dir(args)
    reports = []
    for p, c, d in zip(*groups):
        r = evaluate_pair(read_image(p), read_image(c), read_image(d),
                          metadata={"plain": p.name, "cipher": c.name, "decrypted": d.name})
        reports.append(r)
    psnrs = [r.psnr for r in reports]
    summary = {
        "entropy": float(np.mean([r.entropy for r in reports])),
        "npcr": float(np.mean([r.npcr for r in reports])),
        "psnr": "inf" if all(math.isinf(v) for v in psnrs) else float(np.mean([v for v in psnrs if math.isfinite(v)])),
        "ssim": float(np.mean([r.ssim for r in reports])),
        "cipher_ssim": float(np.mean([r.cipher_ssim for r in reports])),
        "images": [r.to_dict() for r in reports],
    }
    path = Path(args.report) if args.report else out / "report.json"
    path.write_text(json.dumps(summary, indent=2))
    (out / "report.txt").write_text("\n\n".join(r.to_table() for r in reports))
    RunRecord("evaluate", {"plain": str(args.plain), "cipher": str(args.cipher), "decrypted": str(args.decrypted)},
              {"seed": args.seed}, {}, [path.name, "report.txt"], time.time() - t0, argv=sys.argv[1:]).write(out)
    print(json.dumps({k: v for k, v in summary.items() if k != "images"}, indent=2))
    return EXIT_OK


def _scenario_party(section: dict, spec_default, name):
    from .attacks import Party
    from .keystore import KeyPair

    enc, dec = _load_key(section.get("enc_key")), _load_key(section.get("dec_key"))
    spec_path = section.get("spec") or str(Path(section["enc_key"]).parent / "spec.yaml")
    spec = load_spec(spec_path).with_role("encryptor") if Path(spec_path).exists() else spec_default
    return Party(name, KeyPair(enc, dec), spec, section.get("seed"))


def cmd_attack(args) -> int:
    from . import attacks
    from .cipher import encrypt

    t0 = time.time()
    data = _read_yaml(args.scenario)
    kind = data.get("kind")
    if kind not in attacks.KINDS:
        raise ConfigError(f"unknown attack kind {kind!r}; expected one of {', '.join(attacks.KINDS)}", "kind")
    cfg = _training_config(data, args.seed)
    resolution = _resolution(args, data)
    trials_n = int(data.get("trials", 20))
    out = _out_dir(args)
    spec = preset("encryptor", args.profile, data.get("residual_blocks"))
    plain, _, plain_info = _plaintexts(args, data, resolution)
    train, trials = plain[:-trials_n] if len(plain) > trials_n else plain, plain[-trials_n:]
    victim = _scenario_party(data["victim"], spec, "victim") if data.get("victim") else None
    needs_victim = kind in ("hidden_factor_leak", "differential", "chosen_ciphertext", "key_sensitivity")
    if needs_victim and victim is None:
        raise ConfigError(f"{kind} needs a victim section with enc_key and dec_key", "victim")
    if kind == "hidden_factor_leak":
        hidden, _ = _hidden(args, data, resolution)
        variants = [preset("encryptor", args.profile, int(r)) for r in data.get("variants", [2, 4])]
        report = attacks.run_hidden_factor_leak(victim, variants, hidden, cfg, train, trials)
    elif kind == "architecture_leak":
        from .data import HiddenFactorSpec, generate_hidden_factors

        sets = data.get("hidden_sets") or [{"generator_kind": "smoothed_noise"}, {"generator_kind": "stripe_texture"}]
        datasets = []
        for i, h in enumerate(sets):
            h = dict(h)
            h.setdefault("seed", args.seed + 1 + i)
            h.setdefault("count", 200)
            h["resolution"] = tuple(resolution)
            datasets.append(generate_hidden_factors(HiddenFactorSpec(**h)))
        report = attacks.run_architecture_leak(victim, datasets, cfg, train, trials, spec)
    elif kind == "full_leak":
        hidden, _ = _hidden(args, data, resolution)
        report = attacks.run_full_leak(cfg, int(data.get("n_retrains", 4)), train, hidden, trials, spec)
    elif kind == "differential":
        report = attacks.run_differential_attack(victim.keypair, victim.spec, trials,
                                                 float(data.get("flip_fraction", 0.01)), args.seed)
    elif kind == "chosen_ciphertext":
        ciphers = [encrypt(x, victim.keypair.encryption_key, victim.spec) for x in trials]
        report = attacks.run_chosen_ciphertext(victim.keypair, victim.spec, ciphers,
                                               float(data.get("flip_fraction", 0.01)), args.seed)
    else:
        report = attacks.run_key_sensitivity(victim.keypair, victim.spec, trials, float(data.get("fraction", 0.05)),
                                             tuple(data.get("seeds", (args.seed, args.seed + 1, args.seed + 2))))
    report.to_json(out / "attack_report.json")
    (out / "attack_report.txt").write_text(report.to_text())
    RunRecord("attack", {"scenario": data, "data": plain_info}, {"seed": args.seed}, {},
              ["attack_report.json", "attack_report.txt"], time.time() - t0, argv=sys.argv[1:]).write(out)
    print(report.to_text())
    return EXIT_OK


def cmd_segment(args) -> int:
    from .cipher import load_cipher
    from .data import read_image, write_mask
    from .keystore import key_fingerprint
    from .networks import build_roi_net
    from .roi import segment

    t0 = time.time()
    key = _load_key(args.model_key)
    spec = _spec_for(args, "roi", args.model_key)
    model = build_roi_net(spec, key)
    out = _out_dir(args)
    outputs = []
    for f in _image_files(args.inputs):
        cipher = load_cipher(f) if f.with_suffix(".json").exists() else read_image(f)
        mask = segment(cipher, model)
        write_mask(out / (f.stem + "_mask.png"), mask.binarize().values)
        outputs.append(f.stem + "_mask.png")
    RunRecord("segment", {"inputs": str(args.inputs), "spec_digest": spec.digest()}, {"seed": args.seed},
              {"roi": key_fingerprint(key)}, outputs, time.time() - t0, argv=sys.argv[1:]).write(out)
    print(f"wrote {len(outputs)} mask(s) into {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .cipher import hardware_descriptor, measure_throughput
    from .keystore import init_random, key_fingerprint

    t0 = time.time()
    if args.key:
        key = _load_key(args.key)
        spec = _spec_for(args, "encryptor", args.key)
    else:
        spec = preset("encryptor", args.profile)
        key = init_random(spec, args.seed)
    out = _out_dir(args)
    results = []
    for res in args.resolution:
        r = measure_throughput(spec, key, res, args.seconds, seed=args.seed)
        results.append(r.to_dict())
        print(f"{res}x{res}: {r.images_per_second:.2f} images/s over {r.images} images ({r.seconds:.1f} s)")
    reference = {"256": 14.28, "512": 3.65}
    report = {"results": results, "hardware": hardware_descriptor(), "reference_images_per_second": reference}
    (out / "bench.json").write_text(json.dumps(report, indent=2))
    print("hardware: " + json.dumps(hardware_descriptor()))
    RunRecord("bench", {"resolutions": args.resolution, "seconds": args.seconds, "spec_digest": spec.digest()},
              {"seed": args.seed}, {"encryption": key_fingerprint(key)}, ["bench.json"], time.time() - t0,
              argv=sys.argv[1:]).write(out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=0, help="single source of randomness (default 0)")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk")
    common.add_argument("--out", default="run", help="run directory for all outputs")
    common.add_argument("--spec", help="network spec YAML (default: spec.yaml next to the key)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nncipher", description="Learned image cipher toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a key pair (or an ROI model)")
    p.add_argument("--data", help=f"plaintext image directory (default ${DATA_ENV}, else synthetic)")
    p.add_argument("--model", choices=("encdec", "roi"), default="encdec")
    p.add_argument("--key", help="encryption key whose ciphertexts the ROI model learns from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encrypt", parents=[common], help="encrypt images")
    p.add_argument("--key", required=True)
    p.add_argument("inputs", help="image file or directory")
    p.set_defaults(func=cmd_encrypt)

    p = sub.add_parser("decrypt", parents=[common], help="decrypt ciphertext images")
    p.add_argument("--key", required=True)
    p.add_argument("--enc-key", help="encryption key of the pair, to check ciphertext fingerprints")
    p.add_argument("inputs", help="ciphertext file or directory")
    p.set_defaults(func=cmd_decrypt)

    p = sub.add_parser("evaluate", parents=[common], help="metrics over plain/cipher/decrypted directories")
    p.add_argument("plain")
    p.add_argument("cipher")
    p.add_argument("decrypted")
    p.add_argument("--report", help="report path (default <out>/report.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attack", parents=[common], help="run an attack scenario")
    p.add_argument("scenario", help="scenario YAML")
    p.add_argument("--data", help="plaintext image directory")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("segment", parents=[common], help="segment ciphertexts with an ROI model")
    p.add_argument("--model-key", required=True)
    p.add_argument("inputs")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("bench", parents=[common], help="encryption throughput")
    p.add_argument("--key")
    p.add_argument("--resolution", type=int, nargs="+", default=[256, 512])
    p.add_argument("--seconds", type=float, default=3.0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (UsageError, ConfigError, SpecError, CorruptKeyFile, DigestMismatch, LayoutError, ShapeError) as exc:
        field_name = getattr(exc, "field", None)
        print(f"error: {exc}" + (f" [field: {field_name}]" if field_name else ""), file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NumericFailure, OSError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
