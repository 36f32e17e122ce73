"""Command-line operator surface.

Commands: synthdata, features, train, synth, eval, gradcheck.  Every
command is deterministic given (config, seed), writes a machine-readable
result file, and appends a human-readable log under <out_dir>/logs/.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

from . import dataio
from .dataio import Corpus, FormatError, MelNormStats, load_uti, preprocess_clip, save_wav
from .dsp import DspConfig, MelSpectrogram, griffin_lim, invert_mel
from .gradcheck import run_gradcheck
from .metrics import evaluate_corpus
from .models import (
    CheckpointError,
    DiscriminatorArch,
    Generator,
    GeneratorArch,
    load_params,
    predict_mel,
    save_params,
)
from .training import NumericError, TrainConfig, load_split_data, train

log = logging.getLogger("uti2speech")


class ConfigError(ValueError):
    """Run configuration is malformed."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

DEFAULT_CONFIG = {
    "schema_version": 1,
    "seed": 0,
    "out_dir": "runs/default",
    "corpus": {"root": "corpus"},
    "dsp": {
        "sample_rate": 22050,
        "win_length": 1024,
        "fft_size": 1024,
        "hop": 269,
        "n_mels": 80,
        "fmin": 0.0,
        "fmax": 8000.0,
        "log_floor": 1e-10,
        "griffin_lim_iters": 60,
    },
    "model": {
        "generator": {
            "input_frames": 25,
            "input_height": 64,
            "input_width": 128,
            "conv_filters": [16, 32, 64],
            "conv_kernels": [[5, 5, 5], [3, 3, 3], [3, 3, 3]],
            "conv_strides": [[5, 2, 2], [1, 2, 2], [1, 2, 2]],
            "pool": 2,
            "hidden": 500,
            "out_frames": 5,
            "n_mels": 80,
        },
        "discriminator": {
            "conv_filters": [64, 128, 256, 512, 1],
            "bn_position": "post",
        },
    },
    "train": {
        "loss_mode": "mse",
        "mse_weight": 0.75,
        "adv_weight": 0.25,
        "lr_g": 2e-4,
        "lr_d": 2e-4,
        "adam_beta1": 0.5,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "batch_size": 32,
        "max_epochs": 100,
        "patience": 5,
        "adv_form": "hinge",
    },
    "metrics": {"eval_batch_size": 32, "mcd_coeffs": 12},
}


def _merge_validate(blob: dict, defaults: dict, path: str = "") -> dict:
    """Defaults overlaid with blob; unknown keys are rejected."""
    merged = copy.deepcopy(defaults)
    for key, value in blob.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            merged[key] = _merge_validate(value, defaults[key], path + key + ".")
        else:
            merged[key] = value
    return merged


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = _merge_validate(blob, DEFAULT_CONFIG)
    if cfg["schema_version"] != 1:
        raise ConfigError(f"unsupported schema_version {cfg['schema_version']}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    for key, value in cfg["dsp"].items():
        if key not in ("fmin",) and not value > 0:
            raise ConfigError(f"dsp.{key} must be positive")
    return cfg


def dsp_config(cfg: dict) -> DspConfig:
    return DspConfig(**cfg["dsp"])


def generator_arch(cfg: dict) -> GeneratorArch:
    g = cfg["model"]["generator"]
    return GeneratorArch(
        input_frames=g["input_frames"],
        input_height=g["input_height"],
        input_width=g["input_width"],
        conv_filters=tuple(g["conv_filters"]),
        conv_kernels=tuple(tuple(k) for k in g["conv_kernels"]),
        conv_strides=tuple(tuple(s) for s in g["conv_strides"]),
        pool=g["pool"],
        hidden=g["hidden"],
        out_frames=g["out_frames"],
        n_mels=g["n_mels"],
    )


def discriminator_arch(cfg: dict) -> DiscriminatorArch:
    d = cfg["model"]["discriminator"]
    return DiscriminatorArch(
        conv_filters=tuple(d["conv_filters"]), bn_position=d["bn_position"]
    )


def train_config(cfg: dict, loss_override: str | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    if loss_override:
        t["loss_mode"] = loss_override
    tc = TrainConfig(seed=cfg["seed"], **t)
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return tc


def _setup_logging(out_dir: Path | None, command: str) -> None:
    level = getattr(logging, os.environ.get("UTI2SPEECH_LOG", "INFO").upper(), logging.INFO)
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if out_dir is not None:
        logs = out_dir / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(logs / f"{command}.log"))
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(message)s",
        handlers=handlers,
        force=True,
    )


def _write_result(out_dir: Path, name: str, payload: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(payload, indent=1))
    return path


def _save_resolved_config(cfg: dict) -> None:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg, indent=1))


def _require_corpus(cfg: dict) -> Corpus:
    root = Path(cfg["corpus"]["root"])
    if not root.exists():
        raise FileNotFoundError(f"corpus root {root} does not exist")
    return Corpus.load(root)


# ---------------------------------------------------------------------------
# Commands


def cmd_synthdata(args) -> int:
    if args.utts < 1:
        raise ConfigError("--utts must be at least 1")
    if args.frames < 1:
        raise ConfigError("--frames must be at least 1")
    out = Path(args.out)
    _setup_logging(out, "synthdata")
    log.info("synthesizing %d utterances x %d frames (seed %d)", args.utts, args.frames, args.seed)
    dataio.write_corpus(out, seed=args.seed, n_utts=args.utts, frames_per_utt=args.frames)
    log.info("manifest written to %s", out / Corpus.MANIFEST)
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(cfg["out_dir"])
    _setup_logging(out_dir, "features")
    _save_resolved_config(cfg)
    corpus = _require_corpus(cfg)
    stats = dataio.extract_features(corpus, dsp_config(cfg))
    log.info("wrote %d MEL1 files and %s", len(corpus.utterances), corpus.mel_stats_path())
    _write_result(
        out_dir,
        "features_result.json",
        {
            "n_utterances": len(corpus.utterances),
            "stats_path": str(corpus.mel_stats_path()),
            "min_std": float(stats.std.min()),
        },
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(cfg["out_dir"])
    _setup_logging(out_dir, "train")
    _save_resolved_config(cfg)
    corpus = _require_corpus(cfg)
    stats = MelNormStats.load(corpus.mel_stats_path())
    tc = train_config(cfg, args.loss)
    gen_arch = generator_arch(cfg)
    disc_arch = discriminator_arch(cfg)
    log.info("loading splits")
    train_utts = load_split_data(corpus, "train", stats)
    dev_utts = load_split_data(corpus, "dev", stats)
    log.info("training (%s mode, seed %d)", tc.loss_mode, tc.seed)
    best_params, train_log = train(train_utts, dev_utts, tc, gen_arch, disc_arch)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt = ckpt_dir / f"gen_{tc.loss_mode}.ckp1"
    save_params(best_params, gen_arch.descriptor(), ckpt)
    logs_dir = out_dir / "logs"
    logs_dir.mkdir(exist_ok=True)
    (logs_dir / f"train_{tc.loss_mode}.csv").write_text(train_log.to_csv())
    (logs_dir / f"train_{tc.loss_mode}.json").write_text(train_log.to_json())
    best = min(r.dev_mse for r in train_log.records)
    log.info("best dev MSE %.4f at epoch %d", best, train_log.best_epoch)
    _write_result(
        out_dir,
        f"train_{tc.loss_mode}_result.json",
        {
            "checkpoint": str(ckpt),
            "best_epoch": train_log.best_epoch,
            "best_dev_mse": best,
            "epochs_run": len(train_log.records),
        },
    )
    return EXIT_OK


def _load_generator(cfg: dict, ckpt_path) -> Generator:
    gen_arch = generator_arch(cfg)
    params, _ = load_params(ckpt_path, gen_arch.descriptor(), gen_arch.param_shapes())
    return Generator(gen_arch, params)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(cfg["out_dir"])
    _setup_logging(out_dir, "synth")
    corpus = _require_corpus(cfg)
    stats = MelNormStats.load(corpus.mel_stats_path())
    gen = _load_generator(cfg, args.ckpt)
    record = next((u for u in corpus.utterances if u["id"] == args.utt), None)
    if record is None:
        raise FileNotFoundError(f"utterance {args.utt!r} not in the corpus manifest")
    dcfg = dsp_config(cfg)
    clip = preprocess_clip(load_uti(corpus.path(record, "uti")))
    pred_std = predict_mel(gen, clip.frames, batch_size=cfg["metrics"]["eval_batch_size"])
    mel = MelSpectrogram(pred_std * stats.std + stats.mean, dcfg.frame_rate, "raw")
    wav = griffin_lim(invert_mel(mel, dcfg), dcfg)
    synth_dir = out_dir / "synth"
    synth_dir.mkdir(parents=True, exist_ok=True)
    wav_path = synth_dir / f"{args.utt}.wav"
    save_wav(wav, wav_path)
    log.info("wrote %s (%.2f s)", wav_path, wav.duration)
    _write_result(
        out_dir,
        f"synth_{args.utt}_result.json",
        {"utterance": args.utt, "wav": str(wav_path), "samples": len(wav)},
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(cfg["out_dir"])
    _setup_logging(out_dir, "eval")
    _save_resolved_config(cfg)
    corpus = _require_corpus(cfg)
    stats = MelNormStats.load(corpus.mel_stats_path())
    gen = _load_generator(cfg, args.ckpt)
    method = Path(args.ckpt).stem.replace("gen_", "")
    report = evaluate_corpus(
        gen,
        corpus,
        args.split,
        stats,
        dsp_config(cfg),
        method=method,
        batch_size=cfg["metrics"]["eval_batch_size"],
        mcd_coeffs=cfg["metrics"]["mcd_coeffs"],
    )
    reports = out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    json_path = reports / f"{args.split}_{method}.json"
    csv_path = reports / f"{args.split}_{method}.csv"
    json_path.write_text(report.to_json())
    csv_path.write_text(report.to_csv())
    log.info("report written to %s", json_path)
    for key, value in report.means.items():
        if value is not None:
            log.info("mean %s = %.4f", key, value)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(cfg["out_dir"])
    _setup_logging(out_dir, "gradcheck")
    result = run_gradcheck(corrupt=args.corrupt_backward)
    payload = {
        "n_checked": result.n_checked,
        "max_rel_error": result.max_rel_error,
        "worst_param": result.worst_param,
        "per_loss": result.per_loss,
        "seconds": result.seconds,
        "passed": result.passed(),
    }
    _write_result(out_dir, "gradcheck_result.json", payload)
    for loss_name, err in result.per_loss.items():
        log.info("%s: max relative error %.3e", loss_name, err)
    if not result.passed():
        log.error("gradient check FAILED: %.3e at %s", result.max_rel_error, result.worst_param)
        return EXIT_GRADCHECK
    log.info("gradient check passed: %d gradients within 1e-4 (%.1f s)", result.n_checked, result.seconds)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uti2speech",
        description="Adversarially trained ultrasound-to-mel synthesis pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthdata", help="generate the synthetic paired corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--utts", type=int, required=True)
    p.add_argument("--frames", type=int, default=64, help="frames per utterance")
    p.add_argument("--out", required=True, help="corpus directory")
    p.set_defaults(func=cmd_synthdata)

    p = sub.add_parser("features", help="extract MEL1 features and training stats")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train the generator (mse or gan mode)")
    p.add_argument("--config", required=True)
    p.add_argument("--loss", choices=("mse", "gan"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize one utterance to WAV")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--utt", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="objective evaluation of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("dev", "test"), required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of both backward paths")
    p.add_argument("--config", required=True)
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError, CheckpointError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
