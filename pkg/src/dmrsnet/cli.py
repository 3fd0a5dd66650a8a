"""Command-line entry point: gen, train, eval, predict, export."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiseConfig
from .evaluate import ESTIMATORS, EvaluationError, build_estimators, config_digest, evaluate
from .grid import DmrsPattern
from .pipeline import WeightsFormatError, build_model, config_path, dlr_forward, load_model, save_model, save_weights
from .refiner import RefineConfig
from .synth import DatasetFormatError, ParamRanges, make_dataset, read_dataset
from .train import TrainConfig, TrainingError, fit

log = logging.getLogger("dmrsnet")

# exit codes per error class
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_CONFIG = 5
EXIT_TRAINING = 6


class ConfigError(ValueError):
    pass


def _globals_parser(suppress: bool) -> argparse.ArgumentParser:
    # shared so global flags are accepted before or after the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d(0), help="master seed (default 0)")
    p.add_argument("--config", type=Path, default=d(None), help="JSON config file")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads (default 1)")
    p.add_argument("--strict-deterministic", action="store_true", default=d(False), help="single-threaded, bit-reproducible")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmrsnet", parents=[_globals_parser(False)], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_globals_parser(True)]

    g = sub.add_parser("gen", parents=common, help="synthesize a dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--snr-min", type=float, default=0.0)
    g.add_argument("--snr-max", type=float, default=20.0)
    g.add_argument("--snr-step", type=float, default=1.0)
    g.add_argument("--shadow-db", type=float, default=None, help="log-normal shadowing sigma in dB")
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", parents=common, help="train a model")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="weights path; a .json config sidecar is written next to it")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, dest="learning_rate")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--naos-bias", type=float)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--no-naos", action="store_true")
    t.add_argument("--no-csif", action="store_true")
    t.add_argument("--order", choices=("dlr", "refine_first"))
    t.add_argument("--dim", type=int, help="denoiser embedding width")
    t.add_argument("--ch", type=int, help="refiner base channels")
    t.add_argument("--metrics", type=Path, help="per-epoch CSV log")

    e = sub.add_parser("eval", parents=common, help="NMSE-by-SNR report")
    e.add_argument("--model", type=Path)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--estimators", default="dlr,linear", help=f"comma list from {','.join(ESTIMATORS)}")
    e.add_argument("--ablation-model", action="append", default=[], metavar="NAME=PATH", help="separate weights for an ablation estimator")
    e.add_argument("--report", type=Path, required=True)

    p = sub.add_parser("predict", parents=common, help="estimate one record's grid")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="raw little-endian float32 96x14x2 grid")

    x = sub.add_parser("export", parents=common, help="convert weights to 16-bit storage")
    x.add_argument("--model", type=Path, required=True)
    x.add_argument("--out", type=Path, required=True)
    x.add_argument("--dtype", choices=("f16", "f32"), default="f16")
    return parser


# --- config -----------------------------------------------------------------


def _section(cfg: dict, name: str, cls) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"config section {name!r} has unknown keys {sorted(unknown)}")
    return dict(sec)


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = set(cfg) - {"channel", "train", "denoise", "refine"}
    if unknown:
        raise ConfigError(f"config {path} has unknown sections {sorted(unknown)}")
    return cfg


def _tuples(d: dict, keys) -> dict:
    return {k: tuple(v) if k in keys and isinstance(v, list) else v for k, v in d.items()}


def channel_ranges(cfg: dict, args) -> ParamRanges:
    sec = _tuples(_section(cfg, "channel", ParamRanges), ("delay_spread_s", "ue_speed_kmh"))
    if getattr(args, "shadow_db", None) is not None:
        sec["shadow_sigma_db"] = args.shadow_db
    return ParamRanges(**sec)


def train_config(cfg: dict, args) -> TrainConfig:
    sec = _section(cfg, "train", TrainConfig)
    sec["seed"] = args.seed
    for key in ("epochs", "learning_rate", "batch_size", "naos_bias", "steps_per_epoch", "order"):
        value = getattr(args, key)
        if value is not None:
            sec[key] = value
    if args.no_naos:
        sec["naos_enabled"] = False
    if args.no_csif:
        sec["csif_enabled"] = False
    return TrainConfig(**sec)


def model_configs(cfg: dict, args) -> tuple[DenoiseConfig, RefineConfig]:
    d = _tuples(_section(cfg, "denoise", DenoiseConfig), ("windows", "heads"))
    r = _section(cfg, "refine", RefineConfig)
    if args.dim is not None:
        d["dim"] = args.dim
    if args.ch is not None:
        r["ch"] = args.ch
    return DenoiseConfig(**d), RefineConfig(**r)


def _snr_grid(lo: float, hi: float, step: float) -> list[float]:
    if step <= 0 or hi < lo:
        raise ConfigError("SNR range needs snr-min <= snr-max and a positive step")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [lo + i * step for i in range(n)]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} {path} not found")
    return path


# --- commands ---------------------------------------------------------------


def cmd_gen(args, cfg) -> None:
    workers = 1 if args.strict_deterministic else args.threads
    grid = _snr_grid(args.snr_min, args.snr_max, args.snr_step)
    ds = make_dataset(args.count, grid, channel_ranges(cfg, args), DmrsPattern(), args.seed, args.out, workers)
    log.info("wrote %d records over %d SNR points to %s", len(ds), len(grid), args.out)


def cmd_train(args, cfg) -> None:
    ds = read_dataset(_require(args.data, "dataset"))
    tc = train_config(cfg, args)
    dcfg, rcfg = model_configs(cfg, args)
    model = build_model(dcfg, rcfg, ds.pattern, seed=args.seed)
    if tc.epochs > 0:
        if args.metrics and args.metrics.exists():
            args.metrics.unlink()
        res = fit(model, ds, tc, metrics_path=args.metrics)
        log.info("best epoch %d, validation NMSE %.2f dB", res.best_epoch, res.best_val_nmse_db)
    save_model(model, args.out)
    sidecar = json.loads(config_path(args.out).read_text())
    sidecar["train"] = asdict(tc)
    config_path(args.out).write_text(json.dumps(sidecar, indent=2))
    log.info("wrote %s", args.out)


def _parse_ablation(items) -> dict[str, Path]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or name not in ESTIMATORS:
            raise ConfigError(f"--ablation-model expects NAME=PATH with NAME in {','.join(ESTIMATORS)}, got {item!r}")
        out[name] = Path(path)
    return out


def cmd_eval(args, cfg) -> None:
    names = [n.strip() for n in args.estimators.split(",") if n.strip()]
    ds = read_dataset(_require(args.data, "dataset"))
    needs_model = any(n != "linear" for n in names)
    model = None
    if args.model is not None:
        model = load_model(_require(args.model, "model"))
    elif needs_model:
        raise FileNotFoundError("model-backed estimators need --model")
    ablations = {name: load_model(_require(p, "model")) for name, p in _parse_ablation(args.ablation_model).items()}
    ests = build_estimators(names, model, ablations)
    digest = config_digest(
        {
            "estimators": names,
            "model": model.configs() if model else None,
            "seeds": ds.seeds.tobytes().hex()[:64],
            "records": len(ds),
        }
    )
    report = evaluate(ests, ds, digest)
    report.write_csv(args.report)
    log.info("wrote %d rows x %d estimators to %s", len(report.snr_db), len(names), args.report)


def cmd_predict(args, cfg) -> None:
    model = load_model(_require(args.model, "model"))
    ds = read_dataset(_require(args.data, "dataset"))
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} outside dataset of {len(ds)} records")
    out = dlr_forward(model, ds.dmrs[args.index : args.index + 1], ds.snr_db[args.index : args.index + 1])
    args.out.write_bytes(out[0].astype("<f4").tobytes())
    log.info("wrote grid for record %d to %s", args.index, args.out)


def cmd_export(args, cfg) -> None:
    from .pipeline import load_weights

    tree, _ = load_weights(_require(args.model, "model"))
    save_weights(tree, args.out, args.dtype)
    side = config_path(args.model)
    if side.exists():
        shutil.copyfile(side, config_path(args.out))
    log.info("exported %s as %s", args.out, args.dtype)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "export": cmd_export}


def _setup_runtime(args) -> None:
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if args.strict_deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(args.threads)


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _setup_runtime(args)
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, f"missing file: {exc}")
    except (DatasetFormatError, WeightsFormatError) as exc:
        return _fail(EXIT_FORMAT, f"bad file format: {exc}")
    except TrainingError as exc:
        return _fail(EXIT_TRAINING, f"training failed: {exc}")
    except (ConfigError, EvaluationError, ValueError, TypeError) as exc:
        return _fail(EXIT_CONFIG, f"invalid configuration: {exc}")
    return 0


def _fail(code: int, message: str) -> int:
    print(f"dmrsnet: error: {' '.join(message.split())}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run_cli())
