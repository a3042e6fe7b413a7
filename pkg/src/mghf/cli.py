"""Command-line entry point: ``mghf {train,score,inspect,gradcheck,params}``.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck, pruning
from .config import (
    FORMAT_VERSION,
    AppConfig,
    ConfigError,
    DfeConfig,
    flatten,
    load_config,
    with_overrides,
)
from .dfe import WeightsFormatError, dfe_extract, dfe_param_report, dumps_weights, init_model, load_weights
from .images import ImageFormatError, load_image
from .numerics import NumericalError, ShapeError
from .objective import embedding_head_for, mghf_c, score_n
from . import trainer

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mghf")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if not math.isfinite(x):
            return "null"
        text = format(x, ".17g")
        return text if any(ch in text for ch in ".en") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_report(obj) -> str:
    """Deterministic JSON: insertion-ordered keys, floats with 17 significant digits."""
    return _fmt(obj) + "\n"


def _config_from_args(args, flag_overrides: dict[str, str]) -> AppConfig:
    try:
        cfg = load_config(args.config)
        sets = {}
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            sets[k.strip()] = v.strip()
        sets.update({k: str(v) for k, v in flag_overrides.items() if v is not None})
        return with_overrides(cfg, sets)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_IO) from None
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_USAGE) from None


def _config_dump(cfg: AppConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in flatten(cfg).items()}


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None


def _load_weights(path):
    try:
        return load_weights(path)
    except OSError as exc:
        raise CliError(f"cannot read weights: {exc}", EXIT_IO) from None
    except (WeightsFormatError, KeyError, ValueError) as exc:
        raise CliError(f"bad weights file {path}: {exc}", EXIT_IO) from None


def _load_image(path):
    try:
        return load_image(path)
    except OSError as exc:
        raise CliError(f"cannot read image: {exc}", EXIT_IO) from None
    except ImageFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None


def cmd_train(args) -> int:
    cfg = _config_from_args(args, {
        "train.seed": args.seed, "train.total_iters": args.iters, "train.classes": args.classes,
        "train.image_size": args.image_size,
    })
    out = Path(args.out)
    curve_path = Path(args.curve) if args.curve else out.with_suffix(".csv")
    for p in (out, curve_path):
        if not p.parent.exists():
            raise CliError(f"output directory {p.parent} does not exist", EXIT_IO)
    tc = cfg.train
    model, head, data = trainer.setup(cfg.dfe, tc)
    try:
        result = trainer.train(model, head, data, tc, log_every=args.log_every)
    except NumericalError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "loss", "lr"])
    for it, loss, lr in result.curve:
        writer.writerow([it, format(loss, ".17g"), format(lr, ".17g")])
    try:
        out.write_bytes(dumps_weights(result.model))
        curve_path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write outputs: {exc}", EXIT_IO) from None
    heldout = trainer.ToyDataset(tc.classes, tc.image_size, tc.seed, tc.noise, split=1)
    ce, acc = trainer.evaluate(result.model, result.head, heldout, count=64)
    print(f"trained {tc.total_iters} iterations; held-out cross-entropy {ce:.4f}, accuracy {acc:.3f}")
    print(f"weights -> {out}\ncurve -> {curve_path}")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config_from_args(args, {"mghf.use_lip": "false" if args.no_lip else None})
    model = _load_weights(args.weights)
    x_gt = _load_image(args.gt)
    x_sr = _load_image(args.sr)
    if x_gt.shape != x_sr.shape:
        raise CliError(
            f"image sizes differ: gt is {x_gt.shape[2]}x{x_gt.shape[1]}, sr is {x_sr.shape[2]}x{x_sr.shape[1]}",
            EXIT_IO)
    mc = cfg.mghf
    t0 = time.perf_counter()
    try:
        if args.mode == "n":
            report, _ = score_n(model, x_gt, x_sr)
        else:
            report, _ = mghf_c(model, x_gt, x_sr, mc, embedding_head_for(mc) if mc.use_lip else None)
    except NumericalError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    except (ValueError, ShapeError) as exc:
        raise CliError(str(exc), EXIT_IO) from None
    total_ms = (time.perf_counter() - t0) * 1e3
    mode_c = args.mode == "c"
    doc = {
        "format_version": FORMAT_VERSION,
        "mode": args.mode,
        "mghf_n": report.mghf_n,
        "csc": dict(report.csc) if mode_c else None,
        "lip": report.lip if mode_c else None,
        "mghf_c": report.mghf_c if mode_c else None,
        "lip_converged": report.lip_converged if mode_c else None,
        "lip_max_residual": report.lip_residual if mode_c else None,
        "gammas": list(mc.gammas),
        "betas": [mc.csc.beta1, mc.csc.beta2, mc.csc.beta3],
        "pruning": report.profile.to_dict() if mode_c else None,
        "image": {"h": int(x_gt.shape[1]), "w": int(x_gt.shape[2])},
        "n_channels": model.n_channels,
        "durations_ms": ({**report.durations_ms, "total": total_ms} if args.timings else None),
        "config": _config_dump(cfg),
    }
    _write(args.out, dumps_report(doc))
    if mode_c and report.lip_converged is False and not args.allow_unconverged:
        raise CliError(
            f"Sinkhorn did not converge (max marginal residual {report.lip_residual:.3e}); "
            "pass --allow-unconverged to accept", EXIT_NUMERIC)
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _config_from_args(args, {"mghf.pruning.bins": args.bins})
    model = _load_weights(args.weights)
    image = _load_image(args.image)
    feats = dfe_extract(model, image)
    pc = cfg.mghf.pruning
    try:
        profile = pruning.build_profile(feats, feats, pc)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    weight_of = dict(zip(profile.selected, profile.weights))
    maps = [
        {
            "index": j,
            "h_norm": float(profile.h_norm_g[j]),
            "importance": float(profile.combined[j]),
            "selected": j in weight_of,
            "weight": float(weight_of[j]) if j in weight_of else None,
        }
        for j in range(len(feats))
    ]
    doc = {
        "format_version": FORMAT_VERSION,
        "n_maps": len(feats),
        "bins": pc.bins,
        "m": profile.m,
        "alpha": pc.alpha,
        "gamma": pc.gamma,
        "maps": maps,
        "config": _config_dump(cfg),
    }
    _write(args.out, dumps_report(doc))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_matrix(seed=args.seed, points=args.points, tol=args.tol)
    print(gradcheck.format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        names = sorted({r.name for r in failed})
        print(f"FAILED: {len(failed)} of {len(results)} checks ({', '.join(names)})", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_params(args) -> int:
    if args.weights:
        model = _load_weights(args.weights)
    else:
        cfg = _config_from_args(args, {})
        dcfg = DfeConfig.reference() if args.reference else cfg.dfe
        model = init_model(dcfg)
    _write(None, dumps_report(dfe_param_report(model)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mghf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("train", help="pretrain the extractor on toy textures")
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--curve", help="training curve CSV (default: <out>.csv)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--log-every", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score an image pair")
    p.add_argument("--gt", required=True)
    p.add_argument("--sr", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--mode", choices=("n", "c"), default="c")
    p.add_argument("--no-lip", action="store_true")
    p.add_argument("--allow-unconverged", action="store_true")
    p.add_argument("--timings", action="store_true", help="include wall-clock durations (breaks byte determinism)")
    p.add_argument("--out", required=True, help="report path, or - for stdout")
    common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("inspect", help="per-map entropy and importance profile")
    p.add_argument("--image", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--bins", type=int)
    p.add_argument("--out", help="JSON path (default stdout)")
    common(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, help="single tolerance for every check")
    p.add_argument("--points", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter / MAC / size report of the extractor")
    p.add_argument("--reference", action="store_true", help="use the 128-channel, one-block configuration")
    p.add_argument("--weights")
    common(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mghf: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
