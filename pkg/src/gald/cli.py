"""``gald`` command line: verify, gradcheck, bench, train.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

Option precedence is command-line flag, then ``--config`` file (flat
``key = value`` lines, ``#`` comments, keys spelled like the long flags
with ``-`` or ``_``), then built-in defaults.  ``--out`` falls back to the
``GALD_OUT_DIR`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .bench_harness import BenchConfig, run_sweep, write_csv, write_summary
from .ga_heads import GA_KINDS, GaConfig
from .ld_modules import ARRANGEMENTS, BORDER_MODES, LDV1_STRATEGIES, GaldConfig, Ldv1Config, Ldv2Config
from .toy_pipeline import TrainConfig, train_toy
from .verification import CHECKS, GRAD_OPS, run_checks, run_gradcheck


class ConfigError(Exception):
    """Invalid option value or combination."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in str(text).split(",") if v.strip()]


# name -> (type, default); flags are spelled --name with '_' -> '-'
COMMON = {"seed": (int, 42), "format": (str, "text")}
OPTIONS = {
    "verify": {
        **COMMON, "check": (_str_list, []), "border_mode": (str, "masked_softmax"), "n_seeds": (int, 20),
    },
    "gradcheck": {
        **COMMON, "dims": (_int_list, [1, 2, 4, 4]), "ga": (str, "aspp"), "ld": (str, "v2"),
        "arrangement": (str, "gald"), "k": (int, 3), "r": (int, 1), "border_mode": (str, "masked_softmax"),
        "strategy": (str, "depthwise_conv"), "tol": (float, 1e-6),
    },
    "bench": {
        **COMMON, "methods": (_str_list, ["nonlocal", "ldv2"]), "sizes": (_int_list, [8, 16, 32, 64]),
        "c_reduced": (int, 16), "k": (int, 5), "r": (int, 1), "repeats": (int, 5), "out": (str, None),
    },
    "train": {
        **COMMON, "epochs": (int, 10), "lr": (float, 0.05), "batch": (int, 8), "topk": (float, 0.25),
        "samples": (int, 200), "size": (int, 64), "channels": (int, 8), "eval_samples": (int, 40),
        "ga": (str, "aspp"), "ld": (str, "v2"), "arrangement": (str, "gald"), "k": (int, 5), "r": (int, 3),
        "d": (int, 8), "strategy": (str, "depthwise_conv"), "border_mode": (str, "masked_softmax"),
        "reduced_channels": (int, 8), "out": (str, None),
    },
}
CHOICES = {
    "border_mode": BORDER_MODES, "ga": GA_KINDS, "arrangement": ARRANGEMENTS,
    "strategy": LDV1_STRATEGIES, "format": ("text", "json"),
}
LD_CHOICES = ("none", "v1", "v2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gald", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "verify": "run the oracle-equivalence checks",
        "gradcheck": "finite-difference check of one registered op",
        "bench": "MAC counts and wall-clock scaling of dense vs. local attention",
        "train": "train the toy segmentation model and report metrics",
    }
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=helps[cmd])
        if cmd == "gradcheck":
            p.add_argument("op", help=f"one of: {', '.join(GRAD_OPS)}")
        p.add_argument("--config", default=None, help="key=value file; flags override it")
        for name in opts:
            if name in ("dims", "sizes", "methods", "check"):
                p.add_argument("--" + name.replace("_", "-"), default=None, metavar="A,B,...")
            else:
                p.add_argument("--" + name.replace("_", "-"), default=None)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge flags, config file and defaults; validate every field."""
    opts = OPTIONS[command]
    file_values = read_config_file(args.config) if args.config else {}
    unknown = sorted(set(file_values) - set(opts))
    if unknown:
        raise ConfigError(f"unknown key(s) in config file for '{command}': {', '.join(unknown)}")
    cfg = {}
    for name, (conv, default) in opts.items():
        raw = getattr(args, name)
        if raw is None:
            raw = file_values.get(name)
        if raw is None:
            cfg[name] = default
            continue
        try:
            cfg[name] = conv(raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"--{name.replace('_', '-')}: {exc}") from None
        if name in CHOICES and cfg[name] not in CHOICES[name]:
            raise ConfigError(f"--{name.replace('_', '-')} must be one of {', '.join(CHOICES[name])}")
    if "ld" in cfg and cfg["ld"] not in LD_CHOICES:
        raise ConfigError(f"--ld must be one of {', '.join(LD_CHOICES)}")
    if "out" in cfg and cfg["out"] is None:
        cfg["out"] = os.environ.get("GALD_OUT_DIR")
    return cfg


def _out_dir(path: Optional[str]) -> Path:
    if not path:
        raise ConfigError("no output directory: pass --out or set GALD_OUT_DIR")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_verify(cfg: dict) -> int:
    unknown = [c for c in cfg["check"] if c not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {', '.join(unknown)}; available: {', '.join(CHECKS)}")
    if cfg["n_seeds"] < 1:
        raise ConfigError("--n-seeds must be positive")
    results = run_checks(cfg["check"] or None, seed=cfg["seed"], n_seeds=cfg["n_seeds"],
                         border_mode=cfg["border_mode"])
    if cfg["format"] == "json":
        print(json.dumps({"seed": cfg["seed"], "results": [
            {"check": r.name, "status": r.status, "detail": r.detail} for r in results]}, indent=2))
    else:
        for r in results:
            print(f"{r.status:5s}  {r.name}: {r.detail}")
    return 0 if all(r.ok for r in results) else 1


def cmd_gradcheck(cfg: dict, op: str) -> int:
    if op not in GRAD_OPS:
        raise ConfigError(f"unregistered op {op!r}; registered: {', '.join(GRAD_OPS)}")
    dims = cfg["dims"]
    if len(dims) != 4 or min(dims) < 1:
        raise ConfigError("--dims must be four positive integers n,c,h,w")
    if cfg["ld"] == "v2" and cfg["k"] % 2 == 0:
        raise ConfigError("--k must be odd")
    try:
        report = run_gradcheck(op, dims, cfg["seed"], tol=cfg["tol"], ga=cfg["ga"], ld=cfg["ld"],
                               arrangement=cfg["arrangement"], k=cfg["k"], r=cfg["r"],
                               border_mode=cfg["border_mode"], strategy=cfg["strategy"])
    except ValueError as exc:
        raise ConfigError(f"{op} with dims {dims}: {exc}") from None
    if cfg["format"] == "json":
        print(json.dumps({"op": op, "seed": cfg["seed"], "tol": report.tol, "passed": report.passed,
                          "max_rel_error": {k: v.max_rel_error for k, v in report.checks.items()}}, indent=2))
    else:
        print(f"gradcheck {op} dims={','.join(map(str, dims))} seed={cfg['seed']} tol={report.tol:g}")
        for line in report.lines():
            print("  " + line)
        print("PASS" if report.passed else f"FAIL: {', '.join(report.failures())}")
    return 0 if report.passed else 1


def cmd_bench(cfg: dict) -> int:
    out = _out_dir(cfg["out"])
    sizes = sorted(cfg["sizes"])
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes must be positive integers")
    bench_cfg = BenchConfig(c_reduced=cfg["c_reduced"], k=cfg["k"], r=cfg["r"], seed=cfg["seed"],
                            repeats=cfg["repeats"])
    try:
        records = run_sweep(cfg["methods"], [(s, s) for s in sizes], bench_cfg)
    except (ValueError, MemoryError) as exc:
        raise ConfigError(str(exc)) from None
    write_csv(records, out / "bench.csv")
    summary = write_summary(records, out / "bench_summary.json", seed=cfg["seed"], c_reduced=cfg["c_reduced"],
                            k=cfg["k"], r=cfg["r"])
    print(f"{'method':10s} {'h':>5s} {'w':>5s} {'mac_count':>14s} {'wall_ms':>10s}")
    for r in records:
        print(f"{r.method:10s} {r.h:5d} {r.w:5d} {r.mac_count:14d} {r.wall_ns / 1e6:10.3f}")
    for method, entry in summary["methods"].items():
        if "fit" in entry:
            fit = entry["fit"]
            print(f"{method}: t ~ N^{fit['exponent']:.3f} (R^2 = {fit['r_squared']:.3f})")
    print(f"wrote {out / 'bench.csv'} and {out / 'bench_summary.json'}")
    return 0


def train_config(cfg: dict) -> TrainConfig:
    ga = GaConfig(kind=cfg["ga"], reduced_channels=cfg["reduced_channels"])
    if cfg["ld"] == "none":
        ld = None
    elif cfg["ld"] == "v1":
        ld = Ldv1Config(downsample_ratio=cfg["d"], strategy=cfg["strategy"])
    else:
        ld = Ldv2Config(kernel=cfg["k"], dilation=cfg["r"], reduced_channels=cfg["reduced_channels"],
                        border_mode=cfg["border_mode"])
    return TrainConfig(
        seed=cfg["seed"], epochs=cfg["epochs"], lr=cfg["lr"], batch=cfg["batch"], ohem_topk_fraction=cfg["topk"],
        head=GaldConfig(ga=ga, ld=ld, arrangement=cfg["arrangement"]), samples=cfg["samples"], size=cfg["size"],
        channels=cfg["channels"], eval_samples=cfg["eval_samples"],
    )


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg["out"])
    try:
        tcfg = train_config(cfg)
        report = train_toy(tcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    path = out / "train_report.json"
    path.write_text(report.to_json() + "\n")
    print(f"head {report.head}  seed {report.seed}  steps {report.steps}  status {report.status}")
    print(f"mIoU {report.final_miou:.4f}")
    print("boundary F  " + "  ".join(f"@{s}px {v:.4f}" for s, v in report.boundary_f.items()))
    print(f"wrote {path}")
    return 0 if report.status == "ok" else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    try:
        cfg = resolve(args.command, args)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.op)
        if args.command == "bench":
            return cmd_bench(cfg)
        return cmd_train(cfg)
    except ConfigError as exc:
        print(f"gald {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
