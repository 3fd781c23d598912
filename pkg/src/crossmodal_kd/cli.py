"""Command-line entry point.

Subcommands: train, distill, eval, render, gradcheck, synth.  Every RunConfig
field is also a kebab-case flag (``--seq-len 96``, ``--fixed-weights fd=0,cd=0``).
Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import List, Optional

from .config import SECTIONS, ConfigError, load_config
from .models import CheckpointError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI-style config file")
    for sec, cls in SECTIONS.items():
        g = p.add_argument_group(f"[{sec}]")
        for f in dataclasses.fields(cls):
            # values stay strings here; load_config does the typed coercion
            g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg__{sec}__{f.name}", default=None,
                           metavar=str(f.type).upper())


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="crossmodal-kd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, help_ in (("train", "train the teacher alone"),
                        ("distill", "joint teacher/student training under the distillation objective"),
                        ("eval", "score a checkpoint on the test split (or a zero-shot target)")):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        if name == "distill":
            p.add_argument("--no-kd", action="store_true", help="student-only baseline")

    p = sub.add_parser("render", help="write the rendered image of one window as PGM files")
    _add_config_flags(p)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--out", default="render/window.pgm")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable piece")
    _add_config_flags(p)
    p.add_argument("--inject-fault", default=None, metavar="OP",
                   help="corrupt the backward rule of OP (negative control)")
    p.add_argument("--only", nargs="*", default=None)

    p = sub.add_parser("synth", help="write a synthetic series as CSV")
    p.add_argument("--kind", default="sine_mix", choices=("sine_mix", "trend_sine", "noise"))
    p.add_argument("--length", type=int, default=4000)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--periodicity", type=int, default=24)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return ap


def _overrides(ns: argparse.Namespace) -> dict:
    out = {}
    for key, val in vars(ns).items():
        if key.startswith("cfg__") and val is not None:
            _, sec, field = key.split("__", 2)
            out[f"{sec}.{field}"] = val
    return out


_MODE_FOR = {"train": "train_teacher", "distill": "distill", "eval": "eval"}


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(ns)
    except (ConfigError, CheckpointError, FileNotFoundError, IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(ns: argparse.Namespace) -> int:
    from . import trainer
    from .series import save_csv, synth_generate

    if ns.command == "synth":
        s = synth_generate(ns.kind, ns.length, ns.channels, ns.periodicity, ns.seed, ns.noise)
        save_csv(s, ns.out)
        print(f"wrote {ns.out} ({s.length} x {s.n_channels})")
        return EXIT_OK

    ov = _overrides(ns)
    if ns.command in _MODE_FOR:
        ov.setdefault("train.mode", _MODE_FOR[ns.command])
    cfg = load_config(ns.config, ov)
    print(cfg.dumps())

    if ns.command == "gradcheck":
        from .checks import run_suite
        results = run_suite(cfg.train.seed, fault=ns.inject_fault, only=ns.only)
        for r in results:
            print(r.line())
        failed = [r.name for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} passed")
        return EXIT_RUNTIME if failed else EXIT_OK

    if ns.command == "render":
        out = trainer.run_render(cfg, ns.window, ns.out)
        for p in out["paths"]:
            print(p)
        return EXIT_OK

    mode = cfg.train.mode
    if ns.command == "train":
        rec = trainer.run_train(cfg)
    elif ns.command == "distill":
        rec = trainer.run_distill(cfg, use_kd=False if ns.no_kd else None)
    else:
        rec = trainer.run_eval(cfg)
        print({k: round(v, 6) for k, v in rec["metrics"].items()})
        return EXIT_OK
    print(f"{mode}: best epoch {rec['best_epoch']}, test {({k: round(v, 6) for k, v in rec['test'].items()})}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
