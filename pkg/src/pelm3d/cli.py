"""Command-line front end.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__, experiments, pipeline
from .config import PRESETS, ConfigError, load_config
from .corpus import CorpusError
from .encoding import EncodingError
from .learning import RidgeError
from .optics import OpticsError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4

log = logging.getLogger("pelm3d")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int, help="top-level seed (fills any seed not set in the config)")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("--preset", choices=sorted(PRESETS), help="optics preset")
    common.add_argument("--bits", type=int, choices=(0, 8, 12), help="detector bit depth (0 = full precision)")
    common.add_argument("--mode", choices=("angular-spectrum", "random-unitary"), help="propagation model")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pelm3d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pelm3d {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="corpus -> vocabulary, tf-idf and phase-mask cache")
    sub.add_parser("simulate", parents=[common], help="phase masks -> optical feature matrix")
    sub.add_parser("train", parents=[common], help="fit and evaluate the ridge readout")
    sub.add_parser("sweep", parents=[common], help="double-descent grid and configured studies")
    sub.add_parser("diagnose", parents=[common], help="inter-plane intensity correlation")
    cap = sub.add_parser("capacity", parents=[common], help="network capacity L x M")
    cap.add_argument("--L", type=int, dest="inputs", help="input modes (default: from the prepared run)")
    cap.add_argument("--side", type=int, help="input side; L = side**2")
    cap.add_argument("--M", type=int, dest="channels", help="output channels (default: from the simulated run)")
    return p


def _config(args):
    overrides = {
        "seed": args.seed,
        "output_dir": args.output_dir,
        "optics.preset": args.preset,
        "optics.bits": args.bits,
        "optics.mode": args.mode,
    }
    if args.config is None:
        raise ConfigError("--config is required for this command")
    return load_config(args.config, overrides)


def _capacity(args) -> int:
    L = args.inputs
    if args.side is not None:
        L = args.side * args.side
    M = args.channels
    if L is None or M is None:
        cfg = _config(args)
        if L is None:
            L = pipeline.load_prepared(cfg)[4]["side"] ** 2
        if M is None:
            M = pipeline.load_features(cfg).shape[1]
    rep = experiments.capacity(L, M)
    print(f"capacity L x M = {rep.L:,} x {rep.M_total:,} = {rep.capacity:,}")
    return EXIT_OK


def _run(args) -> int:
    if args.command == "capacity":
        return _capacity(args)
    cfg = _config(args)
    if args.command == "prepare":
        fp = pipeline.prepare(cfg)
        print("prepare: up-to-date" if fp == "up-to-date" else f"prepare: done ({fp[:12]})")
    elif args.command == "simulate":
        fp = pipeline.simulate(cfg)
        print("simulate: up-to-date" if fp == "up-to-date" else f"simulate: done ({fp[:12]})")
    elif args.command == "train":
        r = pipeline.train(cfg)
        print(f"train: M={r.M} n_train={r.n_train} regime={r.regime} "
              f"train_accuracy={r.train_accuracy:.4f} test_accuracy={r.test_accuracy:.4f}")
    elif args.command == "sweep":
        out = pipeline.sweep(cfg)
        for row in out["result"].summary():
            print(f"n_train={row['n_train']:>6} M={row['M']:>7} train={row['train_mean']:.4f} "
                  f"test={row['test_mean']:.4f}+-{row['test_std']:.4f}")
        for n, m in out["dips"].items():
            print(f"dip n_train={n}: " + ("absent" if m is None else f"M*={m}"))
        if "split_study" in out:
            print("smallest sufficient fraction:", json.dumps(out["split_study"]["smallest_sufficient_fraction"]))
        if "saturation" in out:
            print("saturation:", json.dumps(out["saturation"]))
    elif args.command == "diagnose":
        rep = pipeline.diagnose(cfg)
        with np.printoptions(precision=4, suppress=True):
            print("mean |rho| between planes:")
            print(rep.mean_abs)
        print(f"max off-diagonal |rho| = {rep.max_off_diagonal():.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.ValidationFailure, CorpusError, EncodingError, OpticsError, RidgeError,
            experiments.ExperimentError, ValueError) as e:
        print(f"validation failure: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except KeyboardInterrupt:
        print("interrupted; files ending in .partial are incomplete and invalid", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
