#!/usr/bin/env python3
"""Generate a batch of synthetic scene sample files.

Usage: python scripts/make_dataset.py OUT_DIR [COUNT] [--config CFG]
"""
import argparse
import pathlib
import sys

from sscpipe.cli import main


def run() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("count", type=int, nargs="?", default=8)
    ap.add_argument("--config", default=None)
    ap.add_argument("--start-seed", type=int, default=0)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for seed in range(args.start_seed, args.start_seed + args.count):
        argv = ["gen-scene", "--seed", str(seed),
                "--out", str(args.out_dir / f"scene_{seed:04d}.sscs")]
        if args.config:
            argv += ["--config", args.config]
        rc = main(argv)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(run())
