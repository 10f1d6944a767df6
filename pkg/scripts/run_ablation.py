#!/usr/bin/env python3
"""Run the 3x3 depth-route x fusion-route ablation grid and print the table.

Set SSC_THREADS=N to train cells in parallel. Pass --steps/--scenes to trade
fidelity for speed, e.g. `python scripts/run_ablation.py --steps 50`.
"""
import sys

from sscpipe.cli import main

if __name__ == "__main__":
    sys.exit(main(["ablate", *sys.argv[1:]]))
