#!/usr/bin/env python3
"""Train the default desk-scale pipeline on procedural scenes.

Equivalent to `sscpipe train-toy`; kept as a script for quick editing of
hyperparameters during experiments.
"""
import sys

from sscpipe.cli import main

if __name__ == "__main__":
    sys.exit(main(["train-toy", *sys.argv[1:]]))
