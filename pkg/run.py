#!/usr/bin/env python3
"""
Entry point script for the ridge-regularised jackknifed AR command line.

Usage:
    python run.py test --input data.csv --outcome y --endogenous x \
        --instruments 'z*' --beta0 1 --tests rjar
    python run.py simulate --k 190 --mu2 0 --reps 100 --seed 7
"""

import sys

from rjar.cli import run_cli

if __name__ == "__main__":
    sys.exit(run_cli(sys.argv[1:]))
