#!/usr/bin/env python3
"""
Command line entry point.

    python run_experiment.py dist --config configs/dist_circle_flat.json --seed 42
    python run_experiment.py selftest
"""

import sys

from api.cli import cli_main

if __name__ == "__main__":
    sys.exit(cli_main())
