#!/usr/bin/env python3
"""
Sequential transport-map inference runs.

Usage:
    python seqtm.py simulate --config run.json
    python seqtm.py train-likelihoods --config run.json --workers 4
    python seqtm.py assimilate --config run.json
    python seqtm.py mcmc --config run.json --set mcmc.tm_run=runs/em31
    python seqtm.py diagnose --config run.json --set diagnose.step=1
"""

import sys

from app.cli import main

if __name__ == "__main__":
    sys.exit(main())
