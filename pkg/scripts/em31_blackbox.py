#!/usr/bin/env python3
"""
Reference black-box executable for the external model adapter.

Reads the header line "<protocol> <n_theta> <n_y> <n_noise> <n_nuisance>"
and one line "t theta... xi... eta..." per sample from stdin, and writes the
header back followed by one EM31 reading per sample. Samples with a
negative thickness are answered with "nan".

Usage:
    python scripts/em31_blackbox.py < batch.txt
"""

import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config import BLACKBOX_PROTOCOL_VERSION
from app.models import Em31Config, em31_sigma_eff


def answer(lines, cfg: Em31Config):
    header = lines[0].split()
    if not header or header[0] != BLACKBOX_PROTOCOL_VERSION:
        raise ValueError(f"expected protocol {BLACKBOX_PROTOCOL_VERSION}, got {lines[0].strip()!r}")
    n_theta, n_y, n_noise, n_nuisance = (int(v) for v in header[1:5])
    if n_theta != 1 or n_y != 1 or n_noise < 1:
        raise ValueError("this model takes one thickness and one noise value and returns one reading")

    out = [" ".join(header)]
    for line in lines[1:]:
        if not line.strip():
            continue
        values = [float(v) for v in line.split()]
        theta, xi = values[1], values[1 + n_theta]
        if theta < 0:
            out.append("nan")
            continue
        out.append(repr(float(em31_sigma_eff(theta, cfg) + cfg.sigma_eps * xi)))
    return out


def main():
    lines = sys.stdin.read().splitlines()
    if not lines:
        print("[ERROR] empty input", file=sys.stderr)
        sys.exit(1)
    try:
        out = answer(lines, Em31Config())
    except ValueError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        sys.exit(1)
    sys.stdout.write("\n".join(out) + "\n")


if __name__ == "__main__":
    main()
