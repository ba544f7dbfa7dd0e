"""Forward-time scaling of the scan and quadratic kernels at 22 channels.

    python scripts/scaling.py --out runs/scaling.csv
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from samba_kit.bench import SCALING_LENGTHS, emit_report, run_bench


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--lengths", default=",".join(map(str, SCALING_LENGTHS)))
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--memory", action="store_true", help="also record tracemalloc peaks")
    ap.add_argument("--out", default="runs/scaling.csv")
    args = ap.parse_args()
    lengths = tuple(int(v) for v in args.lengths.split(","))
    rep = run_bench(("scan", "quadratic"), lengths, channels=22, reps=args.reps, keep_outputs=True, measure_memory=args.memory)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    print(emit_report(rep, args.out))
    diffs = [np.abs(rep.outputs["scan", T] - rep.outputs["quadratic", T]).max() for T in lengths if ("quadratic", T) in rep.outputs]
    print(f"max |scan - quadratic| over lengths: {max(diffs):.2e}")


if __name__ == "__main__":
    main()
