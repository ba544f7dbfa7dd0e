"""Overfit 8 synthetic trials and report ACMSE relative to step 1.

    python scripts/overfit.py --mask-ratio 0.0 --steps 300
"""
from __future__ import annotations

import argparse
import time

from samba_kit.data import SyntheticSpec, gen_synthetic, standardize
from samba_kit.model import ModelConfig, tiny_config
from samba_kit.training import MaskConfig, TrainConfig, pretrain


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--mask-ratio", type=float, default=0.0)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--max-lr", type=float, default=5e-4)
    ap.add_argument("--tiny", action="store_true", help="use the small test configuration")
    args = ap.parse_args()
    ts = standardize(gen_synthetic(SyntheticSpec(n_trials=4)))
    cfg = TrainConfig(epochs=args.steps, batch_size=8, val_fraction=0.0, checkpoint_every=0, eval_every=10**9,
                      max_lr=args.max_lr, initial_lr=args.max_lr / 2)
    t0 = time.perf_counter()
    res = pretrain(tiny_config() if args.tiny else ModelConfig(), cfg, MaskConfig(mask_ratio=args.mask_ratio), ts)
    a = res.step_acmse
    for s in range(0, len(a), max(1, len(a) // 10)):
        print(f"step {s + 1:5d}  acmse {a[s]:.3e}")
    print(f"final {a[-1]:.3e} = {100 * a[-1] / a[0]:.3f}% of step 1 ({time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
