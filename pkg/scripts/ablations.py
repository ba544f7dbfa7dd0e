"""Short pretraining runs for each ablation, scored by validation ACMSE and probe accuracy.

    python scripts/ablations.py --epochs 4 --out runs/ablations.json
"""
from __future__ import annotations

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from samba_kit.data import SyntheticSpec, TrialSet, gen_synthetic, standardize
from samba_kit.model import ModelConfig
from samba_kit.probing import linear_probe_eval
from samba_kit.training import MaskConfig, TrainConfig, pretrain

BASE = ModelConfig()
ABLATIONS = {
    "full": (BASE, MaskConfig(), {}),
    "random-mask": (BASE, MaskConfig(kind="random"), {}),
    "no-mask": (BASE, MaskConfig(kind="none"), {}),
    "mamba2-bottleneck": (replace(BASE, bottleneck="mamba2"), MaskConfig(), {}),
    "mdm-no-residual": (replace(BASE, mdm_residual=False), MaskConfig(), {}),
    "l1-only": (BASE, MaskConfig(), {"loss_beta": 0.0}),
    "spectral-only": (BASE, MaskConfig(), {"loss_alpha": 0.0}),
    "conv-blocks": (replace(BASE, block="conv"), MaskConfig(), {}),
    "attention-blocks": (replace(BASE, block="attention"), MaskConfig(), {}),
}


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--only", help="comma-separated subset of " + ",".join(ABLATIONS))
    ap.add_argument("--out", default="runs/ablations.json")
    args = ap.parse_args()
    names = args.only.split(",") if args.only else list(ABLATIONS)
    labelled = standardize(gen_synthetic(SyntheticSpec()))
    draw = standardize(gen_synthetic(SyntheticSpec(seed=1)))
    pool = TrialSet(draw.data, draw.rate_hz, draw.montage)
    results = {}
    for name in names:
        model_cfg, mask_cfg, loss = ABLATIONS[name]
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, checkpoint_every=0, eval_every=args.epochs, **loss)
        t0 = time.perf_counter()
        res = pretrain(model_cfg, cfg, mask_cfg, pool)
        acc = linear_probe_eval(res.model, labelled)[0]["balanced_accuracy"]
        results[name] = {"val_acmse": res.history[-1].val_acmse, "probe_balanced_accuracy": acc}
        print(f"{name:>18}  val ACMSE {res.history[-1].val_acmse:.4f}  probe {acc:.3f}  ({time.perf_counter() - t0:.0f} s)", flush=True)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
