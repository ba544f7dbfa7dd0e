"""Pretrain on an unlabelled synthetic draw, then probe a labelled one.

Prints balanced accuracy for every tap and statistic, for the pretrained
checkpoint and for a random-init model, plus the band-power ceiling.

    python scripts/representation.py --epochs 12 --batch-size 8 --out runs/repr
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from samba_kit.data import SyntheticSpec, TrialSet, band_power, gen_synthetic, standardize
from samba_kit.model import ModelConfig, SambaModel
from samba_kit.probing import TAPS, balanced_accuracy, fit_linear_probe, linear_probe_eval, probe_split
from samba_kit.training import MaskConfig, TrainConfig, model_from_checkpoint, pretrain, write_metrics_csv


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--mask-ratio", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/repr")
    args = ap.parse_args()
    out = Path(args.out)
    t0 = time.perf_counter()

    labelled = standardize(gen_synthetic(SyntheticSpec()))
    draw = standardize(gen_synthetic(SyntheticSpec(seed=1)))
    pool = TrialSet(draw.data, draw.rate_hz, draw.montage)
    Z = band_power(labelled.data, labelled.rate_hz, [6.0, 10.0, 20.0])
    tr, te = probe_split(labelled.n_trials, 0.3, 0, labelled.labels)
    ceiling = balanced_accuracy(fit_linear_probe(Z[tr], labelled.labels[tr]).predict(Z[te]), labelled.labels[te])

    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, checkpoint_every=0, eval_every=args.epochs, seed=args.seed)

    def progress(step, loss):
        if step % 50 == 0:
            print(f"step {step:5d}  loss {loss:.4f}  {time.perf_counter() - t0:6.0f} s", flush=True)

    res = pretrain(ModelConfig(), cfg, MaskConfig(mask_ratio=args.mask_ratio), pool, out_dir=out, on_step=progress)
    write_metrics_csv(res.history, out / "metrics.csv")
    models = {"pretrained": model_from_checkpoint(out / "checkpoint.ckpt")[0], "random": SambaModel(ModelConfig())}
    table = {"ceiling": ceiling}
    for name, model in models.items():
        for tap in TAPS:
            for stats in ("quantile", "mean"):
                acc = linear_probe_eval(model, labelled, tap=tap, stats=stats)[0]["balanced_accuracy"]
                table[f"{name}/{tap}/{stats}"] = acc
                print(f"{name:>10} {tap:>8} {stats:>8}  {acc:.3f}", flush=True)
    print(f"band-power ceiling {ceiling:.3f}; total {time.perf_counter() - t0:.0f} s")
    (out / "probe_table.json").write_text(json.dumps(table, indent=2) + "\n")


if __name__ == "__main__":
    main()
