"""Command-line entry point: gen, pretrain, probe, export-weights, bench.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.
``SAMBA_KIT_THREADS`` caps BLAS worker threads; ``--deterministic`` forces one.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .data import SyntheticSpec, gen_synthetic, read_trials, standardize, write_trials
from .probing import (
    evaluate, extract_representation, finetune, fit_linear_probe, probe_split, write_representation_csv,
)
from .saie import MontageError, export_weight_map, resolve_montage
from .training import model_from_checkpoint, pretrain, write_metrics_csv

log = logging.getLogger("samba_kit")


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _base_config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_trials(path):
    try:
        return read_trials(path)
    except FileNotFoundError:
        raise InputError(f"data file not found: {path}") from None


def cmd_gen(args) -> int:
    spec_d = {}
    if args.spec:
        try:
            spec_d = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read spec {args.spec}: {e}") from None
    if args.seed is not None:
        spec_d["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(spec_d)
        ts = gen_synthetic(spec)
    except (TypeError, ValueError) as e:
        raise InputError(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trials(ts, out)
    print(f"wrote {ts.n_trials} trials x {ts.n_channels} channels x {ts.n_samples} samples to {out}")
    return 0


ABLATION_HELP = (
    "ablations: --mask random, --bottleneck mamba2, --mdm-residual off, "
    "--loss l1|spec, --blocks conv|attention"
)


def apply_ablations(cfg: RunConfig, args) -> RunConfig:
    model, masking, train = cfg.model, cfg.masking, cfg.train
    if args.mask:
        masking = replace(masking, kind=args.mask)
    if args.bottleneck:
        model = replace(model, bottleneck=args.bottleneck)
    if args.mdm_residual:
        model = replace(model, mdm_residual=args.mdm_residual == "on")
    if args.blocks:
        model = replace(model, block=args.blocks)
    if args.loss == "l1":
        train = replace(train, loss_alpha=1.0, loss_beta=0.0)
    elif args.loss == "spec":
        train = replace(train, loss_alpha=0.0, loss_beta=1.0)
    if args.epochs is not None:
        train = replace(train, epochs=args.epochs)
    if args.max_steps is not None:
        train = replace(train, max_steps=args.max_steps)
    return replace(cfg, model=model, masking=masking, train=train, seed=args.seed if args.seed is not None else cfg.seed)


def cmd_pretrain(args) -> int:
    cfg = apply_ablations(_base_config(args.config), args)
    trials = _load_trials(args.data)
    try:
        trials.resolve_montage()
    except (MontageError, ValueError) as e:
        raise InputError(f"data/montage mismatch: {e}") from None
    if cfg.data.standardize:
        trials = standardize(trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved_config.json")
    tc = cfg.train_config()
    resume = None
    if args.resume:
        resume = Path(args.resume) if args.resume != "auto" else out / "checkpoint.ckpt"
        if not resume.exists():
            raise InputError(f"no checkpoint to resume from at {resume}")
    result = pretrain(cfg.model, tc, cfg.masking, trials, out_dir=out, resume=resume, config_echo=cfg.to_dict())
    write_metrics_csv(result.history, out / "metrics.csv")
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epoch {last.epoch}: train_loss {last.train_loss:.6g} val_acmse {last.val_acmse:.6g}")
    print(f"checkpoint: {result.last_checkpoint}")
    return 0


def cmd_probe(args) -> int:
    model, ck = model_from_checkpoint(args.checkpoint)
    try:
        cfg = config_from_dict(ck.config)
    except ConfigError:
        cfg = RunConfig()  # checkpoint written by the library API, not the CLI
    pc = cfg.probe
    trials = _load_trials(args.data)
    if trials.labels is None:
        raise InputError("probing needs a labeled trial set")
    try:
        montage = trials.resolve_montage()
    except (MontageError, ValueError) as e:
        raise InputError(f"data montage incompatible: {e}") from None
    trials = standardize(trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.seed
    tr, te = probe_split(trials.n_trials, pc.test_fraction, seed, trials.labels)
    mode = args.mode or pc.mode
    if mode == "linear":
        Z = extract_representation(model, trials.data, montage, pc.tap, pc.stats).reshape(trials.n_trials, -1)
        probe = fit_linear_probe(Z[tr], trials.labels[tr], pc.l2, pc.max_iters)
        metrics = evaluate(probe.predict(Z[te]), probe.scores(Z[te]), trials.labels[te])
        write_representation_csv(Z, trials.labels, out / "representations.csv")
    else:
        epochs = args.epochs if args.epochs is not None else pc.epochs
        try:
            ft = finetune(model, trials.subset(tr), epochs=epochs, lr=pc.lr, freeze_body=pc.freeze_body, tap=pc.tap, seed=seed)
        except ValueError as e:
            raise InputError(str(e)) from None
        xte = trials.data[te]
        metrics = evaluate(ft.predict(xte, montage), ft.scores(xte, montage), trials.labels[te])
        metrics["epochs"] = ft.epochs_run
    metrics = {"mode": mode, **metrics}
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "resolved_config.json", cfg.to_dict())
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_export_weights(args) -> int:
    model, _ = model_from_checkpoint(args.checkpoint)
    try:
        mi = resolve_montage(args.montage_in)
    except MontageError as e:
        raise InputError(str(e)) from None
    W = model.saie.weights(mi)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_weight_map(W, model.target_montage, mi, out)
    print(f"wrote {W.shape[0] * W.shape[1]} weights to {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _base_config(args.config)
    b = cfg.bench
    variants = tuple(args.variants.split(",")) if args.variants else b.variants
    lengths = tuple(int(t) for t in args.lengths.split(",")) if args.lengths else b.lengths
    channels = args.channels or b.channels
    reps = args.reps or b.reps
    for v in variants:
        if v not in bench_mod.VARIANTS:
            raise InputError(f"unknown variant {v!r}")
    if reps < 5:
        raise InputError("reps must be >= 5")
    threads = "single" if args.deterministic or os.environ.get("SAMBA_KIT_THREADS") == "1" else "multi"
    report = bench_mod.run_bench(variants, lengths, channels, reps, batch=b.batch, base=cfg.model, seed=cfg.seed, threads=threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved_config.json")
    print(bench_mod.emit_report(report, out / "bench.csv"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samba-kit", description=__doc__.splitlines()[0])
    p.add_argument("--deterministic", action="store_true", help="single-threaded, fully seeded execution")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic trial set")
    g.add_argument("--spec", help="SyntheticSpec JSON (defaults: 2 x 200 trials, 14 ch, 128 Hz, 2 s)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("pretrain", help="masked-reconstruction pretraining", epilog=ABLATION_HELP)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", nargs="?", const="auto", help="checkpoint path (default: OUT/checkpoint.ckpt)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--mask", choices=("tsr", "random", "none"))
    t.add_argument("--bottleneck", choices=("mdm", "mamba2"))
    t.add_argument("--mdm-residual", choices=("on", "off"))
    t.add_argument("--loss", choices=("tf", "l1", "spec"))
    t.add_argument("--blocks", choices=("mamba2", "conv", "attention"))
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("probe", help="linear probe or fine-tune a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--mode", choices=("linear", "finetune"))
    r.add_argument("--epochs", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_probe)

    e = sub.add_parser("export-weights", help="write the spatial weight map for an input montage")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--montage-in", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_weights)

    b = sub.add_parser("bench", help="runtime/memory versus sequence length")
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.add_argument("--lengths")
    b.add_argument("--channels", type=int)
    b.add_argument("--reps", type=int)
    b.add_argument("--variants")
    b.set_defaults(func=cmd_bench)
    return p


def _thread_limit(deterministic: bool) -> int | None:
    if deterministic:
        return 1
    env = os.environ.get("SAMBA_KIT_THREADS")
    if env is None:
        return None
    try:
        n = int(env)
    except ValueError:
        raise InputError(f"SAMBA_KIT_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise InputError("SAMBA_KIT_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_thread_limit(args.deterministic)):
            return args.func(args)
    except (InputError, ConfigError, MontageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
