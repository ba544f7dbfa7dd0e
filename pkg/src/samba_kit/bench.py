"""Runtime and peak-allocation scaling of the full model forward versus sequence length."""
from __future__ import annotations

import csv
import gc
import math
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .model import ModelConfig, SambaModel
from .saie import resolve_montage

VARIANTS = ("scan", "quadratic", "conv", "attention")
DEFAULT_LENGTHS = (200, 2000)
SCALING_LENGTHS = (256, 512, 1024, 2048, 4096)


@dataclass
class BenchRow:
    variant: str
    T: int
    reps: int
    median_ms: float
    min_ms: float
    mean_ms: float
    peak_bytes: int
    status: str = "ok"


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)
    channels: int = 22
    threads: str = "single"
    outputs: dict[tuple[str, int], np.ndarray] = field(default_factory=dict, repr=False)

    def row(self, variant: str, T: int) -> BenchRow:
        for r in self.rows:
            if r.variant == variant and r.T == T:
                return r
        raise KeyError((variant, T))


def variant_config(variant: str, base: ModelConfig | None = None) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    kw = dict(vars(base)) if base is not None else {}
    if variant in ("scan", "quadratic"):
        kw.update(block="mamba2", kernel=variant)
    else:
        kw.update(block=variant, kernel="scan")
    return ModelConfig(**kw)


def loglog_slope(lengths, times) -> float:
    x, y = np.log(np.asarray(lengths, dtype=np.float64)), np.log(np.asarray(times, dtype=np.float64))
    if len(x) < 2:
        return math.nan
    return float(np.polyfit(x, y, 1)[0])


def _peak_bytes(fn) -> int:
    gc.collect()
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak)


def run_bench(
    variants=("scan", "quadratic", "conv"),
    lengths=DEFAULT_LENGTHS,
    channels: int = 22,
    reps: int = 5,
    warmup: int = 1,
    batch: int = 1,
    base: ModelConfig | None = None,
    seed: int = 0,
    dtype=np.float64,
    keep_outputs: bool = False,
    measure_memory: bool = True,
    threads: str = "single",
) -> BenchReport:
    """Time ``reps`` no-grad forwards per (variant, T) after ``warmup`` untimed ones.

    Memory is the tracemalloc peak of one extra forward. A MemoryError (or a
    quadratic length above its cap) becomes a row with status ``OOM``.
    """
    if reps < 5:
        raise ValueError("need at least 5 repetitions")
    montage = resolve_montage({16: "standard_1020_16", 22: "standard_1020_22", 64: "standard_1010_64", 14: "emotiv_14"}.get(channels, "standard_1010_64"))
    if montage.n_channels != channels:
        montage = montage.subset(montage.channels[:channels])
    report = BenchReport(channels=channels, threads=threads)
    rng = np.random.default_rng(seed)
    inputs = {T: rng.normal(size=(batch, channels, T)).astype(dtype) for T in lengths}
    for v in variants:
        model = SambaModel(variant_config(v, base))
        if dtype != np.float64:
            for p in model.parameters():
                p.data = p.data.astype(dtype)
        for T in lengths:
            x = inputs[T]

            def fwd():
                with tn.no_grad():
                    return model(x, montage).reconstruction.data

            try:
                for _ in range(warmup):
                    out = fwd()
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    out = fwd()
                    times.append(time.perf_counter() - t0)
                peak = _peak_bytes(fwd) if measure_memory else 0
            except (MemoryError, ValueError) as e:
                if isinstance(e, ValueError) and "cap" not in str(e):
                    raise
                report.rows.append(BenchRow(v, T, reps, math.nan, math.nan, math.nan, 0, "OOM"))
                continue
            ms = np.array(times) * 1e3
            report.rows.append(BenchRow(v, T, reps, float(np.median(ms)), float(ms.min()), float(ms.mean()), peak))
            if keep_outputs:
                report.outputs[(v, T)] = out
    for v in variants:
        ok = [r for r in report.rows if r.variant == v and r.status == "ok"]
        report.slopes[v] = loglog_slope([r.T for r in ok], [r.median_ms for r in ok])
    return report


def relative_increase(short: float, long: float) -> float:
    return (long - short) / short


def summary(report: BenchReport) -> str:
    lines = [f"forward benchmark, {report.channels} channels, {report.threads}-threaded"]
    for v, s in report.slopes.items():
        rows = sorted((r for r in report.rows if r.variant == v), key=lambda r: r.T)
        ok = [r for r in rows if r.status == "ok"]
        parts = [f"T={r.T}: {r.median_ms:.1f} ms" if r.status == "ok" else f"T={r.T}: OOM" for r in rows]
        lines.append(f"{v:>10}  slope {s:.3f}  " + ", ".join(parts))
        if len(ok) >= 2:
            a, b = ok[0], ok[-1]
            lines.append(
                f"{'':>10}  T {a.T}->{b.T}: time +{100 * relative_increase(a.median_ms, b.median_ms):.1f}%, "
                f"memory +{100 * relative_increase(max(a.peak_bytes, 1), max(b.peak_bytes, 1)):.1f}%"
            )
    return "\n".join(lines)


FIELDS = ("variant", "T", "reps", "median_ms", "min_ms", "peak_bytes", "slope", "mean_ms", "status")


def emit_report(report: BenchReport, path) -> str:
    """Write the CSV at ``path`` and a summary next to it; returns the summary."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(FIELDS)
        for r in report.rows:
            w.writerow([r.variant, r.T, r.reps, repr(r.median_ms), repr(r.min_ms), r.peak_bytes,
                        repr(report.slopes.get(r.variant, math.nan)), repr(r.mean_ms), r.status])
    text = summary(report)
    path.with_suffix(".summary.txt").write_text(text + "\n", encoding="utf-8")
    return text


def read_report(path) -> BenchReport:
    rep = BenchReport()
    with open(path, newline="", encoding="utf-8") as f:
        for d in csv.DictReader(f):
            rep.rows.append(BenchRow(d["variant"], int(d["T"]), int(d["reps"]), float(d["median_ms"]),
                                     float(d["min_ms"]), float(d["mean_ms"]), int(d["peak_bytes"]), d["status"]))
            rep.slopes[d["variant"]] = float(d["slope"])
    return rep
