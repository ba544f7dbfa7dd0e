"""Masked-reconstruction pretraining: schedule, optimizer, loop and checkpoints.

Master parameters and optimizer moments are kept at float32-representable
values so the checkpoint blob (float32) restores them exactly. Every random
draw inside the loop comes from a generator seeded by (seed, epoch, step), so
a resumed run needs no generator state beyond the step counter.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import TrialSet
from .layers import Module
from .masking import full_visibility, sample_random_mask, sample_tsr_mask
from .model import ModelConfig, SambaModel
from .objective import LossWeights, acmse, tf_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ScheduleSpec:
    total_steps: int
    initial_lr: float = 2.5e-4
    max_lr: float = 5e-4
    final_lr: float = 5e-6
    warmup_fraction: float = 0.10

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not self.initial_lr <= self.max_lr:
            raise ValueError("initial_lr must not exceed max_lr")
        if not self.final_lr <= self.initial_lr:
            raise ValueError("final_lr must not exceed initial_lr")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")


def onecycle_lr(step: int, spec: ScheduleSpec) -> float:
    """Linear warmup initial -> max, then cosine max -> final. Endpoints are exact."""
    if not 0 <= step <= spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")
    warm = spec.warmup_fraction * spec.total_steps
    if step == 0:
        return spec.initial_lr
    if step == spec.total_steps:
        return spec.final_lr
    if step < warm:
        return spec.initial_lr + (spec.max_lr - spec.initial_lr) * (step / warm)
    if step == warm:
        return spec.max_lr
    p = (step - warm) / (spec.total_steps - warm)
    return spec.final_lr + (spec.max_lr - spec.final_lr) * 0.5 * (1.0 + math.cos(math.pi * p))


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(a.dtype)


class AdamW:
    """Adam with decoupled weight decay: ``w <- w - lr * (wd * w + m_hat / (sqrt(v_hat) + eps))``."""

    def __init__(
        self,
        named_params: list[tuple[str, tn.Tensor]],
        weight_decay: float = 1e-2,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        round_f32: bool = False,
    ):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.round_f32 = round_f32
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = []
        for name, p in zip(self.names, self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            grads.append(g)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for i, (p, g) in enumerate(zip(self.params, grads)):
            m = b1 * self.m[i] + (1.0 - b1) * g
            v = b2 * self.v[i] + (1.0 - b2) * g * g
            if self.round_f32:
                m, v = _f32(m), _f32(v)
            self.m[i], self.v[i] = m, v
            w = p.data - lr * self.weight_decay * p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = _f32(w) if self.round_f32 else w

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array([self.step_count], dtype=np.float64)}
        for n, m, v in zip(self.names, self.m, self.v):
            out[f"optim.m.{n}"] = m
            out[f"optim.v.{n}"] = v
        return out

    def load_state_tensors(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["optim.step"][0])
        for i, n in enumerate(self.names):
            m, v = state[f"optim.m.{n}"], state[f"optim.v.{n}"]
            if m.shape != self.m[i].shape:
                raise ValueError(f"optimizer moment shape mismatch for {n}")
            self.m[i] = m.astype(self.m[i].dtype)
            self.v[i] = v.astype(self.v[i].dtype)


def clip_grad_norm(params: list[tn.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def round_parameters(model: Module) -> None:
    for p in model.parameters():
        p.data = _f32(p.data)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class MaskConfig:
    kind: str = "tsr"  # "tsr", "random" or "none"
    mask_ratio: float = 0.5
    block_count: int = 4
    alpha_min: float = 0.5
    alpha_max: float = 1.5

    def __post_init__(self):
        if self.kind not in ("tsr", "random", "none"):
            raise ValueError(f"unknown mask kind {self.kind!r}")

    def sample(self, l: int, rng: np.random.Generator):
        if self.kind == "none" or self.mask_ratio == 0.0:
            return full_visibility(l)
        if self.kind == "random":
            return sample_random_mask(l, self.mask_ratio, rng)
        return sample_tsr_mask(l, self.mask_ratio, self.block_count, self.alpha_min, self.alpha_max, rng)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    max_steps: int | None = None  # stop early after this many optimizer steps
    initial_lr: float = 2.5e-4
    max_lr: float = 5e-4
    final_lr: float = 5e-6
    warmup_fraction: float = 0.10
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    loss_alpha: float = 1.0
    loss_beta: float = 1.0
    val_fraction: float = 0.1  # 0 evaluates on the training trials
    eval_masked: bool = True
    checkpoint_every: int = 1  # epochs; 0 disables periodic checkpoints
    eval_every: int = 1  # epochs between validation passes; the last epoch is always evaluated
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_acmse: float


@dataclass
class TrainResult:
    model: SambaModel
    optimizer: AdamW
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    step_acmse: list[float] = field(default_factory=list)
    last_checkpoint: Path | None = None


class TrainingDiverged(RuntimeError):
    pass


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if val_fraction == 0 or n < 2:
        idx = np.arange(n)
        return idx, idx
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return -(-n_train // batch_size)


def batch_masks(mcfg: MaskConfig, l: int, seed: int, epoch: int, step: int, n: int, stream: int = 1):
    rng = np.random.default_rng([seed, stream, epoch, step])
    return [mcfg.sample(l, rng) for _ in range(n)]


def loss_on_batch(model: SambaModel, x: np.ndarray, montage, masks, weights: LossWeights):
    out = model(x, montage, masks)
    return tf_loss(out.reconstruction, out.target, weights), out


def evaluate_acmse(model: SambaModel, trials: TrialSet, mcfg: MaskConfig, masked: bool, seed: int, batch_size: int) -> float:
    """ACMSE over a trial set with fixed evaluation masks (or none)."""
    montage = trials.resolve_montage()
    errs = []
    with tn.no_grad():
        for s in range(0, trials.n_trials, batch_size):
            x = trials.data[s : s + batch_size].astype(np.float64)
            masks = batch_masks(mcfg, x.shape[-1], seed, 0, s, len(x), stream=2) if masked else None
            out = model(x, montage, masks)
            err = (out.reconstruction.data - out.target.data) ** 2
            errs.append(err.mean(axis=2).sum(axis=0))  # per channel, summed over trials
    # every trial has the same length, so the mean of per-trial means is the ACMSE
    return float((np.sum(errs, axis=0) / trials.n_trials).mean())


def pretrain(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    mask_cfg: MaskConfig,
    trials: TrialSet,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    config_echo: dict | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run masked-reconstruction pretraining; returns the trained model and logs."""
    montage = trials.resolve_montage()
    model = SambaModel(model_cfg)
    round_parameters(model)
    opt = AdamW(list(model.named_parameters()), train_cfg.weight_decay, train_cfg.betas, train_cfg.eps, round_f32=True)
    weights = LossWeights(train_cfg.loss_alpha, train_cfg.loss_beta)
    tr_idx, va_idx = split_indices(trials.n_trials, train_cfg.val_fraction, train_cfg.seed)
    train_set, val_set = trials.subset(tr_idx), trials.subset(va_idx)
    spe = steps_per_epoch(len(tr_idx), train_cfg.batch_size)
    total = spe * train_cfg.epochs
    if train_cfg.max_steps is not None:
        total = min(total, train_cfg.max_steps)
    sched = ScheduleSpec(total, train_cfg.initial_lr, train_cfg.max_lr, train_cfg.final_lr, train_cfg.warmup_fraction)
    echo = config_echo or {
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "masking": asdict(mask_cfg),
    }
    result = TrainResult(model, opt)
    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume, model, opt)
        start_epoch = ck.epoch + 1
        result.history = [EpochRecord(**r) for r in ck.history]
        result.step_losses = list(ck.extra.get("step_losses", []))
        result.step_acmse = list(ck.extra.get("step_acmse", []))
        result.last_checkpoint = Path(resume)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    step = opt.step_count
    T = trials.n_samples
    for epoch in range(start_epoch, train_cfg.epochs):
        if step >= total:
            break
        order = np.random.default_rng([train_cfg.seed, 0, epoch]).permutation(len(tr_idx))
        losses = []
        for b in range(spe):
            if step >= total:
                break
            idx = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            x = train_set.data[idx].astype(np.float64)
            masks = batch_masks(mask_cfg, T, train_cfg.seed, epoch, step, len(idx))
            model.zero_grad()
            loss, out = loss_on_batch(model, x, montage, masks, weights)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss at step {step}; last good checkpoint: {result.last_checkpoint}")
            loss.backward()
            clip_grad_norm(opt.params, train_cfg.clip_norm)
            lr = onecycle_lr(step, sched)
            opt.step(lr)
            step += 1
            losses.append(lv)
            result.step_losses.append(lv)
            result.step_acmse.append(acmse(out.reconstruction, out.target))
            if on_step is not None:
                on_step(step, lv)
        done = step >= total or epoch == train_cfg.epochs - 1
        val = math.nan
        if done or (epoch + 1) % max(train_cfg.eval_every, 1) == 0:
            val = evaluate_acmse(model, val_set, mask_cfg, train_cfg.eval_masked, train_cfg.seed, train_cfg.batch_size)
        rec = EpochRecord(epoch, onecycle_lr(min(step, total), sched), float(np.mean(losses)), val)
        result.history.append(rec)
        log.info("epoch %d lr %.3g loss %.6g val_acmse %.6g", epoch, rec.lr, rec.train_loss, rec.val_acmse)
        periodic = train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0
        if out_dir is not None and (periodic or done):
            path = out_dir / "checkpoint.ckpt"
            save_checkpoint(
                path, model, opt, echo, epoch, [asdict(r) for r in result.history],
                extra={"step_losses": result.step_losses, "step_acmse": result.step_acmse},
            )
            result.last_checkpoint = path
    return result


def write_metrics_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,lr,train_loss,val_acmse\n")
        for r in history:
            f.write(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_acmse!r}\n")


# ---------------------------------------------------------------------------
# checkpoints: one JSON manifest line, then a little-endian float32 blob

@dataclass
class Checkpoint:
    config: dict
    epoch: int
    history: list[dict]
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path,
    model: Module,
    optimizer: AdamW | None,
    config: dict,
    epoch: int = -1,
    history: list[dict] | None = None,
    extra: dict | None = None,
) -> None:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    seed = int(config.get("train", {}).get("seed", 0)) if isinstance(config.get("train"), dict) else 0
    tensors["rng.state"] = np.array([seed % (1 << 24), seed >> 24, optimizer.step_count if optimizer else 0], dtype=np.float64)
    entries, offset, chunks = [], 0, []
    for name, arr in tensors.items():
        b = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(b)
        offset += len(b)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "epoch": epoch,
        "history": history or [],
        "extra": extra or {},
        "tensors": entries,
        "blob_bytes": offset,
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(json.dumps(manifest).encode() + b"\n")
        for b in chunks:
            f.write(b)
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing manifest")
    man = json.loads(raw[:nl])
    if man.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {man.get('format_version')}")
    blob = raw[nl + 1 :]
    if len(blob) != man["blob_bytes"]:
        raise ValueError(f"{path}: truncated blob ({len(blob)} of {man['blob_bytes']} bytes)")
    tensors = {}
    for e in man["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 4 * n
        if end > len(blob):
            raise ValueError(f"{path}: tensor {e['name']} exceeds blob")
        tensors[e["name"]] = np.frombuffer(blob[e["offset"] : end], dtype="<f4").reshape(e["shape"]).astype(np.float64)
    return Checkpoint(man["config"], man["epoch"], man["history"], tensors, man.get("extra", {}))


def load_checkpoint(path, model: Module, optimizer: AdamW | None = None) -> Checkpoint:
    ck = read_checkpoint(path)
    params = dict(model.named_parameters())
    for name, p in params.items():
        if name in ck.tensors and ck.tensors[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: checkpoint {ck.tensors[name].shape}, model {p.shape}")
    model.load_state_dict({k: ck.tensors[k] for k in params if k in ck.tensors})
    if optimizer is not None:
        optimizer.load_state_tensors(ck.tensors)
    return ck


def model_from_checkpoint(path) -> tuple[SambaModel, Checkpoint]:
    ck = read_checkpoint(path)
    cfg = ModelConfig(**ck.config["model"])
    model = SambaModel(cfg)
    model.load_state_dict({k: ck.tensors[k] for k, _ in model.named_parameters() if k in ck.tensors})
    return model, ck
