"""Downstream evaluation: quantile features, linear probe, fine-tuning, metrics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from . import tensor as tn
from .data import TrialSet
from .layers import Linear, Module
from .model import SambaModel
from .saie import Montage
from .training import AdamW

STAT_NAMES = ("min", "max", "mean", "std", "q05", "q25", "q50", "q75", "q95")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
TAPS = ("mdm", "encoder")
MAX_FINETUNE_EPOCHS = 5


def summarize(F: np.ndarray) -> np.ndarray:
    """(B, C, T) -> (B, C, 9) temporal statistics; quantiles interpolate order statistics."""
    F = np.asarray(F, dtype=np.float64)
    if F.shape[-1] < 2:
        warnings.warn("fewer than two time steps: std set to 0", RuntimeWarning, stacklevel=2)
    q = np.quantile(F, QUANTILES, axis=-1, method="linear")  # (5, B, C)
    std = F.std(axis=-1) if F.shape[-1] >= 2 else np.zeros(F.shape[:-1])
    stats = [F.min(-1), F.max(-1), F.mean(-1), std, *q]
    out = np.stack(stats, axis=-1)
    # interpolation can leave q05 an ulp below min on near-constant rows
    out[..., 4:] = np.clip(out[..., 4:], out[..., :1], out[..., 1:2])
    return out


def latent_features(
    model: SambaModel, x: np.ndarray, montage_in: Montage, tap: str = "mdm", batch_size: int = 32
) -> np.ndarray:
    """Unmasked forward passes; returns the tapped (B, C', T') feature map."""
    if tap not in TAPS:
        raise ValueError(f"tap must be one of {TAPS}")
    out = []
    with tn.no_grad():
        for s in range(0, len(x), batch_size):
            res = model(np.asarray(x[s : s + batch_size], dtype=np.float64), montage_in)
            out.append(res.taps[tap].data)
    return np.concatenate(out)


def extract_representation(
    model: SambaModel, x: np.ndarray, montage_in: Montage, tap: str = "mdm", stats: str = "quantile", batch_size: int = 32
) -> np.ndarray:
    """(B, C', 9) statistics of the tapped latent, or (B, C', 1) means with ``stats="mean"``."""
    F = latent_features(model, x, montage_in, tap, batch_size)
    Z = summarize(F)
    if stats == "mean":
        return Z[..., 2:3]
    if stats != "quantile":
        raise ValueError("stats must be 'quantile' or 'mean'")
    return Z


def write_representation_csv(Z: np.ndarray, labels, path) -> None:
    Z = Z.reshape(len(Z), -1)
    with open(path, "w", encoding="utf-8") as f:
        f.write("trial_id,label," + ",".join(f"f{i}" for i in range(Z.shape[1])) + "\n")
        for i, row in enumerate(Z):
            lab = "" if labels is None else int(labels[i])
            f.write(f"{i},{lab}," + ",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# linear probe

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, Z: np.ndarray) -> "Standardizer":
        Z = np.asarray(Z, dtype=np.float64)
        return cls(Z.mean(0), np.maximum(Z.std(0), 1e-8))

    def transform(self, Z: np.ndarray) -> np.ndarray:
        return (np.asarray(Z, dtype=np.float64) - self.mean) / self.std


@dataclass
class LinearProbe:
    weight: np.ndarray  # (classes, features)
    bias: np.ndarray
    l2: float
    classes: np.ndarray
    scaler: Standardizer | None = None
    final_loss: float = math.nan
    iterations: int = 0

    def scores(self, Z: np.ndarray) -> np.ndarray:
        Z = Z.reshape(len(Z), -1)
        if self.scaler is not None:
            Z = self.scaler.transform(Z)
        logits = Z @ self.weight.T + self.bias
        logits -= logits.max(1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(1, keepdims=True)

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(Z), axis=1)]


def _softmax_ce(theta: np.ndarray, Z: np.ndarray, Y: np.ndarray, l2: float):
    K, D = Y.shape[1], Z.shape[1]
    W = theta[: K * D].reshape(K, D)
    b = theta[K * D :]
    logits = Z @ W.T + b
    logits -= logits.max(1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    n = len(Z)
    loss = -(Y * logp).sum() / n + 0.5 * l2 * np.sum(W * W)
    G = (np.exp(logp) - Y) / n
    gW = G.T @ Z + l2 * W
    gb = G.sum(0)
    return loss, np.concatenate([gW.ravel(), gb])


def fit_linear_probe(
    Z: np.ndarray,
    labels,
    l2: float = 1e-3,
    max_iters: int = 2000,
    standardize: bool = True,
    seed: int | None = None,
    tol: float = 1e-6,
) -> LinearProbe:
    """Multinomial logistic regression with an L2 penalty on the weights.

    Features are z-scored with statistics of ``Z`` (the training split).
    ``seed`` draws a random starting point; the objective is convex, so the
    optimum does not depend on it.
    """
    Z = np.asarray(Z, dtype=np.float64).reshape(len(Z), -1)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    scaler = Standardizer.fit(Z) if standardize else None
    Zs = scaler.transform(Z) if scaler else Z
    Y = (labels[:, None] == classes[None]).astype(np.float64)
    K, D = len(classes), Zs.shape[1]
    theta0 = np.zeros(K * D + K) if seed is None else np.random.default_rng(seed).normal(0, 0.1, K * D + K)
    res = minimize(
        _softmax_ce, theta0, args=(Zs, Y, l2), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iters, "gtol": tol, "ftol": 1e-15, "maxcor": 20},
    )
    th = res.x
    return LinearProbe(th[: K * D].reshape(K, D), th[K * D :], l2, classes, scaler, float(res.fun), int(res.nit))


# ---------------------------------------------------------------------------
# fine-tuning

class MLPHead(Module):
    def __init__(self, d_in: int, classes: int, rng: np.random.Generator, hidden: int = 64):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, classes, rng)

    def forward(self, h: tn.Tensor) -> tn.Tensor:
        return self.fc2(tn.relu(self.fc1(h)))


def cross_entropy(logits: tn.Tensor, labels: np.ndarray) -> tn.Tensor:
    shift = logits - np.max(logits.data, axis=1, keepdims=True)
    logp = shift - tn.log(tn.tsum(tn.exp(shift), axis=1, keepdims=True))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -tn.tsum(logp * onehot) * (1.0 / len(labels))


@dataclass
class FinetuneResult:
    model: SambaModel
    head: MLPHead
    classes: np.ndarray
    tap: str
    losses: list[float] = field(default_factory=list)
    epochs_run: int = 0

    def logits(self, x: np.ndarray, montage_in: Montage, batch_size: int = 32) -> np.ndarray:
        out = []
        with tn.no_grad():
            for s in range(0, len(x), batch_size):
                res = self.model(np.asarray(x[s : s + batch_size], dtype=np.float64), montage_in)
                out.append(self.head(tn.mean(res.taps[self.tap], axis=2)).data)
        return np.concatenate(out)

    def scores(self, x, montage_in) -> np.ndarray:
        z = self.logits(x, montage_in)
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(1, keepdims=True)

    def predict(self, x, montage_in) -> np.ndarray:
        return self.classes[np.argmax(self.logits(x, montage_in), axis=1)]


def finetune(
    model: SambaModel,
    trials: TrialSet,
    epochs: int = 3,
    lr: float = 5e-4,
    batch_size: int = 16,
    freeze_body: bool = False,
    hidden: int = 64,
    tap: str = "mdm",
    seed: int = 0,
    max_epochs: int = MAX_FINETUNE_EPOCHS,
    weight_decay: float = 1e-2,
) -> FinetuneResult:
    """Train an MLP head on the time-averaged latent, jointly with the body unless frozen."""
    if trials.labels is None:
        raise ValueError("fine-tuning needs labels")
    if not 1 <= epochs <= max_epochs:
        raise ValueError(f"epochs must lie in [1, {max_epochs}], got {epochs}")
    montage = trials.resolve_montage()
    classes = np.unique(trials.labels)
    y = np.searchsorted(classes, trials.labels)
    rng = np.random.default_rng([seed, 3])
    head = MLPHead(model.cfg.widths[2], len(classes), rng, hidden)
    named = list(head.named_parameters())
    if not freeze_body:
        named = list(model.named_parameters()) + [("head." + n, p) for n, p in named]
    opt = AdamW(named, weight_decay=weight_decay)
    result = FinetuneResult(model, head, classes, tap)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 4, epoch]).permutation(trials.n_trials)
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            for p in opt.params:
                p.grad = None
            x = trials.data[idx].astype(np.float64)
            if freeze_body:
                with tn.no_grad():
                    h = tn.Tensor(tn.mean(model(x, montage).taps[tap], axis=2).data)
            else:
                h = tn.mean(model(x, montage).taps[tap], axis=2)
            loss = cross_entropy(head(h), y[idx])
            loss.backward()
            opt.step(lr)
            result.losses.append(loss.item())
        result.epochs_run = epoch + 1
    return result


# ---------------------------------------------------------------------------
# metrics

def balanced_accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) == 0:
        raise ValueError("no labels")
    return float(np.mean([np.mean(pred[labels == c] == c) for c in classes]))


def auroc(scores, labels) -> float:
    """Rank-statistic AUROC for binary labels; tied scores get midranks."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) != 2:
        raise ValueError("AUROC needs exactly two classes")
    pos = labels == classes[1]
    n1, n0 = int(pos.sum()), int((~pos).sum())
    r = rankdata(scores)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def weighted_f1(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    classes, support = np.unique(labels, return_counts=True)
    f1 = []
    for c in classes:
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.sum(np.array(f1) * support) / support.sum())


def evaluate(predictions, scores, labels, classes=None) -> dict[str, float]:
    """balanced_accuracy, weighted_f1 and (binary problems only) auroc.

    ``scores`` is the positive-class score vector or a (n, classes) matrix.
    Passing ``classes`` checks that every expected class occurs in ``labels``.
    """
    labels = np.asarray(labels)
    if classes is not None:
        missing = set(np.asarray(classes).tolist()) - set(labels.tolist())
        if missing:
            raise ValueError(f"class(es) {sorted(missing)} have no samples")
    out = {
        "balanced_accuracy": balanced_accuracy(predictions, labels),
        "weighted_f1": weighted_f1(predictions, labels),
    }
    if len(np.unique(labels)) == 2 and scores is not None:
        s = np.asarray(scores, dtype=np.float64)
        out["auroc"] = auroc(s[:, -1] if s.ndim == 2 else s, labels)
    return out


def probe_split(n: int, test_fraction: float = 0.3, seed: int = 0, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Train/test indices; stratified when labels are given."""
    rng = np.random.default_rng([seed, 5])
    if labels is None:
        perm = rng.permutation(n)
        k = int(round(test_fraction * n))
        return np.sort(perm[k:]), np.sort(perm[:k])
    labels = np.asarray(labels)
    tr, te = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(test_fraction * len(idx)))
        te.extend(idx[:k])
        tr.extend(idx[k:])
    return np.sort(tr), np.sort(te)


def linear_probe_eval(
    model: SambaModel, trials: TrialSet, test_fraction: float = 0.3, seed: int = 0, tap: str = "mdm",
    stats: str = "quantile", l2: float = 1e-3, max_iters: int = 2000,
) -> tuple[dict[str, float], np.ndarray, LinearProbe]:
    """Extract features, fit on the train split, score the held-out split."""
    if trials.labels is None:
        raise ValueError("probing needs labels")
    montage = trials.resolve_montage()
    Z = extract_representation(model, trials.data, montage, tap, stats).reshape(trials.n_trials, -1)
    tr, te = probe_split(trials.n_trials, test_fraction, seed, trials.labels)
    probe = fit_linear_probe(Z[tr], trials.labels[tr], l2, max_iters)
    metrics = evaluate(probe.predict(Z[te]), probe.scores(Z[te]), trials.labels[te])
    return metrics, Z, probe
