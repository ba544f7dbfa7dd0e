"""Spatial-adaptive input embedding.

An MLP maps each (target, input) electrode displacement to a logit; a softmax
over input channels turns the logits into mixing weights, so any input
montage is re-projected onto the fixed target montage.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as tn
from .layers import Module
from .tensor import Tensor

BUNDLED = ("standard_1020_16", "standard_1020_22", "standard_1010_64", "emotiv_14")


class MontageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Montage:
    name: str
    channels: tuple[str, ...]
    coords: np.ndarray  # (C, 3), dimensionless head-sphere units

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        object.__setattr__(self, "coords", coords)
        if len(self.channels) == 0:
            raise MontageError("montage has no electrodes")
        if coords.shape != (len(self.channels), 3):
            raise MontageError(f"need one (x, y, z) row per channel, got {coords.shape}")
        if len(set(self.channels)) != len(self.channels):
            raise MontageError("duplicate electrode names")
        if not np.all(np.isfinite(coords)):
            raise MontageError("non-finite electrode coordinates")
        if len(self.channels) > 1:
            d = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
            d[np.diag_indices_from(d)] = np.inf
            if d.min() < 1e-6:
                raise MontageError("two electrodes closer than 1e-6")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def fingerprint(self) -> str:
        h = hashlib.sha1("|".join(self.channels).encode())
        h.update(self.coords.tobytes())
        return h.hexdigest()

    def subset(self, names) -> "Montage":
        idx = [self.channels.index(n) for n in names]
        return Montage(self.name, tuple(names), self.coords[idx])

    def canonical_order(self) -> np.ndarray:
        """Permutation sorting electrodes by coordinates; input order cannot affect it."""
        c = self.coords
        return np.lexsort((c[:, 2], c[:, 1], c[:, 0]))


def write_montage(m: Montage, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["name", "x", "y", "z"])
        for name, (x, y, z) in zip(m.channels, m.coords):
            w.writerow([name, repr(float(x)), repr(float(y)), repr(float(z))])


def load_montage(path, name: str | None = None) -> Montage:
    """Read a ``name,x,y,z`` CSV. A leading ``#normalize`` line rescales to unit radius."""
    path = Path(path)
    if not path.exists():
        raise MontageError(f"montage file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    normalize = False
    body = []
    for line in lines:
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            normalize = normalize or s[1:].strip().lower() in ("normalize", "normalize=true")
            continue
        body.append(line)
    if not body:
        raise MontageError(f"empty montage file: {path}")
    rows = list(csv.reader(body))
    if [c.strip().lower() for c in rows[0]] != ["name", "x", "y", "z"]:
        raise MontageError(f"bad header {rows[0]!r}, expected name,x,y,z")
    names, coords = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise MontageError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            coords.append([float(v) for v in row[1:]])
        except ValueError as e:
            raise MontageError(f"line {lineno}: {e}") from None
        names.append(row[0].strip())
    if not names:
        raise MontageError(f"no electrodes in {path}")
    coords = np.array(coords)
    if normalize:
        r = np.linalg.norm(coords, axis=1).max()
        if r == 0:
            raise MontageError("degenerate coordinates: all electrodes at the origin")
        coords = coords / r
    return Montage(name or path.stem, tuple(names), coords)


def bundled_montage(key: str) -> Montage:
    if key not in BUNDLED:
        raise MontageError(f"unknown montage {key!r}; bundled: {', '.join(BUNDLED)}")
    with resources.as_file(resources.files("samba_kit") / "assets" / f"{key}.csv") as p:
        return load_montage(p, name=key)


def resolve_montage(spec: str) -> Montage:
    """A bundled key or a path to a montage CSV."""
    if spec in BUNDLED:
        return bundled_montage(spec)
    return load_montage(spec)


class SpatialMLP(Module):
    """Two-layer ReLU MLP from a 3D displacement to one logit."""

    def __init__(self, rng: np.random.Generator, hidden: int = 64, init_std: float = 0.1):
        if hidden < 1:
            raise ValueError("hidden width must be >= 1")
        self.W1 = tn.parameter(rng.normal(0.0, init_std, size=(hidden, 3)))
        self.b1 = tn.parameter(np.zeros(hidden))
        self.W2 = tn.parameter(rng.normal(0.0, init_std, size=(1, hidden)))
        self.b2 = tn.parameter(np.zeros(1))

    def forward(self, dP: Tensor) -> Tensor:
        h = tn.relu(tn.linear(dP, self.W1, self.b1))
        return tn.linear(h, self.W2, self.b2)


def spatial_weights(mlp: SpatialMLP, P_in, P_out) -> Tensor:
    """Row-stochastic (C_out, C_in) weights from pairwise displacements."""
    P_in = np.asarray(P_in, dtype=np.float64)
    P_out = np.asarray(P_out, dtype=np.float64)
    dP = tn.Tensor(P_out[:, None, :] - P_in[None, :, :])
    logits = mlp(dP)
    logits = tn.reshape(logits, logits.shape[:2])
    return tn.softmax(logits, axis=1)


def project(x, W) -> Tensor:
    """x'[b, i, t] = sum_j W[i, j] x[b, j, t]."""
    x, W = tn.as_tensor(x), tn.as_tensor(W)
    if x.ndim != 3 or x.shape[1] != W.shape[1]:
        raise ValueError(f"input channels {x.shape} do not match weights {W.shape}")
    return tn.matmul(W, x)


class SpatialEmbedding(Module):
    """SAIE layer bound to a target montage.

    Input channels are put in coordinate order before mixing so that any
    permutation of the input montage yields bit-identical output. Weights are
    cached per (input montage, parameter values) when gradients are off.
    """

    def __init__(self, target: Montage, rng: np.random.Generator, hidden: int = 64, init_std: float = 0.1):
        self._target = target
        self.mlp = SpatialMLP(rng, hidden, init_std)
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    @property
    def target(self) -> Montage:
        return self._target

    def _param_key(self) -> str:
        h = hashlib.sha1()
        # read the attributes directly: a frozen tensor is not listed as a parameter
        m = self.mlp
        for p in (m.W1, m.b1, m.W2, m.b2):
            h.update(p.data.tobytes())
        return h.hexdigest()

    def weights(self, montage_in: Montage, canonical: bool = False) -> Tensor:
        """(C_out, C_in) weights in the input montage's order (or canonical order)."""
        order = montage_in.canonical_order()
        if not tn.is_grad_enabled() or not any(p.requires_grad for p in (self.mlp.W1, self.mlp.b1, self.mlp.W2, self.mlp.b2)):
            key = (montage_in.fingerprint(), self._param_key())
            W = self._cache.get(key)
            if W is None:
                with tn.no_grad():
                    W = spatial_weights(self.mlp, montage_in.coords[order], self._target.coords).data
                if len(self._cache) > 32:
                    self._cache.clear()
                self._cache[key] = W
            Wc = tn.Tensor(W)
        else:
            Wc = spatial_weights(self.mlp, montage_in.coords[order], self._target.coords)
        if canonical:
            return Wc
        inv = np.argsort(order)
        return tn.getitem(Wc, (slice(None), inv))

    def forward(self, x: Tensor, montage_in: Montage) -> Tensor:
        x = tn.as_tensor(x)
        if x.shape[1] != montage_in.n_channels:
            raise ValueError(f"data has {x.shape[1]} channels, montage {montage_in.name} has {montage_in.n_channels}")
        order = montage_in.canonical_order()
        W = self.weights(montage_in, canonical=True)
        return project(tn.getitem(x, (slice(None), order)), W)


def export_weight_map(W, montage_out: Montage, montage_in: Montage, path) -> None:
    """Write one row per (target, input) pair with the input electrode position."""
    W = np.asarray(W.data if isinstance(W, Tensor) else W)
    if W.shape != (montage_out.n_channels, montage_in.n_channels):
        raise ValueError(f"weights {W.shape} do not match montages")
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["target_name", "input_name", "weight", "input_x", "input_y", "input_z"])
        for i, tname in enumerate(montage_out.channels):
            for j, iname in enumerate(montage_in.channels):
                x, y, z = montage_in.coords[j]
                w.writerow([tname, iname, repr(float(W[i, j])), repr(float(x)), repr(float(y)), repr(float(z))])


def read_weight_map(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    targets = list(dict.fromkeys(r["target_name"] for r in rows))
    inputs = list(dict.fromkeys(r["input_name"] for r in rows))
    W = np.full((len(targets), len(inputs)), math.nan)
    ti = {n: i for i, n in enumerate(targets)}
    ii = {n: i for i, n in enumerate(inputs)}
    for r in rows:
        W[ti[r["target_name"]], ii[r["input_name"]]] = float(r["weight"])
    return targets, inputs, W
