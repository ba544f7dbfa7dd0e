"""Synthetic multichannel trials and the binary trial-set file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .saie import Montage, resolve_montage

FORMAT_VERSION = 1

# channels coded as posterior in the bundled montages (y < 0 on the head sphere)
POSTERIOR = ("O1", "O2", "Oz", "P7", "P8", "P3", "P4", "Pz", "PO3", "PO4", "POz", "T5", "T6")


@dataclass
class TrialSet:
    data: np.ndarray  # (trials, channels, samples), float32
    rate_hz: float
    montage: str
    labels: np.ndarray | None = None
    scaler: tuple[np.ndarray, np.ndarray] | None = None
    flagged_channels: tuple[int, ...] = ()

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"trial data must be (trials, channels, samples), got {self.data.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.data):
                raise ValueError(f"{len(self.labels)} labels for {len(self.data)} trials")

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def resolve_montage(self) -> Montage:
        m = resolve_montage(self.montage)
        if m.n_channels != self.n_channels:
            raise ValueError(f"montage {m.name} has {m.n_channels} channels, data has {self.n_channels}")
        return m

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return TrialSet(self.data[idx], self.rate_hz, self.montage, labels, self.scaler, self.flagged_channels)


@dataclass
class Band:
    freq_hz: float
    amplitude: float
    channels: tuple[str, ...] | None = None  # None means every channel
    amplitude_jitter: float = 0.0  # relative std of the per-trial amplitude
    coherent: bool = False  # one phase shared by all active channels instead of one per channel


@dataclass
class SyntheticSpec:
    n_trials: int = 200  # per class
    montage: str = "emotiv_14"
    rate_hz: float = 128.0
    duration_s: float = 2.0
    # one recipe per class; bands shared by every class go in ``background``
    classes: list[list[Band]] = field(default_factory=lambda: [
        [Band(10.0, 0.6, POSTERIOR, 0.3, coherent=True)],
        [],
    ])
    background: list[Band] = field(default_factory=lambda: [
        Band(6.0, 0.8, None, 0.5),
        Band(10.0, 0.3, ("AF3", "AF4", "F3", "F4", "F7", "F8"), 0.5),
        Band(20.0, 0.5, None, 0.5),
    ])
    noise_std: float = 1.0
    seed: int = 0

    @property
    def n_samples(self) -> int:
        n = self.duration_s * self.rate_hz
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"duration {self.duration_s} s at {self.rate_hz} Hz is not a whole number of samples")
        return int(round(n))

    def validate(self) -> None:
        if self.n_trials < 1 or not self.classes:
            raise ValueError("need at least one class and one trial per class")
        if self.rate_hz <= 0 or self.duration_s <= 0:
            raise ValueError("rate and duration must be positive")
        self.n_samples
        for band in [b for c in self.classes for b in c] + list(self.background):
            if not 0 < band.freq_hz < self.rate_hz / 2:
                raise ValueError(f"band at {band.freq_hz} Hz violates Nyquist for {self.rate_hz} Hz sampling")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synthetic spec keys: {sorted(extra)}")

        def band(b):
            b = dict(b)
            if b.get("channels") is not None:
                b["channels"] = tuple(b["channels"])
            return Band(**b)

        if "classes" in d:
            d["classes"] = [[band(b) for b in c] for c in d["classes"]]
        if "background" in d:
            d["background"] = [band(b) for b in d["background"]]
        return cls(**d)


def _band_mask(band: Band, montage: Montage) -> np.ndarray:
    if band.channels is None:
        return np.ones(montage.n_channels, dtype=bool)
    return np.array([c in band.channels for c in montage.channels])


def gen_synthetic(spec: SyntheticSpec) -> TrialSet:
    """Sum of random-phase sinusoids per band plus white noise.

    Each trial draws from its own seed derived from (spec seed, class, trial),
    so the set is reproducible and independent of generation order.
    """
    spec.validate()
    montage = resolve_montage(spec.montage)
    T = spec.n_samples
    t = np.arange(T) / spec.rate_hz
    data, labels = [], []
    for k, recipe in enumerate(spec.classes):
        bands = list(spec.background) + list(recipe)
        masks = [_band_mask(b, montage) for b in bands]
        for i in range(spec.n_trials):
            rng = np.random.default_rng([spec.seed, k, i])
            x = rng.normal(0.0, spec.noise_std, size=(montage.n_channels, T)) if spec.noise_std > 0 else np.zeros((montage.n_channels, T))
            for b, m in zip(bands, masks):
                amp = b.amplitude * max(0.0, 1.0 + b.amplitude_jitter * rng.normal())
                phase = rng.uniform(0, 2 * np.pi, size=1 if b.coherent else montage.n_channels)
                x += m[:, None] * amp * np.sin(2 * np.pi * b.freq_hz * t[None] + phase[:, None])
            data.append(x)
            labels.append(k)
    return TrialSet(np.stack(data), spec.rate_hz, spec.montage, np.array(labels))


def band_power(data: np.ndarray, rate_hz: float, freqs, half_width: float = 1.0) -> np.ndarray:
    """Log power in +-half_width Hz windows; (trials, len(freqs) * channels)."""
    data = np.asarray(data, dtype=np.float64)
    P = np.abs(np.fft.rfft(data, axis=-1)) ** 2
    f = np.fft.rfftfreq(data.shape[-1], 1.0 / rate_hz)
    feats = [np.log(P[..., np.abs(f - fc) <= half_width].sum(-1) + 1e-12) for fc in freqs]
    return np.concatenate(feats, axis=1)


# ---------------------------------------------------------------------------
# file format

def write_trials(ts: TrialSet, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "montage": ts.montage,
        "rate_hz": float(ts.rate_hz),
        "n_trials": ts.n_trials,
        "n_channels": ts.n_channels,
        "n_samples": ts.n_samples,
        "has_labels": ts.labels is not None,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        if ts.labels is not None:
            f.write(ts.labels.astype("<i4").tobytes())
        f.write(np.ascontiguousarray(ts.data, dtype="<f4").tobytes())


def read_trials(path) -> TrialSet:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    try:
        h = json.loads(raw[:nl])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: corrupt header: {e}") from None
    if h.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {h.get('format_version')}")
    n, c, s = h["n_trials"], h["n_channels"], h["n_samples"]
    body = raw[nl + 1 :]
    label_bytes = 4 * n if h["has_labels"] else 0
    expected = label_bytes + 4 * n * c * s
    if len(body) != expected:
        raise ValueError(f"{path}: size mismatch, header implies {expected} payload bytes, found {len(body)}")
    labels = np.frombuffer(body[:label_bytes], dtype="<i4").astype(np.int64) if label_bytes else None
    data = np.frombuffer(body[label_bytes:], dtype="<f4").reshape(n, c, s).astype(np.float32)
    return TrialSet(data, h["rate_hz"], h["montage"], labels)


def write_labels_csv(ts: TrialSet, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("trial_id,label,montage,rate_hz,n_samples\n")
        for i in range(ts.n_trials):
            lab = "" if ts.labels is None else int(ts.labels[i])
            f.write(f"{i},{lab},{ts.montage},{ts.rate_hz!r},{ts.n_samples}\n")


# ---------------------------------------------------------------------------
# scaling

SCALE_FLOOR = 1e-8


def standardize(ts: TrialSet, scaler: tuple[np.ndarray, np.ndarray] | None = None) -> TrialSet:
    """Per-channel z-score over all trials and time.

    Pass ``scaler`` to reuse statistics from another split. Channels whose
    std falls below the floor are listed in ``flagged_channels``.
    """
    if ts.n_trials == 0:
        raise ValueError("cannot standardize an empty trial set")
    x = ts.data.astype(np.float64)
    if scaler is None:
        mu = x.mean(axis=(0, 2))
        sd = x.std(axis=(0, 2))
    else:
        mu, sd = (np.asarray(a, dtype=np.float64) for a in scaler)
    flagged = tuple(int(i) for i in np.flatnonzero(sd < SCALE_FLOOR))
    sd = np.maximum(sd, SCALE_FLOOR)
    z = (x - mu[None, :, None]) / sd[None, :, None]
    return TrialSet(z, ts.rate_hz, ts.montage, ts.labels, (mu, sd), flagged)


def inverse_standardize(ts: TrialSet) -> TrialSet:
    if ts.scaler is None:
        raise ValueError("trial set carries no scaler")
    mu, sd = ts.scaler
    x = ts.data.astype(np.float64) * sd[None, :, None] + mu[None, :, None]
    return TrialSet(x, ts.rate_hz, ts.montage, ts.labels)
