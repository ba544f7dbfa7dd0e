"""Selective state-space (Mamba2 / SSD) layer.

The same sequence map is available in two forms: a linear-time recurrent scan
and a quadratic form that materializes the lower-triangular semiseparable
matrix. Decay is scalar per head, so ``x`` of width ``d`` is viewed as
``H`` heads of ``d // H`` channels that share one decay each.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import Conv1d, Linear, Module
from .tensor import Tensor

QUADRATIC_MAX_LEN = 4096


@dataclass
class SSMCoefficients:
    """Per-position SSM coefficients.

    dt: (B, T, H) step sizes, strictly positive.
    A: (H,) continuous decay rates, <= 0; discretized decay is exp(dt * A).
    B, C: (B, T, N) input and output rows shared by all heads.
    D: (d,) skip gain per channel.
    """

    dt: Tensor
    A: Tensor
    B: Tensor
    C: Tensor
    D: Tensor

    @property
    def heads(self) -> int:
        return self.dt.shape[-1]

    @property
    def state_size(self) -> int:
        return self.B.shape[-1]

    def validate(self, x: Tensor) -> None:
        Bsz, T, d = x.shape
        if self.dt.shape[:2] != (Bsz, T):
            raise ValueError(f"dt shape {self.dt.shape} does not match input {x.shape}")
        if d % self.heads:
            raise ValueError(f"width {d} not divisible by {self.heads} heads")
        if np.any(self.dt.data <= 0):
            raise ValueError("step sizes must be strictly positive")
        if np.any(self.A.data > 0):
            raise ValueError("decay rates must be <= 0")
        if self.B.shape != (Bsz, T, self.state_size) or self.C.shape != self.B.shape:
            raise ValueError("B/C must have shape (batch, time, state)")


def selective_scan(u: Tensor, decay: Tensor, Bm: Tensor, Cm: Tensor) -> Tensor:
    """Recurrence ``h_t = decay_t h_{t-1} + u_t B_t^T``, ``y_t = h_t C_t``.

    u: (B, T, H, P); decay: (B, T, H); Bm, Cm: (B, T, N). Returns (B, T, H, P).
    The state starts at zero. Without gradient tracking only the running state
    is kept; otherwise every state is stored for the reverse sweep.
    """
    ud, ad, bd, cd = u.data, decay.data, Bm.data, Cm.data
    Bsz, T, H, P = ud.shape
    N = bd.shape[-1]
    track = tn.is_grad_enabled() and any(t.requires_grad for t in (u, decay, Bm, Cm))
    h = np.zeros((Bsz, H, P, N), dtype=ud.dtype)
    if not track:
        y = np.empty_like(ud)
        for t in range(T):
            h = ad[:, t, :, None, None] * h + ud[:, t, :, :, None] * bd[:, t, None, None, :]
            y[:, t] = (h @ cd[:, t, None, :, None])[..., 0]
        return tn._make(y, (u, decay, Bm, Cm), None, "selective_scan")

    # states laid out (B, T, H*P, N) so every contraction below is a batched matmul
    hs = np.empty((Bsz, T, H * P, N), dtype=ud.dtype)
    hv = hs.reshape(Bsz, T, H, P, N)
    for t in range(T):
        h = ad[:, t, :, None, None] * h + ud[:, t, :, :, None] * bd[:, t, None, None, :]
        hv[:, t] = h
    y = np.matmul(hs, cd[..., None]).reshape(Bsz, T, H, P)

    def bw(g):
        ghs = np.empty_like(hs)
        gv = ghs.reshape(Bsz, T, H, P, N)
        gc = g[..., None] * cd[:, :, None, None, :]
        gh = np.zeros((Bsz, H, P, N), dtype=g.dtype)
        for t in range(T - 1, -1, -1):
            gh += gc[:, t]
            gv[:, t] = gh
            gh *= ad[:, t, :, None, None]
        gf = g.reshape(Bsz, T, 1, H * P)
        gC = np.matmul(gf, hs)[:, :, 0]
        gu = np.matmul(ghs, bd[..., None]).reshape(Bsz, T, H, P)
        gB = np.matmul(ud.reshape(Bsz, T, 1, H * P), ghs)[:, :, 0]
        # d y / d decay_t pairs the state gradient at t with the previous state
        ga = np.zeros((Bsz, T, H), dtype=g.dtype)
        ga[:, 1:] = np.einsum("bthpn,bthpn->bth", gv[:, 1:], hv[:, :-1])
        return gu, ga, gB, gC

    return tn._make(y, (u, decay, Bm, Cm), bw, "selective_scan")


def _heads_view(x: Tensor, heads: int) -> Tensor:
    Bsz, T, d = x.shape
    return tn.reshape(x, (Bsz, T, heads, d // heads))


def ssd_scan(x: Tensor, coeffs: SSMCoefficients) -> Tensor:
    """Linear-time SSD: O(T N d) time and O(N d) running state."""
    x = tn.as_tensor(x)
    coeffs.validate(x)
    Bsz, T, d = x.shape
    xh = _heads_view(x, coeffs.heads)
    u = xh * tn.reshape(coeffs.dt, (Bsz, T, coeffs.heads, 1))
    decay = tn.exp(coeffs.dt * coeffs.A)
    y = selective_scan(u, decay, coeffs.B, coeffs.C)
    return tn.reshape(y, (Bsz, T, d)) + x * coeffs.D


def _decay_matrix(coeffs: SSMCoefficients) -> Tensor:
    """L[b, h, t, j] = prod_{k=j+1..t} exp(dt_k A) for j <= t, else 0."""
    T = coeffs.dt.shape[1]
    S = tn.transpose(tn.cumsum(coeffs.dt * coeffs.A, axis=1), (0, 2, 1))  # B,H,T
    diff = tn.reshape(S, S.shape + (1,)) - tn.reshape(S, S.shape[:2] + (1, T))
    causal = np.tril(np.ones((T, T), dtype=bool))
    return tn.where(causal, tn.exp(tn.where(causal, diff, 0.0)), 0.0)


def _materialize(coeffs: SSMCoefficients) -> np.ndarray:
    # in-place build of the full (B, H, T, T) matrix, one buffer of that size
    S = np.cumsum(coeffs.dt.data * coeffs.A.data, axis=1).transpose(0, 2, 1)  # B,H,T
    T = S.shape[-1]
    M = S[..., :, None] - S[..., None, :]
    upper = np.triu_indices(T, 1)
    M[..., upper[0], upper[1]] = -np.inf
    np.exp(M, out=M)
    M *= np.matmul(coeffs.C.data, coeffs.B.data.transpose(0, 2, 1))[:, None]
    return M


def ssd_matrix(coeffs: SSMCoefficients) -> np.ndarray:
    """Materialized (B, H, T, T) matrix M with y = M (dt * x) per head."""
    return _materialize(coeffs)


def ssd_quadratic(x: Tensor, coeffs: SSMCoefficients, max_len: int | None = None) -> Tensor:
    """Quadratic dual form: y = M x + D x with M_tj = C_t^T (prod decay) dt_j B_j."""
    x = tn.as_tensor(x)
    coeffs.validate(x)
    Bsz, T, d = x.shape
    max_len = QUADRATIC_MAX_LEN if max_len is None else max_len
    if T > max_len:
        raise ValueError(f"sequence length {T} above quadratic oracle cap {max_len}")
    xh = _heads_view(x, coeffs.heads)
    u = xh * tn.reshape(coeffs.dt, (Bsz, T, coeffs.heads, 1))
    parts = (x, coeffs.dt, coeffs.A, coeffs.B, coeffs.C, coeffs.D)
    if not (tn.is_grad_enabled() and any(t.requires_grad for t in parts)):
        M = _materialize(coeffs)
        y = np.matmul(M, u.data.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3)
        return tn.Tensor(y.reshape(Bsz, T, d) + x.data * coeffs.D.data)
    L = _decay_matrix(coeffs)
    CB = tn.einsum("btn,bsn->bts", coeffs.C, coeffs.B)
    M = tn.reshape(CB, (Bsz, 1, T, T)) * L
    y = tn.einsum("bhts,bshp->bthp", M, u)
    return tn.reshape(y, (Bsz, T, d)) + x * coeffs.D


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class Mamba2Block(Module):
    """Pre-norm Mamba2 block, with a residual connection unless ``residual=False``.

    norm -> in_proj -> causal depthwise conv + SiLU on (x, B, C) -> SSD ->
    SiLU(z) gate -> out_proj -> residual add.
    """

    def __init__(
        self,
        d_model: int,
        rng: np.random.Generator,
        d_state: int = 16,
        expand: int = 2,
        d_conv: int = 4,
        headdim: int = 16,
        dt_range: tuple[float, float] = (0.01, 0.1),
        residual: bool = True,
    ):
        d_inner = expand * d_model
        if d_inner % headdim:
            headdim = d_inner
        self.d_model = d_model
        self.d_inner = d_inner
        self.d_state = d_state
        self.nheads = d_inner // headdim
        conv_dim = d_inner + 2 * d_state
        self.norm_scale = tn.parameter(np.ones(d_model))
        self.in_proj = Linear(d_model, 2 * d_inner + 2 * d_state + self.nheads, rng, bias=False)
        self.conv = Conv1d(conv_dim, conv_dim, d_conv, rng, causal=True, depthwise=True)
        lo, hi = dt_range
        dt0 = np.exp(np.linspace(np.log(lo), np.log(hi), self.nheads))
        self.dt_bias = tn.parameter(_inverse_softplus(dt0))
        self.A_log = tn.parameter(np.log(np.linspace(1.0, 16.0, self.nheads)))
        self.D = tn.parameter(np.ones(d_inner))
        self.out_proj = Linear(d_inner, d_model, rng, bias=False)
        self.kernel = "scan"
        self.residual = residual

    def coefficients(self, x: Tensor) -> tuple[Tensor, Tensor, SSMCoefficients]:
        """Return (gate z, SSM input, coefficients) for a (B, T, d) input."""
        xn = tn.rms_norm(x, self.norm_scale)
        zxbcdt = self.in_proj(xn)
        di, N, H = self.d_inner, self.d_state, self.nheads
        z, xbc, dt_raw = tn.split(zxbcdt, [di, di + 2 * N, H], axis=-1)
        xbc = tn.swapaxes(tn.silu(self.conv(tn.swapaxes(xbc, 1, 2))), 1, 2)
        xs, Bm, Cm = tn.split(xbc, [di, N, N], axis=-1)
        dt = tn.softplus(dt_raw + self.dt_bias)
        A = -tn.exp(self.A_log)
        return z, xs, SSMCoefficients(dt=dt, A=A, B=Bm, C=Cm, D=self.D)

    def forward(self, x: Tensor, kernel: str | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise ValueError(f"expected (B, T, {self.d_model}) input, got {x.shape}")
        z, xs, coeffs = self.coefficients(x)
        kind = kernel or self.kernel
        if kind == "scan":
            y = ssd_scan(xs, coeffs)
        elif kind == "quadratic":
            y = ssd_quadratic(xs, coeffs)
        else:
            raise ValueError(f"unknown SSD kernel {kind!r}")
        out = self.out_proj(y * tn.silu(z))
        return x + out if self.residual else out
