"""The U-shaped SAMBA network.

mask -> spatial embedding -> multi-branch temporal embedding -> three-stage
encoder -> differential Mamba bottleneck -> mirrored decoder -> projection
back to the target montage.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .layers import Conv1d, Linear, Module
from .masking import MaskSpec, apply_mask
from .saie import Montage, SpatialEmbedding, resolve_montage
from .ssm import Mamba2Block
from .tensor import Tensor

BLOCK_KINDS = ("mamba2", "conv", "attention")
BOTTLENECKS = ("mdm", "mamba2")


@dataclass
class ModelConfig:
    target_montage: str = "standard_1020_16"
    d0: int = 16  # width of each temporal branch
    widths: tuple[int, int, int] = (32, 64, 128)
    pools: tuple[int, int] = (4, 4)
    branch_kernels: tuple[int, int, int] = (3, 15, 63)
    stage_kernel: int = 5
    encoder_depths: tuple[int, int, int] = (1, 1, 2)
    decoder_depths: tuple[int, int] = (2, 2)
    heads: int = 4
    lambda_init: float = 0.5
    mdm_groups: int = 1
    mdm_residual: bool = True
    bottleneck: str = "mdm"
    block: str = "mamba2"
    kernel: str = "scan"
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    headdim: int = 16
    saie_hidden: int = 64
    mask_fill: str = "zero"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.pools = tuple(self.pools)
        self.branch_kernels = tuple(self.branch_kernels)
        self.encoder_depths = tuple(self.encoder_depths)
        self.decoder_depths = tuple(self.decoder_depths)
        self.validate()

    def validate(self) -> None:
        if len(self.widths) != 3 or len(self.pools) != 2 or len(self.branch_kernels) != 3:
            raise ValueError("need three stage widths, two pooling factors and three branch kernels")
        if self.widths[2] % self.heads:
            raise ValueError(f"bottleneck width {self.widths[2]} not divisible by {self.heads} heads")
        if any(p < 2 for p in self.pools):
            raise ValueError("pooling factors must be >= 2")
        if self.block not in BLOCK_KINDS:
            raise ValueError(f"block must be one of {BLOCK_KINDS}")
        if self.bottleneck not in BOTTLENECKS:
            raise ValueError(f"bottleneck must be one of {BOTTLENECKS}")
        if self.kernel not in ("scan", "quadratic"):
            raise ValueError("kernel must be 'scan' or 'quadratic'")
        if self.mask_fill not in ("zero", "token"):
            raise ValueError("mask_fill must be 'zero' or 'token'")
        if min(self.encoder_depths) < 1 or min(self.decoder_depths) < 1:
            raise ValueError("stage depths must be >= 1")

    @property
    def downsample(self) -> int:
        return self.pools[0] * self.pools[1]


def tiny_config(**overrides) -> ModelConfig:
    """A few-thousand-parameter network for gradient checks and quick tests."""
    base = dict(
        d0=4,
        widths=(8, 8, 16),
        pools=(2, 2),
        branch_kernels=(3, 5, 7),
        stage_kernel=3,
        encoder_depths=(1, 1, 1),
        decoder_depths=(1, 1),
        heads=2,
        d_state=4,
        headdim=4,
        saie_hidden=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# sequence blocks operating on (B, T, d)

class ConvBlock(Module):
    """Convolutional stand-in for a Mamba2 block (pre-norm, causal conv, SiLU, residual)."""

    def __init__(self, d: int, rng: np.random.Generator, kernel: int = 5, residual: bool = True):
        self.norm_scale = tn.parameter(np.ones(d))
        self.conv = Conv1d(d, 2 * d, kernel, rng, causal=True)
        self.out_proj = Linear(2 * d, d, rng, bias=False)
        self._residual = residual

    def forward(self, x: Tensor, kernel: str | None = None) -> Tensor:
        h = tn.rms_norm(x, self.norm_scale)
        h = tn.silu(tn.swapaxes(self.conv(tn.swapaxes(h, 1, 2)), 1, 2))
        out = self.out_proj(h)
        return x + out if self._residual else out


class AttentionBlock(Module):
    """Causal softmax self-attention; memory grows with T^2."""

    def __init__(self, d: int, rng: np.random.Generator, head_dim: int = 16, residual: bool = True):
        self.heads = max(1, d // head_dim)
        self.norm_scale = tn.parameter(np.ones(d))
        self.qkv = Linear(d, 3 * d, rng, bias=False)
        self.out_proj = Linear(d, d, rng, bias=False)
        self._residual = residual

    def forward(self, x: Tensor, kernel: str | None = None) -> Tensor:
        Bsz, T, d = x.shape
        H, hd = self.heads, d // self.heads
        q, k, v = tn.split(self.qkv(tn.rms_norm(x, self.norm_scale)), [d, d, d], axis=-1)

        def heads(t):
            return tn.transpose(tn.reshape(t, (Bsz, T, H, hd)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
        causal = np.tril(np.ones((T, T), dtype=bool))
        att = tn.softmax(tn.where(causal, scores, -1e9), axis=-1)
        y = tn.reshape(tn.transpose(tn.matmul(att, v), (0, 2, 1, 3)), (Bsz, T, d))
        out = self.out_proj(y)
        return x + out if self._residual else out


def make_block(cfg: ModelConfig, d: int, rng: np.random.Generator, residual: bool = True) -> Module:
    if cfg.block == "mamba2":
        blk = Mamba2Block(d, rng, d_state=cfg.d_state, expand=cfg.expand, d_conv=cfg.d_conv, headdim=cfg.headdim)
        blk.kernel = cfg.kernel
        blk.residual = residual
        return blk
    if cfg.block == "conv":
        return ConvBlock(d, rng, kernel=cfg.stage_kernel, residual=residual)
    return AttentionBlock(d, rng, head_dim=cfg.headdim, residual=residual)


def run_blocks(blocks: Sequence[Module], f: Tensor) -> Tensor:
    """Apply sequence blocks to a channel-first (B, C, T) map."""
    h = tn.swapaxes(f, 1, 2)
    for blk in blocks:
        h = blk(h)
    return tn.swapaxes(h, 1, 2)


# ---------------------------------------------------------------------------
# network parts

class TemporalEmbedding(Module):
    """Three same-length convolutions (short/mid/long kernels), concatenated and projected."""

    def __init__(self, c_in: int, d0: int, d_out: int, kernels: Sequence[int], rng: np.random.Generator):
        self.kernels = tuple(kernels)
        self.branches = [Conv1d(c_in, d0, k, rng) for k in kernels]
        self.proj = Conv1d(d0 * len(kernels), d_out, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        need = max(self.kernels) // 2 + 1
        if x.shape[-1] < need:
            raise ValueError(f"sequence length {x.shape[-1]} below {need} required by kernel {max(self.kernels)}")
        return self.proj(tn.concat([b(x) for b in self.branches], axis=1))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d1, d2, d3 = cfg.widths
        self.pools = cfg.pools
        self.proj1 = Conv1d(d1, d1, 1, rng)
        self.blocks1 = [make_block(cfg, d1, rng) for _ in range(cfg.encoder_depths[0])]
        self.conv2 = Conv1d(d1, d2, cfg.stage_kernel, rng, causal=True)
        self.blocks2 = [make_block(cfg, d2, rng) for _ in range(cfg.encoder_depths[1])]
        self.conv3 = Conv1d(d2, d3, cfg.stage_kernel, rng, causal=True)
        self.blocks3 = [make_block(cfg, d3, rng) for _ in range(cfg.encoder_depths[2])]

    def forward(self, f: Tensor) -> tuple[Tensor, list[Tensor]]:
        T = f.shape[-1]
        if T % (self.pools[0] * self.pools[1]):
            raise ValueError(f"length {T} not divisible by total pooling {self.pools[0] * self.pools[1]}")
        s1 = run_blocks(self.blocks1, self.proj1(f))
        s2 = run_blocks(self.blocks2, tn.maxpool1d(self.conv2(s1), self.pools[0]))
        s3 = run_blocks(self.blocks3, tn.maxpool1d(self.conv3(s2), self.pools[1]))
        return s3, [s1, s2, s3]


class MultiHeadDifferentialMamba(Module):
    """Per head: GroupNorm(M1(x_h) - lambda_h * M2(x_h)); concat, project, residual add."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        D = cfg.widths[2]
        self.heads = cfg.heads
        self.head_dim = D // cfg.heads
        self.groups = cfg.mdm_groups
        self._residual = cfg.mdm_residual
        d = self.head_dim
        self.path1 = [make_block(cfg, d, rng, residual=False) for _ in range(cfg.heads)]
        self.path2 = [make_block(cfg, d, rng, residual=False) for _ in range(cfg.heads)]
        self.lambdas = [tn.parameter(np.full(d, cfg.lambda_init)) for _ in range(cfg.heads)]
        self.gn_gamma = [tn.parameter(np.ones(d)) for _ in range(cfg.heads)]
        self.gn_beta = [tn.parameter(np.zeros(d)) for _ in range(cfg.heads)]
        self.out_proj = Linear(D, D, rng)

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        for h in range(self.heads):
            yield f"{prefix}lambdas.{h}", self.lambdas[h]
            yield f"{prefix}gn_gamma.{h}", self.gn_gamma[h]
            yield f"{prefix}gn_beta.{h}", self.gn_beta[h]

    def head_outputs(self, x: Tensor) -> list[Tensor]:
        """Normalized differential outputs per head, each (B, T, d)."""
        d = self.head_dim
        out = []
        for h in range(self.heads):
            xh = x[:, :, h * d : (h + 1) * d]
            diff = self.path1[h](xh) - self.path2[h](xh) * self.lambdas[h]
            gn = tn.groupnorm(tn.swapaxes(diff, 1, 2), self.groups, self.gn_gamma[h], self.gn_beta[h])
            out.append(tn.swapaxes(gn, 1, 2))
        return out

    def forward(self, x: Tensor) -> Tensor:
        """x: (B, T, D) -> (B, T, D)."""
        if x.shape[-1] != self.heads * self.head_dim:
            raise ValueError(f"feature width {x.shape[-1]} not divisible into {self.heads} heads")
        y = self.out_proj(tn.concat(self.head_outputs(x), axis=-1))
        return x + y if self._residual else y


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, c_out: int, rng: np.random.Generator):
        d1, d2, d3 = cfg.widths
        self.pools = cfg.pools
        self.conv2 = Conv1d(d3, d2, cfg.stage_kernel, rng, causal=True)
        self.blocks2 = [make_block(cfg, d2, rng) for _ in range(cfg.decoder_depths[0])]
        self.conv1 = Conv1d(d2, d1, cfg.stage_kernel, rng, causal=True)
        self.blocks1 = [make_block(cfg, d1, rng) for _ in range(cfg.decoder_depths[1])]
        self.head = Conv1d(d1, c_out, 1, rng)

    def forward(self, z: Tensor, skips: Sequence[Tensor]) -> Tensor:
        s1, s2 = skips[0], skips[1]
        if z.shape[-1] * self.pools[1] != s2.shape[-1] or s2.shape[-1] * self.pools[0] != s1.shape[-1]:
            raise ValueError("bottleneck and skip lengths are inconsistent with the pooling factors")
        u2 = run_blocks(self.blocks2, self.conv2(tn.upsample_linear(z, self.pools[1])) + s2)
        u1 = run_blocks(self.blocks1, self.conv1(tn.upsample_linear(u2, self.pools[0])) + s1)
        return self.head(u1)


@dataclass
class ForwardOutput:
    reconstruction: Tensor  # (B, C_out, T)
    target: Tensor  # (B, C_out, T), no gradient path
    latent: Tensor  # (B, d3, T') after the bottleneck
    taps: dict[str, Tensor] = field(default_factory=dict)
    visibility: np.ndarray | None = None


class SambaModel(Module):
    def __init__(self, cfg: ModelConfig, target: Montage | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._target = target if target is not None else resolve_montage(cfg.target_montage)
        c_out = self._target.n_channels
        d1, d2, d3 = cfg.widths
        self.saie = SpatialEmbedding(self._target, rng, hidden=cfg.saie_hidden)
        self.mask_token = tn.parameter(np.zeros(c_out)) if cfg.mask_fill == "token" else None
        self.embed = TemporalEmbedding(c_out, cfg.d0, d1, cfg.branch_kernels, rng)
        self.encoder = Encoder(cfg, rng)
        if cfg.bottleneck == "mdm":
            self.bottleneck = MultiHeadDifferentialMamba(cfg, rng)
        else:
            self.bottleneck = make_block(cfg, d3, rng)
        self.decoder = Decoder(cfg, c_out, rng)
        # float32-representable values so the float32 checkpoint blob is lossless
        for p in self.parameters():
            p.data = p.data.astype(np.float32).astype(p.dtype)

    @property
    def target_montage(self) -> Montage:
        return self._target

    def set_kernel(self, kind: str) -> None:
        """Switch every SSD layer between the scan and quadratic forms."""
        if kind not in ("scan", "quadratic"):
            raise ValueError(kind)
        self.cfg.kernel = kind
        for mod in self.modules():
            if isinstance(mod, Mamba2Block):
                mod.kernel = kind

    def modules(self):
        stack: list = [self]
        while stack:
            m = stack.pop()
            yield m
            for v in vars(m).values():
                if isinstance(v, Module):
                    stack.append(v)
                elif isinstance(v, (list, tuple)):
                    stack.extend(i for i in v if isinstance(i, Module))

    def bottleneck_forward(self, z: Tensor) -> Tensor:
        """(B, d3, T') -> (B, d3, T')."""
        h = tn.swapaxes(z, 1, 2)
        return tn.swapaxes(self.bottleneck(h), 1, 2)

    def padded_length(self, T: int) -> int:
        m = self.cfg.downsample
        return -(-T // m) * m

    def embed_input(self, x: Tensor, montage_in: Montage) -> Tensor:
        return self.saie(x, montage_in)

    def forward(
        self,
        x,
        montage_in: Montage,
        mask: MaskSpec | Sequence[MaskSpec] | None = None,
    ) -> ForwardOutput:
        x = tn.as_tensor(x)
        if x.ndim != 3:
            raise ValueError(f"expected (B, C, T) input, got {x.shape}")
        T = x.shape[-1]
        with tn.no_grad():
            target = tn.Tensor(self.saie(x, montage_in).data)
        vis = None
        if mask is not None and self.cfg.mask_fill == "zero":
            xm, vis = apply_mask(x, mask, "zero")
            xp = self.saie(xm, montage_in)
        else:
            xp = self.saie(x, montage_in)
            if mask is not None:
                xp, vis = apply_mask(xp, mask, self.mask_token)
        Tp = self.padded_length(T)
        if Tp != T:
            xp = tn.pad_time(xp, 0, Tp - T, mode="edge")
        f = self.embed(xp)
        z, skips = self.encoder(f)
        latent = self.bottleneck_forward(z)
        rec = self.decoder(latent, skips)
        if Tp != T:
            rec = rec[:, :, :T]
        return ForwardOutput(rec, target, latent, {"encoder": z, "mdm": latent}, vis)

    def parameter_inventory(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, p.shape) for n, p in self.named_parameters()]
