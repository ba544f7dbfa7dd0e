"""Temporal semantic random (TSR) masking.

A fixed budget of ``floor((1 - rho) * l)`` visible steps is split into
``beta`` disjoint blocks. The first ``beta - 1`` lengths are drawn uniformly
from the scaled range around the mean block length and the last block takes
the remainder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass(frozen=True)
class MaskSpec:
    sequence_length: int
    visible_blocks: tuple[tuple[int, int], ...]
    mask_ratio: float
    block_count: int
    bounds: tuple[float, float] = (0.5, 1.5)
    # sampled lengths in draw order; placement order is shuffled
    draw_lengths: tuple[int, ...] = field(default=(), compare=False)

    @property
    def visible_count(self) -> int:
        return sum(n for _, n in self.visible_blocks)

    def visibility(self) -> np.ndarray:
        vis = np.zeros(self.sequence_length, dtype=bool)
        for start, n in self.visible_blocks:
            vis[start : start + n] = True
        return vis

    def check(self) -> None:
        """Raise if the block layout violates the TSR invariants."""
        l = self.sequence_length
        spans = sorted(self.visible_blocks)
        if len(spans) != self.block_count:
            raise AssertionError(f"expected {self.block_count} blocks, got {len(spans)}")
        end = 0
        for start, n in spans:
            if n < 1 or start < end or start + n > l:
                raise AssertionError(f"invalid block layout {spans} for length {l}")
            end = start + n
        if self.visible_count != visible_budget(l, self.mask_ratio):
            raise AssertionError("visible total differs from floor((1 - rho) * l)")


def visible_budget(l: int, rho: float) -> int:
    # the epsilon keeps products like 0.3 * 10 from flooring to 2
    return int(math.floor((1.0 - rho) * l + 1e-9))


def block_length_range(total: int, parts: int, alpha_min: float, alpha_max: float) -> tuple[int, int]:
    mean = total / parts
    return math.floor(alpha_min * mean), math.ceil(alpha_max * mean)


def _draw_lengths(
    rng: np.random.Generator, total: int, parts: int, minimum: int, alpha_min: float, alpha_max: float
) -> list[int]:
    lo, hi = block_length_range(total, parts, alpha_min, alpha_max)
    out, left = [], total
    for i in range(parts - 1):
        rest = parts - 1 - i
        a = max(lo, minimum)
        b = min(hi, left - rest * minimum)
        a = min(a, b)
        n = int(rng.integers(a, b + 1))
        out.append(n)
        left -= n
    out.append(left)
    return out


def _edge_flags(u: float, q: float) -> tuple[bool, bool]:
    """Whether the left/right sequence edges start with a visible block.

    Each edge is flush with probability ``q`` and the two events are as
    anti-correlated as those marginals allow.
    """
    if q <= 0.5:
        return u < q, q <= u < 2 * q
    return u < q, u >= 1.0 - q


def sample_tsr_mask(
    l: int,
    rho: float,
    beta: int,
    alpha_min: float = 0.5,
    alpha_max: float = 1.5,
    seed: int | np.random.Generator = 0,
) -> MaskSpec:
    """Draw a TSR mask for one sequence of length ``l``.

    Placement interleaves the shuffled visible blocks with masked gaps whose
    lengths follow the same scaled-uniform law over the masked budget. At most
    one gap sits at each end; an edge starts with a visible block with
    probability ``1 - rho``.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {rho}")
    if alpha_min < 0 or not alpha_min <= 1.0 <= alpha_max:
        raise ValueError(f"invalid bounds alpha_min={alpha_min}, alpha_max={alpha_max}")
    if beta < 1 or l < 1:
        raise ValueError("need l >= 1 and beta >= 1")
    visible = visible_budget(l, rho)
    if visible < beta:
        raise ValueError(f"infeasible: {visible} visible steps cannot form {beta} blocks")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    masked = l - visible

    drawn = _draw_lengths(rng, visible, beta, 1, alpha_min, alpha_max)
    order = rng.permutation(beta)
    lengths = [drawn[i] for i in order]

    left_flush, right_flush = _edge_flags(float(rng.random()), 1.0 - rho)
    if masked == 0:
        left_flush = right_flush = True
    n_gaps = beta - 1 + (not left_flush) + (not right_flush)
    if n_gaps == 0:
        gaps: list[int] = []
    else:
        min_gap = 1 if masked >= n_gaps else 0
        gaps = _draw_lengths(rng, masked, n_gaps, min_gap, alpha_min, alpha_max)
        gaps = [gaps[i] for i in rng.permutation(n_gaps)]
    lead = 0 if left_flush else gaps.pop()
    tail = 0 if right_flush else gaps.pop()
    inner = gaps + [tail]

    blocks, pos = [], lead
    for n, g in zip(lengths, inner):
        blocks.append((pos, n))
        pos += n + g
    return MaskSpec(
        sequence_length=l,
        visible_blocks=tuple(blocks),
        mask_ratio=rho,
        block_count=beta,
        bounds=(alpha_min, alpha_max),
        draw_lengths=tuple(drawn),
    )


def sample_random_mask(l: int, rho: float, seed: int | np.random.Generator = 0) -> MaskSpec:
    """Unstructured baseline: ``l - floor((1-rho) l)`` steps masked uniformly at random."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    visible = visible_budget(l, rho)
    vis = np.zeros(l, dtype=bool)
    vis[rng.choice(l, size=visible, replace=False)] = True
    blocks, t = [], 0
    while t < l:
        if vis[t]:
            s = t
            while t < l and vis[t]:
                t += 1
            blocks.append((s, t - s))
        else:
            t += 1
    return MaskSpec(l, tuple(blocks), rho, len(blocks), (0.0, math.inf))


def full_visibility(l: int) -> MaskSpec:
    return MaskSpec(l, ((0, l),), 0.0, 1)


def apply_mask(
    x: Tensor,
    masks: MaskSpec | Sequence[MaskSpec],
    fill: str | Tensor = "zero",
) -> tuple[Tensor, np.ndarray]:
    """Replace masked time steps on every channel.

    ``masks`` is one spec shared by the batch or one spec per sample.
    ``fill`` is ``"zero"`` or a (C,) token tensor broadcast over masked steps.
    Returns the masked tensor and a boolean visibility array of shape (T,)
    for a shared mask or (B, T) for per-sample masks.
    """
    x = tn.as_tensor(x)
    Bsz, C, T = x.shape
    if isinstance(masks, MaskSpec):
        if masks.sequence_length != T:
            raise ValueError(f"mask length {masks.sequence_length} != sequence length {T}")
        vis = masks.visibility()
        keep = vis[None, None, :]
    else:
        if len(masks) != Bsz:
            raise ValueError(f"{len(masks)} masks for a batch of {Bsz}")
        for m in masks:
            if m.sequence_length != T:
                raise ValueError(f"mask length {m.sequence_length} != sequence length {T}")
        vis = np.stack([m.visibility() for m in masks])
        keep = vis[:, None, :]
    keep_f = keep.astype(x.dtype)
    if isinstance(fill, str):
        if fill != "zero":
            raise ValueError(f"unknown fill policy {fill!r}")
        return x * keep_f, vis
    token = tn.reshape(tn.as_tensor(fill), (1, C, 1))
    return x * keep_f + token * (1.0 - keep_f), vis
