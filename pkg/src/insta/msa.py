"""Frequency-domain channel descriptors.

A feature map is split channel-wise into groups, each group is projected
onto one 2D cosine basis, and the per-channel responses are concatenated
into a single descriptor vector. Global average pooling is the (0,0)
special case (up to the h*w factor) and is kept alongside for ablations.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, _accumulate, _as_tensor, _from_op, mean_over_tail

__all__ = ["FrequencySelection", "dct_basis", "lowest_frequencies", "msa_encode", "gap_encode"]


@dataclass(frozen=True)
class FrequencySelection:
    """An ordered choice of (u,v) cosine frequencies, one per channel group."""

    n: int
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("selection needs at least one group")
        if len(self.pairs) != self.n:
            raise ValueError(f"{len(self.pairs)} pairs for n={self.n}")
        if len(set(self.pairs)) != self.n:
            raise ValueError("frequency pairs must be distinct")
        if self.pairs[0] != (0, 0):
            raise ValueError("the first frequency pair must be (0,0)")
        if any(u < 0 or v < 0 for u, v in self.pairs):
            raise ValueError("frequency indices must be nonnegative")

    def to_config(self) -> list[list[int]]:
        return [[u, v] for u, v in self.pairs]

    @classmethod
    def from_config(cls, pairs) -> "FrequencySelection":
        tup = tuple((int(u), int(v)) for u, v in pairs)
        return cls(n=len(tup), pairs=tup)


def dct_basis(h: int, w: int, u: int, v: int) -> Tensor:
    """Unnormalized 2D cosine basis cos(pi*u/h*(a+1/2)) * cos(pi*v/w*(b+1/2))."""
    if not (0 <= u < h and 0 <= v < w):
        raise ValueError(f"frequency ({u},{v}) out of range for {h}x{w}")
    a = np.cos(math.pi * u / h * (np.arange(h) + 0.5))
    b = np.cos(math.pi * v / w * (np.arange(w) + 0.5))
    return Tensor(np.outer(a, b))


def lowest_frequencies(h: int, w: int, n: int = 16) -> FrequencySelection:
    """The ``n`` lowest frequency pairs on an h x w grid.

    Candidates are all (u,v) with u < min(4,h), v < min(4,w), ordered by
    (u+v, u) ascending. If fewer than ``n`` remain after clipping to the
    grid, the group count is reduced rather than padded.
    """
    if n < 1:
        raise ValueError("need at least one frequency group")
    candidates = [(u, v) for u in range(min(4, h)) for v in range(min(4, w))]
    candidates.sort(key=lambda p: (p[0] + p[1], p[0]))
    pairs = tuple(candidates[:n])
    return FrequencySelection(n=len(pairs), pairs=pairs)


@functools.lru_cache(maxsize=128)
def _basis_stack(sel: FrequencySelection, c: int, h: int, w: int) -> np.ndarray:
    """Per-channel basis weights: channels of group i all use basis (u_i, v_i)."""
    group = c // sel.n
    stack = np.empty((c, h, w))
    for i, (u, v) in enumerate(sel.pairs):
        stack[i * group:(i + 1) * group] = dct_basis(h, w, u, v).data
    return stack


def msa_encode(s: Tensor, sel: FrequencySelection) -> Tensor:
    """Multi-spectral channel descriptor.

    Channels are split in order into ``sel.n`` equal groups; group i is
    contracted against its cosine basis over the spatial axes and the group
    descriptors are concatenated. Accepts a single map (c,h,w) -> (c,) or a
    batch (b,c,h,w) -> (b,c).
    """
    s = _as_tensor(s)
    if s.ndim not in (3, 4):
        raise ShapeError(f"msa_encode: expected rank 3 or 4, got rank {s.ndim}")
    c, h, w = s.shape[-3], s.shape[-2], s.shape[-1]
    if c % sel.n:
        raise ValueError(f"group count {sel.n} does not divide {c} channels")
    weights = _basis_stack(sel, c, h, w)
    data = (s.data * weights).sum(axis=(-2, -1))

    def backward(g):
        _accumulate(s, g[..., None, None] * weights)

    return _from_op(data, (s,), backward)


def gap_encode(s: Tensor) -> Tensor:
    """Global average pooling over the spatial axes: (…,c,h,w) -> (…,c)."""
    s = _as_tensor(s)
    if s.ndim not in (3, 4):
        raise ShapeError(f"gap_encode: expected rank 3 or 4, got rank {s.ndim}")
    return mean_over_tail(s, 2)
