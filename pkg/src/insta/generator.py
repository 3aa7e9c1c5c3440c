"""Shared dynamic-kernel generator.

Two decoupled branches turn a feature map into a position- and
channel-adaptive convolution kernel: the channel branch encodes the map
with the multi-spectral descriptor, expands it through a bottleneck MLP
into one k x k stencil per channel, and repeats that stencil across all
spatial positions; the spatial branch predicts one k x k stencil per
position with a pointwise convolution and repeats it across channels.
Their elementwise product is the fused dynamic kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import msa
from .tensor import (
    BNState,
    ShapeError,
    Tensor,
    batch_norm,
    broadcast,
    conv1x1_batch,
    hadamard,
    linear,
    relu,
    reshape,
    transpose,
)

__all__ = [
    "GeneratorParams",
    "channel_kernel",
    "channel_kernel_batch",
    "spatial_kernel",
    "spatial_kernel_batch",
    "fuse_channel_spatial",
    "generate_dynamic_kernels",
    "param_count_report",
]


@dataclass
class GeneratorParams:
    """Learnable state of the kernel generator.

    One instance is shared between the per-sample and the task-summary
    paths unless an ablation explicitly unshares it. ``encoder`` selects
    the channel descriptor ("msa" or plain "gap").
    """

    mlp_w1: Tensor  # (hidden, c)
    mlp_b1: Tensor  # (hidden,)
    mlp_w2: Tensor  # (k*k*c, hidden)
    mlp_b2: Tensor  # (k*k*c,)
    sp_w: Tensor    # (k*k, c)
    sp_b: Tensor    # (k*k,)
    bn_ch: BNState  # over the c channel stencils
    bn_sp: BNState  # over the k*k position stencils
    sigma: float
    k: int
    selection: msa.FrequencySelection
    encoder: str = "msa"

    @classmethod
    def initialize(cls, c: int, k: int = 3, sigma: float = 0.2,
                   selection: msa.FrequencySelection | None = None,
                   encoder: str = "msa", rng: np.random.Generator | None = None,
                   bias: bool = True, bn_affine: bool = True,
                   bn_momentum: float = 0.1, bn_epsilon: float = 1e-5) -> "GeneratorParams":
        if not 0 < sigma < 1:
            raise ValueError(f"reduction ratio must lie in (0,1), got {sigma}")
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel extent must be odd and positive, got {k}")
        if encoder not in ("msa", "gap"):
            raise ValueError(f"unknown encoder {encoder!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        if selection is None:
            selection = msa.lowest_frequencies(4, 4, 16)
        if c % selection.n:
            raise ValueError(f"group count {selection.n} does not divide {c} channels")
        hidden = max(1, int(sigma * c))

        def weight(rows, cols):
            bound = 1.0 / np.sqrt(cols)
            return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)

        def zeros(size):
            return Tensor(np.zeros(size), requires_grad=bias)

        return cls(
            mlp_w1=weight(hidden, c),
            mlp_b1=zeros(hidden),
            mlp_w2=weight(k * k * c, hidden),
            mlp_b2=zeros(k * k * c),
            sp_w=weight(k * k, c),
            sp_b=zeros(k * k),
            bn_ch=BNState.create(c, momentum=bn_momentum, epsilon=bn_epsilon, affine=bn_affine),
            bn_sp=BNState.create(k * k, momentum=bn_momentum, epsilon=bn_epsilon, affine=bn_affine),
            sigma=sigma,
            k=k,
            selection=selection,
            encoder=encoder,
        )

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.mlp_w1.shape[0]

    def set_mode(self, mode: str) -> None:
        self.bn_ch.mode = mode
        self.bn_sp.mode = mode

    def named_tensors(self):
        yield "mlp_w1", self.mlp_w1
        yield "mlp_b1", self.mlp_b1
        yield "mlp_w2", self.mlp_w2
        yield "mlp_b2", self.mlp_b2
        yield "sp_w", self.sp_w
        yield "sp_b", self.sp_b
        yield "bn_ch.gamma", self.bn_ch.gamma
        yield "bn_ch.beta", self.bn_ch.beta
        yield "bn_sp.gamma", self.bn_sp.gamma
        yield "bn_sp.beta", self.bn_sp.beta

    def copy(self) -> "GeneratorParams":
        def clone(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        return replace(
            self,
            mlp_w1=clone(self.mlp_w1), mlp_b1=clone(self.mlp_b1),
            mlp_w2=clone(self.mlp_w2), mlp_b2=clone(self.mlp_b2),
            sp_w=clone(self.sp_w), sp_b=clone(self.sp_b),
            bn_ch=self.bn_ch.copy(), bn_sp=self.bn_sp.copy(),
        )


def _encode(maps: Tensor, params: GeneratorParams) -> Tensor:
    if params.encoder == "gap":
        return msa.gap_encode(maps)
    return msa.msa_encode(maps, params.selection)


def channel_kernel_batch(maps: Tensor, params: GeneratorParams) -> Tensor:
    """Channel branch over a batch: (b,c,h,w) -> (b,c,h,w,k,k).

    The batch axis is the batch-norm batch, so all kernels generated
    together (instance kernels plus the task kernel of one episode) are
    normalized jointly in train mode.
    """
    if maps.ndim != 4:
        raise ShapeError(f"channel_kernel_batch: expected rank-4 input, got rank {maps.ndim}")
    b, c, h, w = maps.shape
    if c != params.channels:
        raise ShapeError(f"channel_kernel_batch: {c} channels vs generator {params.channels}")
    k = params.k
    tau = _encode(maps, params)                         # (b, c)
    hid = relu(linear(tau, params.mlp_w1, params.mlp_b1))
    v = linear(hid, params.mlp_w2, params.mlp_b2)       # (b, k*k*c)
    stencils = reshape(v, (b, c, k, k))
    stencils = batch_norm(stencils, params.bn_ch)
    return broadcast(stencils, [(2, h), (3, w)])


def channel_kernel(s: Tensor, params: GeneratorParams) -> Tensor:
    """Channel branch for a single map: (c,h,w) -> (c,h,w,k,k)."""
    if s.ndim != 3:
        raise ShapeError(f"channel_kernel: expected rank-3 input, got rank {s.ndim}")
    c, h, w = s.shape
    out = channel_kernel_batch(reshape(s, (1, c, h, w)), params)
    return reshape(out, out.shape[1:])


def spatial_kernel_batch(maps: Tensor, params: GeneratorParams) -> Tensor:
    """Spatial branch over a batch: (b,c,h,w) -> (b,c,h,w,k,k)."""
    if maps.ndim != 4:
        raise ShapeError(f"spatial_kernel_batch: expected rank-4 input, got rank {maps.ndim}")
    b, c, h, w = maps.shape
    k = params.k
    taps = conv1x1_batch(maps, params.sp_w, params.sp_b)   # (b, k*k, h, w)
    taps = batch_norm(taps, params.bn_sp)
    taps = reshape(taps, (b, k, k, h, w))
    taps = transpose(taps, (0, 3, 4, 1, 2))                # (b, h, w, k, k)
    return broadcast(taps, [(1, c)])


def spatial_kernel(s: Tensor, params: GeneratorParams) -> Tensor:
    """Spatial branch for a single map: (c,h,w) -> (c,h,w,k,k)."""
    if s.ndim != 3:
        raise ShapeError(f"spatial_kernel: expected rank-3 input, got rank {s.ndim}")
    c, h, w = s.shape
    out = spatial_kernel_batch(reshape(s, (1, c, h, w)), params)
    return reshape(out, out.shape[1:])


def fuse_channel_spatial(ch: Tensor, sp: Tensor) -> Tensor:
    """Elementwise product of the two branches; shapes must match exactly."""
    if ch.shape != sp.shape:
        raise ShapeError(f"fuse_channel_spatial: {ch.shape} vs {sp.shape}")
    return hadamard(ch, sp)


def generate_dynamic_kernels(maps: Tensor, params: GeneratorParams) -> Tensor:
    """Fused dynamic kernels for a batch of maps: (b,c,h,w) -> (b,c,h,w,k,k)."""
    return fuse_channel_spatial(
        channel_kernel_batch(maps, params),
        spatial_kernel_batch(maps, params),
    )


def param_count_report(c: int, c_out: int, h: int, w: int, k: int) -> dict[str, int]:
    """Value counts of a generated kernel vs a dense convolution weight."""
    if min(c, c_out, h, w, k) < 1:
        raise ValueError("all extents must be positive")
    return {
        "dynamic": c * h * w * k * k,
        "standard": c_out * c * k * k,
    }
