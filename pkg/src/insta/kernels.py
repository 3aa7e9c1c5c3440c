"""Instance and task kernels, their fusion, and dynamic convolution.

An instance kernel is generated from a single support feature map; the
task kernel is generated from a permutation-invariant summary of the
whole support set produced by the context module. Fusing the two gives a
kernel aware of both the individual sample and the episode. Applying a
kernel is an unfolded Hadamard product averaged over the k x k taps plus
a residual; a brute-force sliding-window implementation serves as the
verification oracle for that equivalence.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .generator import GeneratorParams, channel_kernel, fuse_channel_spatial, spatial_kernel
from .tensor import (
    ShapeError,
    Tensor,
    add,
    conv1x1,
    conv1x1_batch,
    hadamard,
    mean_over_tail,
    relu,
    reshape,
    sorted_sum,
    stack,
    unfold,
    unfold_batch,
)

__all__ = [
    "KernelKind",
    "DynamicKernel",
    "ContextParams",
    "instance_kernels",
    "context_summary",
    "context_summary_batch",
    "task_kernel",
    "fuse_insta",
    "adapt",
    "adapt_batch",
    "dynamic_conv_oracle",
]


class KernelKind(enum.Enum):
    CHANNEL = "channel"
    SPATIAL = "spatial"
    DYN = "dyn"
    INSTANCE = "instance"
    TASK = "task"
    INSTA = "insta"


@dataclass
class DynamicKernel:
    """A rank-5 kernel (c,h,w,k,k) tagged with its provenance kind."""

    values: Tensor
    kind: KernelKind

    def __post_init__(self):
        if self.values.ndim != 5:
            raise ShapeError(f"dynamic kernel must be rank 5, got rank {self.values.ndim}")
        if self.values.shape[-1] != self.values.shape[-2]:
            raise ShapeError(f"trailing extents must match, got {self.values.shape}")

    @property
    def k(self) -> int:
        return self.values.shape[-1]


@dataclass
class ContextParams:
    """Four pointwise conv layers around a summation: two applied per
    sample with shared weights, two applied to the summed representation."""

    pre_w1: Tensor
    pre_b1: Tensor
    pre_w2: Tensor
    pre_b2: Tensor
    post_w1: Tensor
    post_b1: Tensor
    post_w2: Tensor
    post_b2: Tensor

    def __post_init__(self):
        c = self.pre_w1.shape[1]
        for name, t in self.named_tensors():
            want = (c, c) if name.endswith(("w1", "w2")) else (c,)
            if t.shape != want:
                raise ShapeError(f"context layer {name}: expected {want}, got {t.shape}")

    @classmethod
    def initialize(cls, c: int, rng: np.random.Generator | None = None) -> "ContextParams":
        if rng is None:
            rng = np.random.default_rng(0)
        bound = 1.0 / np.sqrt(c)

        def weight():
            return Tensor(rng.uniform(-bound, bound, size=(c, c)), requires_grad=True)

        def bias():
            return Tensor(np.zeros(c), requires_grad=True)

        return cls(weight(), bias(), weight(), bias(), weight(), bias(), weight(), bias())

    @property
    def channels(self) -> int:
        return self.pre_w1.shape[1]

    def named_tensors(self):
        yield "pre_w1", self.pre_w1
        yield "pre_b1", self.pre_b1
        yield "pre_w2", self.pre_w2
        yield "pre_b2", self.pre_b2
        yield "post_w1", self.post_w1
        yield "post_b1", self.post_b1
        yield "post_w2", self.post_w2
        yield "post_b2", self.post_b2

    def copy(self) -> "ContextParams":
        clones = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                  for n, t in self.named_tensors()}
        return ContextParams(**clones)


def instance_kernels(supports: list[Tensor], gen: GeneratorParams) -> list[DynamicKernel]:
    """One fused dynamic kernel per support feature map, order preserved."""
    if not supports:
        raise ValueError("instance_kernels: empty support list")
    shape = supports[0].shape
    if any(s.shape != shape for s in supports):
        raise ShapeError("instance_kernels: support maps must share one shape")
    kernels = []
    for s in supports:
        fused = fuse_channel_spatial(channel_kernel(s, gen), spatial_kernel(s, gen))
        kernels.append(DynamicKernel(fused, KernelKind.INSTANCE))
    return kernels


def _context_forward(pre_features: Tensor, ctx: ContextParams) -> Tensor:
    """Shared tail of the context module: sum the per-sample features, then
    apply the two post layers. ``pre_features`` is (b,c,h,w)."""
    pooled = sorted_sum(pre_features, axis=0)  # bit-exact under permutations
    out = relu(conv1x1(pooled, ctx.post_w1, ctx.post_b1))
    return conv1x1(out, ctx.post_w2, ctx.post_b2)


def context_summary(supports: list[Tensor], ctx: ContextParams) -> Tensor:
    """Aggregate a support set into one task representation (c,h,w)."""
    if not supports:
        raise ValueError("context_summary: empty support list")
    pre = []
    for s in supports:
        if s.ndim != 3:
            raise ShapeError(f"context_summary: support maps must be rank 3, got {s.shape}")
        t = relu(conv1x1(s, ctx.pre_w1, ctx.pre_b1))
        pre.append(conv1x1(t, ctx.pre_w2, ctx.pre_b2))
    return _context_forward(stack(pre, axis=0), ctx)


def context_summary_batch(supports: Tensor, ctx: ContextParams) -> Tensor:
    """Batched variant of :func:`context_summary` on a (b,c,h,w) stack."""
    if supports.ndim != 4:
        raise ShapeError(f"context_summary_batch: expected rank 4, got rank {supports.ndim}")
    t = relu(conv1x1_batch(supports, ctx.pre_w1, ctx.pre_b1))
    pre = conv1x1_batch(t, ctx.pre_w2, ctx.pre_b2)
    return _context_forward(pre, ctx)


def task_kernel(summary: Tensor, gen: GeneratorParams) -> DynamicKernel:
    """Dynamic kernel generated from the task summary via the same generator."""
    if summary.ndim != 3:
        raise ShapeError(f"task_kernel: expected rank-3 summary, got rank {summary.ndim}")
    fused = fuse_channel_spatial(channel_kernel(summary, gen), spatial_kernel(summary, gen))
    return DynamicKernel(fused, KernelKind.TASK)


def fuse_insta(inst: DynamicKernel, task: DynamicKernel) -> DynamicKernel:
    """Elementwise fusion of an instance kernel with the task kernel."""
    if inst.kind is not KernelKind.INSTANCE or task.kind is not KernelKind.TASK:
        raise ValueError(f"fuse_insta: expected (instance, task), got ({inst.kind.value}, {task.kind.value})")
    if inst.values.shape != task.values.shape:
        raise ShapeError(f"fuse_insta: {inst.values.shape} vs {task.values.shape}")
    return DynamicKernel(hadamard(inst.values, task.values), KernelKind.INSTA)


def adapt(feature: Tensor, kernel: DynamicKernel) -> Tensor:
    """Dynamic convolution with residual on a single map.

    out = mean over the k x k taps of unfold(feature) * kernel, plus the
    original feature map.
    """
    if feature.ndim != 3:
        raise ShapeError(f"adapt: expected rank-3 feature, got rank {feature.ndim}")
    if kernel.values.shape[:3] != feature.shape:
        raise ShapeError(f"adapt: feature {feature.shape} vs kernel {kernel.values.shape}")
    taps = unfold(feature, kernel.k)
    return add(mean_over_tail(hadamard(taps, kernel.values), 2), feature)


def adapt_batch(features: Tensor, kernel_values: Tensor) -> Tensor:
    """Batched adaptation: (b,c,h,w) features with (b|1,c,h,w,k,k) kernels."""
    if features.ndim != 4 or kernel_values.ndim != 6:
        raise ShapeError(f"adapt_batch: features {features.shape}, kernels {kernel_values.shape}")
    if kernel_values.shape[1:4] != features.shape[1:]:
        raise ShapeError(f"adapt_batch: features {features.shape} vs kernels {kernel_values.shape}")
    k = kernel_values.shape[-1]
    taps = unfold_batch(features, k)
    return add(mean_over_tail(hadamard(taps, kernel_values), 2), features)


def dynamic_conv_oracle(feature: Tensor, kernel: DynamicKernel) -> Tensor:
    """Sliding-window reference for the non-residual part of :func:`adapt`.

    Walks every output cell explicitly and averages the k x k products
    against a zero-padded copy of the feature map. Deliberately written as
    loops so it stays independent of the unfold-based fast path.
    """
    if feature.ndim != 3:
        raise ShapeError(f"dynamic_conv_oracle: expected rank-3 feature, got rank {feature.ndim}")
    if kernel.values.shape[:3] != feature.shape:
        raise ShapeError(f"dynamic_conv_oracle: feature {feature.shape} vs kernel {kernel.values.shape}")
    c, h, w = feature.shape
    k = kernel.k
    pad = (k - 1) // 2
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad))
    padded[:, pad:pad + h, pad:pad + w] = feature.data
    g = kernel.values.data
    out = np.empty((c, h, w))
    for ch in range(c):
        for a in range(h):
            for b in range(w):
                window = padded[ch, a:a + k, b:b + k]
                out[ch, a, b] = float((window * g[ch, a, b]).sum()) / (k * k)
    return Tensor(out)
