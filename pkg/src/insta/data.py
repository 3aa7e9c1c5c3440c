"""Procedural synthetic dataset and episode sampling.

Classes are oriented sinusoidal gratings: each class owns an orientation,
a spatial frequency band and (for RGB images) a colour, all derived
deterministically from the class index. Individual samples vary in phase
plus a small orientation/frequency jitter and optional additive Gaussian
noise. Rendering is a pure function of (seed, class, sample index), so no
files are needed and every pixel is reproducible.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["SyntheticTaskConfig", "Episode", "class_parameters", "render_sample", "sample_episode"]

_RENDER_STREAM = 7
_GOLDEN = 0.6180339887498949


@dataclass
class SyntheticTaskConfig:
    """Generator settings for the synthetic grating classes."""

    class_count: int = 10
    image_size: tuple[int, int, int] = (3, 40, 40)  # (channels, H, W)
    samples_per_class: int = 4096
    orientation_span: tuple[float, float] = (0.0, math.pi)
    frequency_span: tuple[float, float] = (1.5, 4.5)  # cycles across the image
    orientation_jitter: float = 0.03
    frequency_jitter: float = 0.05
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 1:
            raise ValueError("need at least one class")
        if len(self.image_size) != 3 or min(self.image_size) < 1:
            raise ValueError(f"bad image_size {self.image_size}")
        if self.image_size[0] not in (1, 3):
            raise ValueError("image channels must be 1 (grey) or 3 (rgb)")
        if self.samples_per_class < 1:
            raise ValueError("need at least one sample per class")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass
class Episode:
    """One sampled N-way K-shot task."""

    support_images: np.ndarray  # (N*K, ch, H, W)
    support_labels: np.ndarray  # (N*K,) ints in [0, N)
    query_images: np.ndarray    # (N*Q, ch, H, W)
    query_labels: np.ndarray    # (N*Q,)
    n_way: int
    k_shot: int
    class_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        counts = np.bincount(self.support_labels, minlength=self.n_way)
        if not np.all(counts == self.k_shot):
            raise ValueError(f"expected {self.k_shot} supports per class, got {counts}")
        for labels in (self.support_labels, self.query_labels):
            if labels.size and (labels.min() < 0 or labels.max() >= self.n_way):
                raise ValueError("labels must lie in [0, N)")


def class_parameters(cfg: SyntheticTaskConfig, class_id: int) -> dict:
    """Deterministic per-class pattern parameters."""
    if not 0 <= class_id < cfg.class_count:
        raise ValueError(f"class {class_id} out of range [0,{cfg.class_count})")
    frac = class_id / cfg.class_count
    o_lo, o_hi = cfg.orientation_span
    f_lo, f_hi = cfg.frequency_span
    channels = cfg.image_size[0]
    if channels == 3:
        color = np.array(colorsys.hsv_to_rgb(frac, 0.85, 1.0))
    else:
        color = np.array([1.0])
    return {
        "orientation": o_lo + (o_hi - o_lo) * frac,
        "frequency": f_lo + (f_hi - f_lo) * ((class_id * _GOLDEN) % 1.0),
        "color": color,
    }


def render_sample(cfg: SyntheticTaskConfig, class_id: int, sample_idx: int) -> np.ndarray:
    """Render one (ch,H,W) image; pure in (cfg.seed, class_id, sample_idx)."""
    if not 0 <= sample_idx < cfg.samples_per_class:
        raise ValueError(f"sample index {sample_idx} out of range")
    params = class_parameters(cfg, class_id)
    rng = np.random.default_rng([cfg.seed, _RENDER_STREAM, class_id, sample_idx])
    theta = params["orientation"] + rng.normal(0.0, cfg.orientation_jitter)
    freq = params["frequency"] * (1.0 + rng.normal(0.0, cfg.frequency_jitter))
    phase = rng.uniform(0.0, 2.0 * math.pi)

    ch, height, width = cfg.image_size
    yy = np.arange(height)[:, None] / height
    xx = np.arange(width)[None, :] / width
    ridge = xx * math.cos(theta) + yy * math.sin(theta)
    wave = np.sin(2.0 * math.pi * freq * ridge + phase)
    image = params["color"][:, None, None] * wave[None, :, :]
    if cfg.noise_std > 0:
        image = image + cfg.noise_std * rng.standard_normal(image.shape)
    return image


def sample_episode(cfg: SyntheticTaskConfig, n_way: int, k_shot: int, q_per: int,
                   rng: np.random.Generator) -> Episode:
    """Draw an N-way K-shot episode with disjoint support and query samples."""
    if n_way > cfg.class_count:
        raise ValueError(f"cannot draw {n_way} classes from {cfg.class_count}")
    if n_way < 1 or k_shot < 1 or q_per < 1:
        raise ValueError("n_way, k_shot and q_per must be positive")
    if k_shot + q_per > cfg.samples_per_class:
        raise ValueError(f"need {k_shot + q_per} samples per class, have {cfg.samples_per_class}")

    class_ids = rng.choice(cfg.class_count, size=n_way, replace=False)
    support_images, query_images = [], []
    support_labels, query_labels = [], []
    for label, class_id in enumerate(class_ids):
        picks = rng.choice(cfg.samples_per_class, size=k_shot + q_per, replace=False)
        for idx in picks[:k_shot]:
            support_images.append(render_sample(cfg, int(class_id), int(idx)))
            support_labels.append(label)
        for idx in picks[k_shot:]:
            query_images.append(render_sample(cfg, int(class_id), int(idx)))
            query_labels.append(label)
    return Episode(
        support_images=np.stack(support_images),
        support_labels=np.array(support_labels, dtype=np.int64),
        query_images=np.stack(query_images),
        query_labels=np.array(query_labels, dtype=np.int64),
        n_way=n_way,
        k_shot=k_shot,
        class_ids=np.asarray(class_ids, dtype=np.int64),
    )
