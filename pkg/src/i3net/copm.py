"""Category-aware object pattern matching on the low-level tap.

Low-level features are fused with the detector's class posteriors through a
randomized multilinear map, reduced to a spatial attention map (channel sum
of squares), and the L2-normalized source and target maps are pulled
together. A per-pixel domain discriminator behind gradient reversal adds a
plain adversarial term.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Conv2d, Module

logger = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)


class RandomProjections:
    """Frozen R1 (fused x C) and R2 (fused x (K+1)), entries uniform on [-sqrt3, sqrt3].

    Entries are stored at float32 precision so checkpoints reproduce them bit-exactly.
    """

    def __init__(self, channels: int, num_outputs: int, fused_dim: int = 64,
                 rng: np.random.Generator | None = None, r1: np.ndarray | None = None, r2: np.ndarray | None = None):
        if r1 is None or r2 is None:
            rng = rng or np.random.default_rng(0)
            r1 = rng.uniform(-SQRT3, SQRT3, size=(fused_dim, channels))
            r2 = rng.uniform(-SQRT3, SQRT3, size=(fused_dim, num_outputs))
        self.r1 = np.asarray(r1, dtype=np.float32).astype(np.float64)
        self.r2 = np.asarray(r2, dtype=np.float32).astype(np.float64)
        if self.r1.shape[0] != self.r2.shape[0]:
            raise ShapeError(f"R1 and R2 disagree on fused dim: {self.r1.shape} vs {self.r2.shape}")

    @property
    def fused_dim(self) -> int:
        return self.r1.shape[0]

    def state(self, prefix: str = "copm.") -> dict[str, np.ndarray]:
        return {prefix + "R1": self.r1, prefix + "R2": self.r2}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], prefix: str = "copm.") -> "RandomProjections":
        return cls(0, 0, r1=state[prefix + "R1"], r2=state[prefix + "R2"])


def fuse(a, p, proj: RandomProjections) -> Tensor:
    """(R1 a) * (R2 p) over the last axis; leading axes broadcast."""
    a, p = ad.as_tensor(a), ad.as_tensor(p)
    if a.shape[-1] != proj.r1.shape[1]:
        raise ShapeError(f"feature dim {a.shape[-1]} != R1 input dim {proj.r1.shape[1]}")
    if p.shape[-1] != proj.r2.shape[1]:
        raise ShapeError(f"prediction dim {p.shape[-1]} != R2 input dim {proj.r2.shape[1]}")
    return ad.mul(ad.matmul(a, proj.r1.T), ad.matmul(p, proj.r2.T))


def fuse_maps(features: Tensor, probs: Tensor, proj: RandomProjections) -> Tensor:
    """Fuse NCHW features with N(K+1)HW posteriors; returns N x fused x H x W."""
    n, c, h, w = features.shape
    if probs.shape[0] != n or probs.shape[2:] != (h, w):
        raise ShapeError(f"posterior map {probs.shape} not aligned with features {features.shape}")
    a = ad.transpose(ad.reshape(features, (n, c, h * w)), (0, 2, 1))
    p = ad.transpose(ad.reshape(probs, (n, probs.shape[1], h * w)), (0, 2, 1))
    fused = fuse(a, p, proj)  # (N, HW, fused)
    return ad.reshape(ad.transpose(fused, (0, 2, 1)), (n, proj.fused_dim, h, w))


def attention_map(fused: Tensor) -> Tensor:
    """Sum of squared activations over the channel axis (third from last)."""
    fused = ad.as_tensor(fused)
    if fused.ndim < 3:
        raise ShapeError(f"attention_map expects (..., C, H, W), got {fused.shape}")
    return ad.tsum(ad.square(fused), axis=-3)


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Linear interpolation weights, half-pixel centers, edges clamped."""
    m = np.zeros((dst, src))
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        x = min(max(x, 0.0), src - 1.0)
        lo = int(math.floor(x))
        hi = min(lo + 1, src - 1)
        t = x - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resampling of an NCHW map as two constant matrix products."""
    n, c, h, w = x.shape
    my = _interp_matrix(h, size[0])
    mx = _interp_matrix(w, size[1])
    y = ad.matmul(ad.matmul(my, x), mx.T)
    return y


def pattern_match_loss(f_s: Tensor, f_t: Tensor) -> Tensor:
    """sqrt(len) * || f_s/|f_s| - f_t/|f_t| ||; zero (with a warning) on a zero-norm map."""
    f_s = ad.reshape(ad.as_tensor(f_s), (-1,))
    f_t = ad.reshape(ad.as_tensor(f_t), (-1,))
    if f_s.shape != f_t.shape:
        raise ShapeError(f"attention maps differ in length: {f_s.shape} vs {f_t.shape}")
    ns = ad.l2_norm(f_s)
    nt = ad.l2_norm(f_t)
    if ns.item() == 0.0 or nt.item() == 0.0:
        logger.warning("zero-norm attention map; pattern-matching term set to 0")
        return Tensor(0.0)
    diff = f_s / ns - f_t / nt
    return ad.l2_norm(diff) * math.sqrt(f_s.size)


class PixelDiscriminator(Module):
    """1x1 conv stack C -> 64 -> 1 producing a per-pixel domain logit."""

    def __init__(self, channels: int, rng: np.random.Generator, hidden: int = 64):
        super().__init__()
        self.conv1 = Conv2d(channels, hidden, 1, rng, padding=0)
        self.conv2 = Conv2d(hidden, 1, 1, rng, padding=0, std=0.01)

    def logits(self, feats: Tensor) -> Tensor:
        return self.conv2(ad.relu(self.conv1(feats)))

    def __call__(self, feats: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(feats))


def pixel_bce(source_logits: Tensor, target_logits: Tensor) -> Tensor:
    """Mean per-pixel BCE over both domains, source labelled 1 and target 0."""
    total = source_logits.size + target_logits.size
    s = ad.tsum(ad.log_sigmoid(source_logits))
    t = ad.tsum(ad.log_sigmoid(-target_logits))
    return -(s + t) * (1.0 / total)


def pixel_adv_loss(low_s: Tensor, low_t: Tensor, disc: PixelDiscriminator, beta: float = 1.0) -> Tensor:
    return pixel_bce(disc.logits(ad.grad_reverse(low_s, beta)), disc.logits(ad.grad_reverse(low_t, beta)))


def copm_loss(l_la, l_adv) -> Tensor:
    return ad.add(l_la, l_adv)


def batch_attention(low: Tensor, head_probs: Tensor, proj: RandomProjections) -> Tensor:
    """Batch-averaged, flattened category-aware attention map for one domain.

    ``head_probs`` is N x (K+1) x h x w from a detection head; it is resampled
    to the low-level tap's grid before fusion.
    """
    h, w = low.shape[2:]
    if head_probs.shape[2:] != (h, w):
        head_probs = resize_bilinear(head_probs, (h, w))
    maps = attention_map(fuse_maps(low, head_probs, proj))  # (N, H, W)
    return ad.reshape(ad.mean(maps, axis=0), (-1,))


def export_pgm(path, amap: np.ndarray) -> None:
    """Write a min-max normalized 8-bit binary PGM (P5)."""
    amap = np.asarray(amap, dtype=np.float64)
    lo, hi = float(amap.min()), float(amap.max())
    scaled = np.zeros_like(amap) if hi <= lo else (amap - lo) / (hi - lo)
    pix = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(raw[-w * h:], dtype=np.uint8).reshape(h, w)
