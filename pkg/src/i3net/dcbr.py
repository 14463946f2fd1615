"""Dynamic class-balanced reweighting of target images for image-level alignment.

A frozen multi-label classifier on the ``g1`` tap scores every target image.
Its confident scores give an easiness weight (``compute_w1``); its argmax
splits the target set into pseudo classes whose sizes give a scarcity weight
(``compute_w2``). The blend of the two scales each target term of the
image-level adversarial loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Linear, Module

PROB_CLAMP = 1e-7


class MultiLabelClassifier(Module):
    """Global-average-pooled ``g1`` features -> one affine layer -> K sigmoids."""

    def __init__(self, in_channels: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(in_channels, num_classes, rng, std=0.01)
        object.__setattr__(self, "frozen", False)

    def logits(self, g1: Tensor) -> Tensor:
        return self.fc(ad.mean(g1, axis=(2, 3)))

    def __call__(self, g1: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(g1))

    def freeze(self) -> None:
        self.set_frozen(True)
        object.__setattr__(self, "frozen", True)


class ImageDiscriminator(Module):
    """Pooled ``g2`` features -> 64 hidden ReLU units -> domain logit (source = 1)."""

    def __init__(self, in_channels: int, rng: np.random.Generator, hidden: int = 64):
        super().__init__()
        self.fc1 = Linear(in_channels, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng, std=0.01)

    def logits(self, feats: Tensor) -> Tensor:
        pooled = ad.mean(feats, axis=(2, 3)) if feats.ndim == 4 else feats
        return ad.reshape(self.fc2(ad.relu(self.fc1(pooled))), (-1,))

    def __call__(self, feats: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(feats))


def multilabel_targets(annotations, num_classes: int) -> np.ndarray:
    """Image-level presence vectors: y_k = 1 iff some object has class k."""
    y = np.zeros((len(annotations), num_classes))
    for i, ann in enumerate(annotations):
        for a in ann:
            y[i, a.class_id] = 1.0
    return y


def mlc_loss(y, y_hat) -> Tensor:
    """Binary cross-entropy summed over classes (averaged over a leading batch axis)."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    y_hat = ad.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError(f"mlc_loss: label shape {y.shape} != prediction shape {y_hat.shape}")
    p = ad.clamp(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per = -(ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y))
    total = ad.tsum(per, axis=-1)
    return ad.mean(total) if total.ndim else total


def compute_w1(y_hat: Sequence[float], tau: float = 0.5) -> float:
    """Mean of the scores above ``tau`` plus one; 1.0 when none qualifies."""
    scores = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    confident = scores[scores > tau]
    if confident.size == 0:
        return 1.0
    return float(confident.sum() / confident.size + 1.0)


@dataclass
class TargetSplit:
    assignments: np.ndarray  # per-sample pseudo class
    counts: np.ndarray  # N_t^k

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_scores(cls, scores: np.ndarray, num_classes: int | None = None) -> "TargetSplit":
        scores = np.asarray(scores, dtype=np.float64)
        k = scores.shape[1] if num_classes is None else num_classes
        assign = scores.argmax(axis=1)  # first maximum: ties go to the lowest class index
        return cls(assign, np.bincount(assign, minlength=k).astype(np.int64))


def compute_w2(split: TargetSplit, sample_class: int) -> float:
    """exp(1 - N_t^k / N_t): larger for scarce pseudo classes."""
    if split.total == 0:
        raise ValueError("target split is empty (N_t = 0)")
    return math.exp(1.0 - split.counts[sample_class] / split.total)


def combine_weights(w1: float, w2: float, theta: float = 0.5) -> float:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    return theta * w1 + (1.0 - theta) * w2


def target_weights(y_hat: np.ndarray, classes: Sequence[int], split: TargetSplit,
                   tau: float = 0.5, theta: float = 0.5) -> np.ndarray:
    """Per-sample blended weights for a batch, as constants."""
    return np.array([combine_weights(compute_w1(s, tau), compute_w2(split, int(k)), theta)
                     for s, k in zip(np.asarray(y_hat), classes)])


def domain_adversarial_loss(source_logits: Tensor, target_logits: Tensor, target_weights=None) -> Tensor:
    """-mean_s log D(s) - mean_t [w_t log(1 - D(t))] on discriminator logits."""
    if source_logits.size == 0 or target_logits.size == 0:
        raise ValueError("adversarial loss needs non-empty source and target batches")
    src = ad.mean(ad.log_sigmoid(source_logits))
    tgt_terms = ad.log_sigmoid(-target_logits)
    if target_weights is not None:
        w = np.asarray(target_weights, dtype=np.float64).reshape(target_logits.shape)
        tgt_terms = tgt_terms * w
    return -src - ad.mean(tgt_terms)


def dcbr_adv_loss(source_feats: Tensor, target_feats: Tensor, target_weights, disc: ImageDiscriminator,
                  beta: float = 1.0) -> Tensor:
    """Weighted image-level adversarial loss with features behind gradient reversal."""
    if source_feats.shape[0] == 0 or target_feats.shape[0] == 0:
        raise ValueError("adversarial loss needs non-empty source and target batches")
    s = disc.logits(ad.grad_reverse(source_feats, beta))
    t = disc.logits(ad.grad_reverse(target_feats, beta))
    return domain_adversarial_loss(s, t, target_weights)


def mlc_scores(model, mlc: MultiLabelClassifier, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Frozen classifier probabilities for a stack of images (no graph kept)."""
    out = []
    for s in range(0, len(images), batch_size):
        g1 = model.forward_with_taps(Tensor(images[s:s + batch_size])).taps["g1"]
        out.append(mlc(Tensor(g1.data)).data)
    return np.concatenate(out) if out else np.zeros((0, mlc.fc.weight.shape[1]))


def refresh_target_split(model, mlc: MultiLabelClassifier, target_images: np.ndarray,
                         batch_size: int = 100) -> TargetSplit:
    """Full pass over the target set; argmax pseudo class per image."""
    scores = mlc_scores(model, mlc, target_images, batch_size)
    return TargetSplit.from_scores(scores, mlc.fc.weight.shape[1])
