"""Regularized joint category alignment across the detection-head layers.

Per layer and class, source and target prototypes (mean features of the
positions labelled with that class) are kept as exponential moving averages.
The alignment term pulls same-class source/target prototypes together and
pushes different-class pairs at least ``margin`` apart; the regularizer asks
the heads of different layers to agree on each target prototype.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)
_warned_sparse = False

DOMAINS = ("source", "target")


def ema(global_value: np.ndarray, local_value: np.ndarray, rho: float) -> np.ndarray:
    return rho * global_value + (1.0 - rho) * local_value


@dataclass
class PrototypeBank:
    """Global per-(layer, class) prototypes for both domains with init flags."""

    channels: dict[str, int]
    num_classes: int
    rho: float = 0.7
    values: dict = field(init=False)
    initialized: dict = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        self.values = {(l, d): np.zeros((self.num_classes, c)) for l, c in self.channels.items() for d in DOMAINS}
        self.initialized = {(l, d): np.zeros(self.num_classes, dtype=bool) for l in self.channels for d in DOMAINS}

    @property
    def layers(self) -> list[str]:
        return list(self.channels)

    def get(self, layer: str, domain: str, k: int) -> np.ndarray | None:
        if not self.initialized[layer, domain][k]:
            return None
        return self.values[layer, domain][k]

    def set(self, layer: str, domain: str, k: int, value: np.ndarray) -> None:
        self.values[layer, domain][k] = value
        self.initialized[layer, domain][k] = True

    def update(self, layer: str, domain: str, local: dict[int, Tensor]) -> dict[int, Tensor]:
        """EMA-update with this step's local prototypes.

        Returns the post-update globals as tensors for every initialized
        class: updated ones carry gradient through ``(1 - rho) * local``,
        untouched ones are constants. An entry seen for the first time is set
        to the local prototype directly.
        """
        out: dict[int, Tensor] = {}
        for k in range(self.num_classes):
            z = local.get(k)
            old = self.get(layer, domain, k)
            if z is None:
                if old is not None:
                    out[k] = Tensor(old.copy())
                continue
            g = z if old is None else ad.add(old * self.rho, z * (1.0 - self.rho))
            self.set(layer, domain, k, g.data.copy())
            out[k] = g
        return out

    def globals_as_tensors(self, layer: str, domain: str) -> dict[int, Tensor]:
        return {k: Tensor(self.values[layer, domain][k].copy())
                for k in range(self.num_classes) if self.initialized[layer, domain][k]}

    def state(self, prefix: str = "proto.") -> dict[str, np.ndarray]:
        out = {}
        for (l, d), v in self.values.items():
            out[f"{prefix}{l}.{d}"] = v
            out[f"{prefix}{l}.{d}.init"] = self.initialized[l, d].astype(np.float64)
        return out

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "proto.") -> None:
        for key in self.values:
            l, d = key
            self.values[key] = np.array(state[f"{prefix}{l}.{d}"], dtype=np.float64)
            self.initialized[key] = np.asarray(state[f"{prefix}{l}.{d}.init"]) > 0.5


def ema_update(bank: PrototypeBank, layer: str, domain: str, local: dict[int, Tensor], rho: float | None = None):
    if rho is not None:
        bank.rho = rho
    return bank.update(layer, domain, local)


# ------------------------------------------------------------------ labels
def positions_from_anchor_labels(labels: np.ndarray, hw: int, anchors_per_cell: int = 1) -> np.ndarray:
    """Collapse per-anchor labels (N, HW*A) to per-position labels (N, HW); first labelled anchor wins."""
    labels = np.asarray(labels).reshape(labels.shape[0], hw, anchors_per_cell)
    out = np.zeros(labels.shape[:2], dtype=np.int64)
    for a in range(anchors_per_cell - 1, -1, -1):
        la = labels[:, :, a]
        out = np.where(la > 0, la, out)
    return out


def pseudo_labels(probs: np.ndarray, gate: float = 0.5, anchors_per_cell: int = 1) -> np.ndarray:
    """Position label k+1 iff the argmax is foreground class k with probability > gate."""
    probs = np.asarray(probs)
    arg = probs.argmax(axis=-1)
    conf = np.take_along_axis(probs, arg[..., None], axis=-1)[..., 0]
    lab = np.where((arg > 0) & (conf > gate), arg, 0)
    hw = lab.shape[1] // anchors_per_cell
    return positions_from_anchor_labels(lab, hw, anchors_per_cell)


def local_prototypes(feats: Tensor, labels: np.ndarray, num_classes: int) -> dict[int, Tensor]:
    """Mean feature of the positions labelled ``k+1``, for each class that has any.

    ``feats`` is N x C x H x W and ``labels`` N x (H*W) with 0 for background.
    """
    n, c, h, w = feats.shape
    labels = np.asarray(labels).reshape(n * h * w)
    x = ad.reshape(ad.transpose(feats, (0, 2, 3, 1)), (n * h * w, c))
    present = [k for k in range(num_classes) if np.any(labels == k + 1)]
    if not present:
        return {}
    weights = np.zeros((len(present), n * h * w))
    for r, k in enumerate(present):
        mask = labels == k + 1
        weights[r, mask] = 1.0 / mask.sum()
    means = ad.matmul(weights, x)
    return {k: means[r] for r, k in enumerate(present)}


def source_global_prototypes(model, images: np.ndarray, annotations, bank: PrototypeBank,
                             batch_size: int = 100) -> PrototypeBank:
    """Full-set class means of each layer's features at ground-truth-matched positions."""
    from .detector import match_batch

    k = bank.num_classes
    sums = {l: np.zeros((k, c)) for l, c in bank.channels.items()}
    counts = {l: np.zeros(k) for l in bank.channels}
    anchors = model.anchors
    a = anchors.anchors_per_cell
    offsets = np.cumsum([0] + [anchors.counts()[l] for l in anchors.layer_shapes])
    for s in range(0, len(images), batch_size):
        out = model.forward_with_taps(Tensor(images[s:s + batch_size]))
        labels, _ = match_batch(anchors.all, annotations[s:s + batch_size])
        for i, layer in enumerate(anchors.layer_shapes):
            if layer not in bank.channels:
                continue
            feat = out.taps[layer].data
            n, c, h, w = feat.shape
            pos = positions_from_anchor_labels(labels[:, offsets[i]:offsets[i + 1]], h * w, a).reshape(-1)
            flat = feat.transpose(0, 2, 3, 1).reshape(-1, c)
            for cls in range(k):
                mask = pos == cls + 1
                if mask.any():
                    sums[layer][cls] += flat[mask].sum(axis=0)
                    counts[layer][cls] += mask.sum()
    for layer in bank.channels:
        for cls in range(k):
            if counts[layer][cls] > 0:
                bank.set(layer, "source", cls, sums[layer][cls] / counts[layer][cls])
    return bank


# ------------------------------------------------------------------ losses
def jca_loss(source: dict[str, dict[int, Tensor]], target: dict[str, dict[int, Tensor]],
             margin: float = 1.0) -> Tensor:
    """Contrastive prototype alignment summed over layers.

    Same-class pairs contribute ``||s - t||^2``; different-class pairs
    ``max(0, margin - ||s - t||)^2``.
    """
    usable = [l for l in source if len(set(source[l]) & set(target.get(l, {}))) >= 2]
    if not usable:
        global _warned_sparse
        # routine while pseudo-labels are still sparse; say it once, then only at debug level
        logger.log(logging.DEBUG if _warned_sparse else logging.WARNING,
                   "fewer than two classes with prototypes in both domains; alignment term is 0")
        _warned_sparse = True
        return Tensor(0.0)
    terms = []
    for l in source:
        s, t = source[l], target.get(l, {})
        for k in sorted(set(s) & set(t)):
            terms.append(ad.tsum(ad.square(s[k] - t[k])))
        for m in sorted(s):
            for n in sorted(t):
                if m == n:
                    continue
                dist = ad.l2_norm(s[m] - t[n])
                terms.append(ad.square(ad.relu(margin - dist)))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def symmetric_kl_logits(logp_a: Tensor, logp_b: Tensor) -> Tensor:
    """0.5 * [KL(a||b) + KL(b||a)] from log-probabilities."""
    pa = ad.exp(logp_a)
    pb = ad.exp(logp_b)
    diff = logp_a - logp_b
    return ad.tsum((pa - pb) * diff) * 0.5


def symmetric_kl(p_a, p_b) -> Tensor:
    p_a, p_b = ad.as_tensor(p_a), ad.as_tensor(p_b)
    return symmetric_kl_logits(ad.log(p_a), ad.log(p_b))


def pr_loss(model, target: dict[str, dict[int, Tensor]], temperature: float = 2.0) -> Tensor:
    """Tempered cross-layer prediction consistency on target prototypes, divided by K."""
    layers = list(target)
    k_total = model.config.num_classes
    terms = []
    for la, lb in itertools.combinations(layers, 2):
        for k in sorted(set(target[la]) & set(target[lb])):
            za = ad.log_softmax(model.class_logits_for_vector(la, target[la][k]), temperature=temperature)
            zb = ad.log_softmax(model.class_logits_for_vector(lb, target[lb][k]), temperature=temperature)
            terms.append(symmetric_kl_logits(za, zb))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / k_total)


def rjca_loss(l_jca, l_pr, gamma: float = 0.1) -> Tensor:
    return ad.add(l_jca, ad.mul(l_pr, gamma))
