"""Named finite-difference checks for every differentiable loss.

Each check builds a small random instance from a seed and returns the
largest relative error between analytic and central-difference gradients.
Inputs are drawn away from the kinks of ReLU, hinge and smooth-L1 terms.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from . import copm, dcbr, rjca
from .autodiff import Tensor
from .detector import detection_loss
from .nn import Conv2d

TOLERANCE = 1e-4


def _mlc(rng):
    y = rng.integers(0, 2, size=(3, 4)).astype(float)
    logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return lambda: dcbr.mlc_loss(y, ad.sigmoid(logits)), [logits]


def _dcbr_adv(rng):
    # reversal only flips the sign seen by the features; the check differentiates the loss itself
    disc = dcbr.ImageDiscriminator(4, rng, hidden=6)
    disc.fc2.weight.data[:] = rng.normal(size=disc.fc2.weight.shape)
    s = Tensor(rng.uniform(0.1, 1, size=(2, 4, 2, 2)), requires_grad=True)
    t = Tensor(rng.uniform(0.1, 1, size=(3, 4, 2, 2)), requires_grad=True)
    w = rng.uniform(1, 2.5, size=3)
    return lambda: dcbr.domain_adversarial_loss(disc.logits(s), disc.logits(t), w), [s, t, disc.fc1.weight]


def _pattern(rng):
    proj = copm.RandomProjections(2, 3, 6, rng)
    low = Tensor(rng.uniform(0.1, 1, size=(4, 2, 2, 2)), requires_grad=True)
    logits = Tensor(rng.normal(size=(4, 3, 1, 1)), requires_grad=True)

    def loss():
        probs = ad.softmax(logits, axis=1)
        f_s = copm.batch_attention(low[:2], probs[:2], proj)
        f_t = copm.batch_attention(low[2:], probs[2:], proj)
        return copm.pattern_match_loss(f_s, f_t)

    return loss, [low, logits]


def _pixel_adv(rng):
    disc = copm.PixelDiscriminator(3, rng, hidden=5)
    disc.conv2.weight.data[:] = rng.normal(size=disc.conv2.weight.shape)
    s = Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True)
    t = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    return lambda: copm.pixel_bce(disc.logits(s), disc.logits(t)), [s, t, disc.conv2.weight]


def _jca(rng):
    xs = Tensor(rng.normal(scale=0.7, size=(3, 4)), requires_grad=True)
    xt = Tensor(rng.normal(scale=0.7, size=(3, 4)), requires_grad=True)
    hinge_kink = [abs(1.0 - np.linalg.norm(xs.data[m] - xt.data[n])) for m in range(3) for n in range(3) if m != n]
    if min(hinge_kink) < 1e-3:  # too close to the hinge corner for a clean difference quotient
        xs.data += 0.01

    def loss():
        return rjca.jca_loss({"l": {k: xs[k] for k in range(3)}}, {"l": {k: xt[k] for k in range(3)}}, 1.0)

    return loss, [xs, xt]


class _Heads:
    """Minimal stand-in exposing ``class_logits_for_vector`` for two layers."""

    def __init__(self, rng, channels=3, k=2):
        self.config = type("cfg", (), {"num_classes": k})()
        self.heads = {l: Conv2d(channels, k + 1, 3, rng, padding=1, std=0.5) for l in ("lA", "lB")}

    def class_logits_for_vector(self, layer, vec):
        c = vec.shape[-1]
        return ad.reshape(self.heads[layer](ad.reshape(vec, (1, c, 1, 1))), (-1,))


def _pr(rng):
    model = _Heads(rng)
    za = Tensor(rng.uniform(size=(2, 3)), requires_grad=True)
    zb = Tensor(rng.uniform(size=(2, 3)), requires_grad=True)

    def loss():
        return rjca.pr_loss(model, {"lA": {0: za[0], 1: za[1]}, "lB": {0: zb[0], 1: zb[1]}}, 2.0)

    return loss, [za, zb, model.heads["lA"].bias]


def _detection(rng):
    labels = rng.integers(0, 4, size=(2, 6))
    labels[:, 0] = 1
    targets = rng.uniform(-0.4, 0.4, size=(2, 6, 4))
    logits = Tensor(rng.normal(size=(2, 6, 4)), requires_grad=True)
    resid = rng.uniform(0.05, 0.9, size=targets.shape) * rng.choice([-1, 1], size=targets.shape)
    offsets = Tensor(targets + resid, requires_grad=True)
    return lambda: detection_loss(logits, offsets, labels, targets), [logits, offsets]


def _total(rng):
    from .train import total_loss

    parts = [Tensor(rng.normal(size=3), requires_grad=True) for _ in range(4)]
    lam1, lam2 = rng.uniform(0, 1), rng.uniform(0, 2)

    def loss():
        det, d, c, r = (ad.tsum(ad.square(p)) for p in parts)
        return total_loss(det, d, c, r, lam1, lam2)

    return loss, parts


CHECKS = {
    "mlc": _mlc,
    "dcbr_adv": _dcbr_adv,
    "pattern": _pattern,
    "pixel_adv": _pixel_adv,
    "jca": _jca,
    "pr": _pr,
    "detection": _detection,
    "total": _total,
}


def run_check(name: str, seed: int) -> float:
    if name not in CHECKS:
        raise KeyError(f"unknown gradient check {name!r}; choose from {sorted(CHECKS)}")
    loss, params = CHECKS[name](np.random.default_rng([seed, zlib.crc32(name.encode())]))
    return ad.parameters_grad_check(loss, params)


def run_all(names=None, seeds: int = 100) -> dict[str, float]:
    """Worst relative error per check over ``seeds`` random instances."""
    return {n: max(run_check(n, s) for s in range(seeds)) for n in (names or CHECKS)}
