"""Gradient attacks on fingerprint images (FGSM, PGD, MIM) with AP masking.

All attacks work in pixel space, so ``eps=0.1`` moves a pixel by at most
0.1, i.e. 10 dBm. Only the columns selected by the AP mask are touched;
the rest stay bit-identical to the clean input.

The iterative attacks follow the normalised-gradient form: each step is
``eps * g / ||g||_2^2`` clipped to [-eps, eps], and the iterate is kept in
the eps-box around the clean image.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

GradFn = Callable[[np.ndarray], np.ndarray]


class AttackError(RuntimeError):
    pass


class Method(str, enum.Enum):
    NONE = "NONE"
    FGSM = "FGSM"
    PGD = "PGD"
    MIM = "MIM"


@dataclass(frozen=True)
class AttackConfig:
    method: Method = Method.FGSM
    eps: float = 0.1
    phi: float = 100.0
    iters: int = 10
    alpha: float = 0.9
    mask_seed: int = 0
    # apply momentum to the absolute iterate, exactly as the recurrence is
    # usually printed; off by default because it drags pixels toward 0
    literal_momentum: bool = False

    def __post_init__(self):
        if not isinstance(self.method, Method):
            object.__setattr__(self, "method", Method(str(self.method).upper()))
        if not 0.0 <= self.eps <= 0.5:
            raise ValueError(f"eps must be in [0, 0.5], got {self.eps}")
        if not 0.0 <= self.phi <= 100.0:
            raise ValueError(f"phi must be in [0, 100], got {self.phi}")
        if self.method in (Method.PGD, Method.MIM) and self.iters < 1:
            raise ValueError("iterative attacks need iters >= 1")


# training-time attack settings (eps 0.1 on every AP)
def training_attack(method: Method | str, **kwargs) -> AttackConfig:
    return AttackConfig(method=Method(method), eps=0.1, phi=100.0, **kwargs)


def compromised_count(width: int, phi: float) -> int:
    """round(phi * W / 100), halves rounded up."""
    return int(math.floor(phi * width / 100.0 + 0.5))


def make_mask(width: int, phi: float, seed: int) -> np.ndarray:
    """Seeded uniformly random set of compromised AP columns."""
    if not 0.0 <= phi <= 100.0:
        raise ValueError(f"phi must be in [0, 100], got {phi}")
    k = compromised_count(width, phi)
    mask = np.zeros(width, dtype=bool)
    # permutation prefix: masks for growing phi are nested under one seed
    mask[np.random.default_rng(seed).permutation(width)[:k]] = True
    return mask


def _check_grad(g: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g


def _normalised_step(g: np.ndarray, eps: float) -> np.ndarray:
    """eps * g / ||g||^2 per row, clipped to [-eps, eps]; 0 for a zero gradient."""
    sq = np.sum(g * g, axis=-1, keepdims=True)
    safe = np.where(sq > 0, sq, 1.0)
    return np.clip(np.where(sq > 0, eps * g / safe, 0.0), -eps, eps)


def fgsm(grad_fn: GradFn, x: np.ndarray, eps: float, mask: np.ndarray) -> np.ndarray:
    g = _check_grad(grad_fn(x))
    return np.clip(np.where(mask, x + eps * np.sign(g), x), 0.0, 1.0)


def pgd(grad_fn: GradFn, x: np.ndarray, eps: float, iters: int, mask: np.ndarray) -> np.ndarray:
    lo, hi = x - eps, x + eps
    cur = x.copy()
    for _ in range(iters):
        eta = _normalised_step(_check_grad(grad_fn(cur)), eps)
        cur = np.where(mask, np.clip(cur + eta, lo, hi), x)
    return np.clip(cur, 0.0, 1.0)


def mim(
    grad_fn: GradFn,
    x: np.ndarray,
    eps: float,
    iters: int,
    alpha: float,
    mask: np.ndarray,
    literal: bool = False,
) -> np.ndarray:
    lo, hi = x - eps, x + eps
    cur = x.copy()
    for _ in range(iters):
        eta = _normalised_step(_check_grad(grad_fn(cur)), eps)
        if literal:
            nxt = alpha * cur + eta
        else:
            # momentum carried by the deviation from the clean image
            nxt = x + alpha * (cur - x) + eta
        cur = np.where(mask, np.clip(nxt, lo, hi), x)
    return np.clip(cur, 0.0, 1.0)


def perturb(grad_fn: GradFn, x: np.ndarray, cfg: AttackConfig, mask: np.ndarray) -> np.ndarray:
    """Dispatch on ``cfg.method`` for an arbitrary input-gradient function."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if cfg.method is Method.NONE or cfg.eps == 0.0 or not mask.any():
        return x.copy()
    if cfg.method is Method.FGSM:
        return fgsm(grad_fn, x, cfg.eps, mask)
    if cfg.method is Method.PGD:
        return pgd(grad_fn, x, cfg.eps, cfg.iters, mask)
    return mim(grad_fn, x, cfg.eps, cfg.iters, cfg.alpha, mask, cfg.literal_momentum)


def generate(model, x, labels, cfg: AttackConfig, mask: np.ndarray | None = None) -> np.ndarray:
    """Adversarial images for a batch against ``model`` (a CapsNet)."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    labels = np.asarray(labels, dtype=np.int64)
    if mask is None:
        mask = make_mask(x.shape[1], cfg.phi, cfg.mask_seed)
    return perturb(lambda z: model.input_gradient(z, labels), x, cfg, mask)


def adversarial_loss(model, x, labels, cfg: AttackConfig, mask: np.ndarray | None = None) -> float:
    """Clean CE plus CE on freshly generated adversarial examples, summed over the batch."""
    if cfg.method is Method.NONE:
        raise ValueError("adversarial_loss needs an attack method")
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    x_adv = generate(model, x, labels, cfg, mask)
    return float(model.loss(x, labels).sum() + model.loss(x_adv, labels).sum())


def attack_dataset(model, images, labels, cfg: AttackConfig, batch_size: int = 256) -> np.ndarray:
    """Attack every image with one shared AP mask for the whole run."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    labels = np.asarray(labels, dtype=np.int64)
    if cfg.method is Method.NONE:
        return x.copy()
    mask = make_mask(x.shape[1], cfg.phi, cfg.mask_seed)
    out = [
        generate(model, x[i : i + batch_size], labels[i : i + batch_size], cfg, mask)
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(out, axis=0) if out else x.copy()
