"""Classifier and generator objectives.

Classifier::

    L_c = L_s(real) + lam * L_u(fake, pseudo-labels) + alpha * KL(P_real || Q_fake)

Generator::

    L_g = mean(-log D(G(z))) + lam * L_cu

``L_cu`` is the same pseudo-label loss as ``L_u``, evaluated on the
generator's batch with the classifier frozen so the gradient reaches the
generator through the classifier's logits.

A term whose weight is exactly zero is left out of the graph rather than
multiplied by zero, which keeps the reduced objectives bit-identical to the
plain ones.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .autodiff import Tensor, ops

PROB_FLOOR = 1e-12
KL_DIRECTIONS = ("real-to-fake", "fake-to-real")


@dataclass(frozen=True)
class LossWeights:
    tau: float = 0.9
    alpha: float = 0.3
    lam: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.alpha < 0 or self.lam < 0:
            raise ValueError(f"alpha and lambda must be non-negative, got {self.alpha}, {self.lam}")


@dataclass
class LossReport:
    """Scalar values of every loss component for one step.

    Fields a trainer does not compute stay ``None``.
    """

    l_s: Optional[float] = None
    l_u: Optional[float] = None
    l_kl: Optional[float] = None
    l_c_total: Optional[float] = None
    l_d_real: Optional[float] = None
    l_d_fake: Optional[float] = None
    l_gen_adv: Optional[float] = None
    l_cu: Optional[float] = None
    l_g_total: Optional[float] = None
    accepted_fraction: Optional[float] = None

    def merge(self, other: "LossReport") -> "LossReport":
        """Fill this report's empty fields from ``other``."""
        for f in fields(self):
            if getattr(self, f.name) is None:
                setattr(self, f.name, getattr(other, f.name))
        return self

    def as_dict(self):
        return asdict(self)

    def non_finite(self):
        return [k for k, v in asdict(self).items() if v is not None and not math.isfinite(v)]


def _check_logits(name, logits):
    if logits.ndim != 2:
        raise ValueError(f"{name}: logits must be (B, C), got {logits.shape}")


def supervised_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (B, C) against integer ``labels`` (B,)."""
    _check_logits("supervised_loss", logits)
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"supervised_loss: labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"supervised_loss: labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    logp = ops.log_softmax(logits, axis=1)
    picked = logp[np.arange(B), labels.astype(np.intp)]
    return -ops.mean(picked)


def pseudo_label_loss(logits_g: Tensor, tau: float):
    """Confidence-masked self-training loss on unlabeled logits.

    Samples whose top softmax probability is strictly above ``tau`` are
    trained toward their own argmax; the mask and labels carry no gradient.
    The sum is divided by the full batch size. Returns ``(loss, accepted_fraction)``.
    """
    _check_logits("pseudo_label_loss", logits_g)
    B = logits_g.shape[0]
    z = logits_g.data - logits_g.data.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    accepted = np.flatnonzero(p.max(axis=1) > tau)
    if accepted.size == 0:
        return Tensor(0.0), 0.0
    targets = p[accepted].argmax(axis=1)
    logp = ops.log_softmax(logits_g, axis=1)
    picked = logp[accepted, targets]
    return ops.sum(picked) * (-1.0 / B), accepted.size / B


def _batch_mean_probs(logits):
    return ops.mean(ops.softmax(logits, axis=1), axis=0)


def kl_consistency_loss(logits_real: Tensor, logits_g: Tensor, direction: str = "real-to-fake") -> Tensor:
    """KL divergence between the batch-mean class distributions.

    ``real-to-fake`` is ``KL(P_real || Q_fake)``; ``fake-to-real`` swaps them.
    """
    _check_logits("kl_consistency_loss", logits_real)
    _check_logits("kl_consistency_loss", logits_g)
    if logits_real.shape[1] != logits_g.shape[1]:
        raise ValueError(
            f"kl_consistency_loss: class counts differ, {logits_real.shape} vs {logits_g.shape}"
        )
    if direction not in KL_DIRECTIONS:
        raise ValueError(f"kl direction must be one of {KL_DIRECTIONS}, got {direction!r}")
    P = _batch_mean_probs(logits_real)
    Q = _batch_mean_probs(logits_g)
    if direction == "fake-to-real":
        P, Q = Q, P
    log_ratio = ops.log(ops.clamp(P, PROB_FLOOR)) - ops.log(ops.clamp(Q, PROB_FLOOR))
    return ops.sum(P * log_ratio)


def classifier_objective(logits, labels, logits_g, weights: LossWeights, kl_direction="real-to-fake",
                         use_kl=True):
    """Supervised + pseudo-label + KL consistency loss. Returns ``(loss, report)``.

    ``use_kl=False`` drops the consistency term entirely (EC-GAN's classifier).
    """
    l_s = supervised_loss(logits, labels)
    l_u, accepted = pseudo_label_loss(logits_g, weights.tau)
    total = l_s
    if weights.lam != 0.0:
        total = total + l_u * weights.lam
    l_kl_value = 0.0
    if use_kl:
        l_kl = kl_consistency_loss(logits, logits_g, kl_direction)
        l_kl_value = l_kl.item()
        if weights.alpha != 0.0:
            total = total + l_kl * weights.alpha
    report = LossReport(
        l_s=l_s.item(),
        l_u=l_u.item(),
        l_kl=l_kl_value,
        l_c_total=total.item(),
        accepted_fraction=accepted,
    )
    return total, report


def discriminator_terms(d_real: Tensor, d_fake: Tensor):
    """``(mean(-log d_real), mean(-log(1 - d_fake)))`` with probabilities floored."""
    if d_real.ndim != 1 or d_fake.ndim != 1:
        raise ValueError(f"discriminator_loss: expected (B,) probabilities, got {d_real.shape} and {d_fake.shape}")
    real = -ops.mean(ops.log(ops.clamp(d_real, PROB_FLOOR)))
    fake = -ops.mean(ops.log(ops.clamp(1.0 - d_fake, PROB_FLOOR)))
    return real, fake


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    real, fake = discriminator_terms(d_real, d_fake)
    return real + fake


def generator_adversarial_loss(d_fake: Tensor) -> Tensor:
    """Non-saturating ``mean(-log D(G(z)))``."""
    if d_fake.ndim != 1:
        raise ValueError(f"generator_objective: expected (B,) probabilities, got {d_fake.shape}")
    return -ops.mean(ops.log(ops.clamp(d_fake, PROB_FLOOR)))


def generator_objective(d_fake, logits_g, weights: LossWeights, use_cu=True):
    """Discriminator adversarial term + lam * classifier adversarial term.

    The caller is responsible for freezing the discriminator and classifier
    so the gradient lands on the generator only. ``use_cu=False`` (EC-GAN)
    skips the classifier term and records ``l_cu = 0``.
    Returns ``(loss, report)``.
    """
    adv = generator_adversarial_loss(d_fake)
    total = adv
    l_cu_value, accepted = 0.0, None
    if use_cu and logits_g is not None:
        l_cu, accepted = pseudo_label_loss(logits_g, weights.tau)
        l_cu_value = l_cu.item()
        if weights.lam != 0.0:
            total = total + l_cu * weights.lam
    report = LossReport(
        l_gen_adv=adv.item(),
        l_cu=l_cu_value,
        l_g_total=total.item(),
        accepted_fraction=accepted,
    )
    return total, report
