"""TOIB loss terms: cross-entropy sufficiency, KL compression, vCLUB orthogonality."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ClubNet, GaussianLatent

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ClassPartition:
    """Batch slots grouped by their shared conditioning class."""

    w: np.ndarray
    classes: tuple[int, ...]
    members: tuple[np.ndarray, ...]

    @classmethod
    def from_classes(cls, w) -> "ClassPartition":
        w = np.asarray(w, dtype=np.intp)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("partition needs a non-empty 1-d class vector")
        classes = tuple(int(c) for c in np.unique(w))
        members = tuple(np.flatnonzero(w == c) for c in classes)
        return cls(w, classes, members)

    @property
    def size(self) -> int:
        return int(self.w.size)

    def mismatched_pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All ordered leave-one-out pairs (v, v') inside each class, with weights.

        A pair in class w gets weight 1 / (V * (|V_w| - 1)), which equals the
        class share |V_w|/V times the uniform average over |V_w|(|V_w|-1)
        pairs.  Singleton classes contribute no pairs.
        """
        rows, cols, weights = [], [], []
        V = self.size
        for idx in self.members:
            n = idx.size
            if n < 2:
                continue
            r, c = np.meshgrid(idx, idx, indexing="ij")
            keep = r != c
            rows.append(r[keep])
            cols.append(c[keep])
            weights.append(np.full(n * (n - 1), 1.0 / (V * (n - 1))))
        if not rows:
            empty = np.zeros(0, dtype=np.intp)
            return empty, empty, np.zeros(0)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(weights)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label]; labels are 1-based."""
    labels = np.asarray(labels, dtype=np.intp)
    K = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"need one label per row, got {labels.shape} for {logits.shape}")
    if np.any(labels < 1) or np.any(labels > K):
        raise ValueError(f"labels must lie in [1, {K}]")
    return ad.scale(ad.mean(ad.pick(ad.log_softmax(logits), labels - 1)), -1.0)


def kl_to_std_normal(lat: GaussianLatent) -> Tensor:
    """Batch mean of KL(N(mu, diag(exp(logvar))) || N(0, I)) in closed form."""
    mu, lv = lat.mu, lat.logvar
    per_dim = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(lv)), ad.add(lv, 1.0))
    return ad.scale(ad.mean(ad.sum(per_dim, axis=1)), 0.5)


def _gaussian_log_density(target: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    diff = ad.sub(target, mu)
    quad = ad.mul(ad.mul(diff, diff), ad.exp(ad.scale(logvar, -1.0)))
    per_dim = ad.add(ad.scale(ad.add(logvar, quad), -0.5), -HALF_LOG_2PI)
    return ad.sum(per_dim, axis=1)


def club_log_density(net: ClubNet, z_i: Tensor, z_j: Tensor, w) -> Tensor:
    """Row-wise log q(z_j | z_i, w) under the network's diagonal Gaussian."""
    mu, logvar = net(z_i, w)
    return _gaussian_log_density(z_j, mu, logvar)


def vclub_terms(net: ClubNet, z_i: Tensor, z_j: Tensor, part: ClassPartition) -> tuple[Tensor, Tensor]:
    """(matched, mismatched) halves of the within-class vCLUB estimate."""
    if part.size == 0:
        raise ValueError("empty batch")
    if z_i.shape[0] != part.size or z_j.shape[0] != part.size:
        raise ValueError("partition does not match the latent batch")
    mu, logvar = net(z_i, part.w)
    matched = ad.mean(_gaussian_log_density(z_j, mu, logvar))
    rows, cols, weights = part.mismatched_pairs()
    if rows.size == 0:
        return matched, Tensor(0.0)
    cross = _gaussian_log_density(ad.take_rows(z_j, cols), ad.take_rows(mu, rows), ad.take_rows(logvar, rows))
    return matched, ad.sum(ad.mul(cross, weights))


def vclub_pair(net: ClubNet, z_i: Tensor, z_j: Tensor, part: ClassPartition) -> Tensor:
    matched, mismatched = vclub_terms(net, z_i, z_j, part)
    return ad.sub(matched, mismatched)


def _sum(terms):
    return reduce(ad.add, terms)


@dataclass
class LossBreakdown:
    ce: list[Tensor]
    kl: list[Tensor]
    vclub: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    total: Tensor | None = None
    alpha: float = 0.0
    beta: float = 0.0

    def values(self) -> dict:
        return {
            "ce": [t.item() for t in self.ce],
            "kl": [t.item() for t in self.kl],
            "vclub": {k: t.item() for k, t in self.vclub.items()},
            "total": self.total.item(),
        }


def ib_total(ce: list[Tensor], kl: list[Tensor], beta: float) -> Tensor:
    """Multi-user VIB objective: sum of CE plus beta times the summed KL."""
    total = _sum(ce)
    if beta != 0.0:
        total = ad.add(total, ad.scale(_sum(kl), beta))
    return total


def toib_loss(ce: list[Tensor], kl: list[Tensor], vclub: dict[tuple[int, int], Tensor],
              alpha: float, beta: float) -> LossBreakdown:
    """Assemble sum ce + beta * sum kl + alpha * sum over ordered pairs of vCLUB.

    With ``alpha == 0`` the orthogonality terms are left off the graph, so the
    total is built by exactly the same operations as :func:`ib_total`.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be >= 0")
    total = ib_total(ce, kl, beta)
    if alpha != 0.0 and vclub:
        total = ad.add(total, ad.scale(_sum([vclub[k] for k in sorted(vclub)]), alpha))
    return LossBreakdown(list(ce), list(kl), dict(vclub), total, alpha, beta)
