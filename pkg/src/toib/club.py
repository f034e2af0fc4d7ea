"""Phase-A training of the pairwise CLUB estimators and Gaussian MI oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Tensor
from .nn import AdamState, ClubNet, adam_step, init_params
from .objectives import ClassPartition, club_log_density, vclub_terms

MODES = ("mle", "vclub_ascent")


@dataclass
class PairEstimatorBank:
    """One ClubNet and optimizer per ordered user pair (i, j), i != j."""

    nets: dict[tuple[int, int], ClubNet]
    states: dict[tuple[int, int], AdamState]
    steps: int = 5
    mode: str = "mle"
    updates: int = 0  # cumulative pair-steps, for cost accounting

    @classmethod
    def build(cls, n_users: int, latent_dim: int, num_classes: int, rng: np.random.Generator,
              steps: int = 5, mode: str = "mle", lr: float = 1e-3, hidden=(64,)) -> "PairEstimatorBank":
        if mode not in MODES:
            raise ValueError(f"unknown phase-A mode {mode!r}")
        nets, states = {}, {}
        for pair in ordered_pairs(n_users):
            net = ClubNet(latent_dim, num_classes, hidden)
            init_params(net, rng)
            nets[pair] = net
            states[pair] = AdamState(lr=lr)
        return cls(nets, states, steps, mode)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.nets)


def ordered_pairs(n_users: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n_users) for j in range(n_users) if i != j]


def matched_log_likelihood(net: ClubNet, z_i: Tensor, z_j: Tensor, part: ClassPartition) -> Tensor:
    return ad.mean(club_log_density(net, z_i, z_j, part.w))


def _as_constant(z) -> Tensor:
    return Tensor(z.data if isinstance(z, Tensor) else z)


def phase_a_update(bank: PairEstimatorBank, latents, part: ClassPartition, diagnostics: bool = True) -> dict:
    """Run ``bank.steps`` optimizer steps on every pair estimator.

    Latents are copied into constant tensors first, so nothing upstream of
    them can receive gradient.  Returns the final matched log-likelihood and
    vCLUB value per pair, evaluated after the last step (skipped when
    ``diagnostics`` is false).
    """
    if part.size == 0:
        raise ValueError("empty partition")
    zs = [_as_constant(z) for z in latents]
    for _ in range(bank.steps):
        for pair in bank.pairs:
            i, j = pair
            net = bank.nets[pair]
            if bank.mode == "mle":
                objective = matched_log_likelihood(net, zs[i], zs[j], part)
            else:
                objective = ad.sub(*vclub_terms(net, zs[i], zs[j], part))
            ad.backward(ad.scale(objective, -1.0))
            adam_step(net.parameters(), bank.states[pair])
            bank.updates += 1
    report = {}
    if diagnostics:
        with ad.no_grad():
            for pair in bank.pairs:
                i, j = pair
                matched, mismatched = vclub_terms(bank.nets[pair], zs[i], zs[j], part)
                report[pair] = {"matched": matched.item(), "vclub": matched.item() - mismatched.item()}
    return report


def gaussian_mi_oracle(rho: float, d: int) -> float:
    """Exact MI (nats) of d independent standard bivariate-normal pairs."""
    if abs(rho) >= 1:
        raise DomainError("|rho| must be < 1")
    return -0.5 * d * math.log1p(-rho * rho) + 0.0


def gaussian_club_oracle(rho: float, d: int) -> float:
    """CLUB value obtained with the exact conditional p(z_j | z_i) for the same pairs.

    Equals the MI plus E_x KL(p(y) || p(y|x)), i.e. d * rho^2 / (1 - rho^2).
    """
    if abs(rho) >= 1:
        raise DomainError("|rho| must be < 1")
    return d * rho * rho / (1.0 - rho * rho)


def sample_correlated_gaussians(rho: float, d: int, n: int, rng: np.random.Generator):
    """Pairs with per-coordinate correlation ``rho``: z_j = rho z_i + sqrt(1-rho^2) eps."""
    if abs(rho) >= 1:
        raise DomainError("|rho| must be < 1")
    z_i = rng.standard_normal((n, d))
    eps = rng.standard_normal((n, d))
    return z_i, rho * z_i + math.sqrt(1.0 - rho * rho) * eps


@dataclass
class MiCheckResult:
    rho: float
    d: int
    true_mi: float
    club_reference: float
    estimates: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.estimates))

    @property
    def stderr(self) -> float:
        return float(np.std(self.estimates, ddof=1) / math.sqrt(len(self.estimates)))

    @property
    def tolerance(self) -> float:
        return max(0.1, 0.1 * self.true_mi)

    @property
    def within_tolerance(self) -> bool:
        return abs(self.mean - self.true_mi) <= self.tolerance

    @property
    def upper_bound_holds(self) -> bool:
        return self.mean >= self.true_mi - 2.0 * self.stderr


def estimate_gaussian_mi(rho: float, d: int, rng: np.random.Generator, *, train_steps: int = 1500,
                         batch: int = 256, eval_batches: int = 50, mode: str = "mle",
                         lr: float = 1e-3, hidden=(64,)) -> MiCheckResult:
    """Fit a single-class CLUB estimator on fresh correlated-Gaussian batches, then
    score vCLUB on ``eval_batches`` independent batches."""
    net = ClubNet(d, 1, hidden)
    init_params(net, rng)
    bank = PairEstimatorBank({(0, 1): net}, {(0, 1): AdamState(lr=lr)}, steps=1, mode=mode)
    part = ClassPartition.from_classes(np.ones(batch, dtype=np.intp))
    for _ in range(train_steps):
        phase_a_update(bank, sample_correlated_gaussians(rho, d, batch, rng), part, diagnostics=False)
    result = MiCheckResult(rho, d, gaussian_mi_oracle(rho, d), gaussian_club_oracle(rho, d))
    with ad.no_grad():
        for _ in range(eval_batches):
            z_i, z_j = sample_correlated_gaussians(rho, d, batch, rng)
            matched, mismatched = vclub_terms(net, Tensor(z_i), Tensor(z_j), part)
            result.estimates.append(matched.item() - mismatched.item())
    return result
