"""Test-time evaluation: accuracy vs SNR, cross-decoding matrix, latent export."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, draw_batch
from .nn import decoder_forward, encoder_forward, predict
from .objectives import cross_entropy
from .rng import substream
from .training import RunState, broadcast, encode

DEFAULT_SNRS = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0)


@dataclass
class SweepResult:
    kind: str
    seed: int
    n_eval: int
    rows: list[tuple[float, int, float, float]] = field(default_factory=list)  # (snr_db, user, acc, ce)

    def accuracy(self, snr_db: float, user: int) -> float:
        for snr, u, acc, _ in self.rows:
            if snr == snr_db and u == user:
                return acc
        raise KeyError((snr_db, user))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("snr_db,user,accuracy,ce\n")
            for snr, user, acc, ce in self.rows:
                fh.write(f"{snr!r},{user},{acc!r},{ce!r}\n")


@dataclass
class CrossDecodeMatrix:
    """``acc[i, j]``: decoder i applied to its own received signal, scored against user j's labels."""

    acc: np.ndarray
    snr_db: float

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.acc)

    def off_diagonal(self) -> np.ndarray:
        mask = ~np.eye(self.acc.shape[0], dtype=bool)
        return self.acc[mask]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("decoder,target_user,accuracy\n")
            n = self.acc.shape[0]
            for i in range(n):
                for j in range(n):
                    fh.write(f"{i + 1},{j + 1},{float(self.acc[i, j])!r}\n")


def _received_logits(state: RunState, batch, snr_db: float, kind: str, rng, latent_mean: bool):
    _, zs = encode(state, batch.x, rng, latent_mean=latent_mean)
    (ys,) = broadcast(state, zs, rng, snr_db, kind=kind, resamples=1)
    return [decoder_forward(dec, y) for dec, y in zip(state.decoders, ys)]


def _check_n_eval(datasets: list[Dataset], n_eval: int) -> None:
    if n_eval < 2:
        raise ValueError("n_eval must be >= 2")
    if any(n_eval > ds.n for ds in datasets):
        raise ValueError(f"n_eval={n_eval} exceeds a dataset size")


def evaluate_accuracy(state: RunState, datasets: list[Dataset], snr_db: float, kind: str, n_eval: int,
                      rng: np.random.Generator, latent_mean: bool = False,
                      label_mode: str = "shared") -> tuple[list[float], list[float]]:
    """Per-user accuracy and cross-entropy over ``n_eval`` class-aligned samples
    pushed through the whole encode / superpose / channel / decode pipeline."""
    _check_n_eval(datasets, n_eval)
    batch = draw_batch(datasets, n_eval, rng, label_mode)
    with ad.no_grad():
        logits = _received_logits(state, batch, snr_db, kind, rng, latent_mean)
        acc = [float(np.mean(predict(lg) == u)) for lg, u in zip(logits, batch.u)]
        ce = [cross_entropy(lg, u).item() for lg, u in zip(logits, batch.u)]
    return acc, ce


def sweep_snr(state: RunState, datasets: list[Dataset], snrs, kind: str, n_eval: int, seed: int,
              latent_mean: bool = False) -> SweepResult:
    """One evaluation per SNR entry, each on its own substream keyed by the SNR value."""
    result = SweepResult(kind, seed, n_eval)
    for snr in snrs:
        snr = float(snr)
        acc, ce = evaluate_accuracy(state, datasets, snr, kind, n_eval, substream(seed, "sweep", kind, snr),
                                    latent_mean=latent_mean)
        result.rows += [(snr, i + 1, a, c) for i, (a, c) in enumerate(zip(acc, ce))]
    return result


def cross_decode(state: RunState, datasets: list[Dataset], snr_db: float, kind: str, n_eval: int,
                 rng: np.random.Generator, latent_mean: bool = False,
                 label_mode: str = "independent") -> CrossDecodeMatrix:
    """Normal and cross decoding accuracies on independent-label batches."""
    if label_mode != "independent":
        raise ValueError("cross-decoding needs independent labels per user; with shared labels "
                         "u_i == u_j and every off-diagonal entry would equal normal decoding")
    _check_n_eval(datasets, n_eval)
    batch = draw_batch(datasets, n_eval, rng, label_mode)
    with ad.no_grad():
        logits = _received_logits(state, batch, snr_db, kind, rng, latent_mean)
    preds = [predict(lg) for lg in logits]
    n = len(preds)
    acc = np.array([[np.mean(preds[i] == batch.u[j]) for j in range(n)] for i in range(n)])
    return CrossDecodeMatrix(acc, snr_db)


def export_latents(state: RunState, datasets: list[Dataset], n: int, path) -> None:
    """Write encoder means for the first ``n`` samples of every user."""
    with open(path, "w", newline="") as fh:
        d = state.cfg.latent_dim
        fh.write("user,label," + ",".join(f"z_{k + 1}" for k in range(d)) + "\n")
        with ad.no_grad():
            for i, (enc, ds) in enumerate(zip(state.encoders, datasets)):
                if n > ds.n:
                    raise ValueError(f"n={n} exceeds user {i + 1} dataset size {ds.n}")
                mu = encoder_forward(enc, ds.x[:n]).mu.data
                for label, row in zip(ds.u[:n], mu):
                    fh.write(f"{i + 1},{int(label)}," + ",".join(repr(float(v)) for v in row) + "\n")


def parameter_digest(state: RunState) -> str:
    h = hashlib.sha256()
    for p in state.main_parameters():
        h.update(p.data.tobytes())
    if state.bank is not None:
        for pair in state.bank.pairs:
            for p in state.bank.nets[pair].parameters():
                h.update(p.data.tobytes())
    return h.hexdigest()
