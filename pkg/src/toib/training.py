"""Two-phase TOIB training loop, run state and checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channel import PowerAllocation, SnrSpec, calibrate_noise, draw_realization, power_normalize, superpose, transmit
from .club import PairEstimatorBank, phase_a_update
from .data import BatchPair, Dataset, class_aligned_batches
from .nn import (AdamState, Decoder, FormatError, GaussianEncoder, adam_step, decoder_forward, encoder_forward,
                 init_params, predict, read_checkpoint, write_checkpoint)
from .objectives import ClassPartition, LossBreakdown, cross_entropy, kl_to_std_normal, toib_loss, vclub_pair
from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_users: int = 2
    epochs: int = 100
    batch_size: int = 64
    resamples: int = 1
    club_steps: int = 5
    alpha: float = 0.01
    beta: float = 0.01
    lr: float = 1e-4
    club_lr: float = 1e-3
    latent_dim: int = 16
    encoder_hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] = (128,)
    club_hidden: tuple[int, ...] = (64,)
    logvar_clamp: float = 10.0
    channel: str = "awgn"
    train_snr_db: float = 5.0
    equalize: bool = True
    p_max: float = 1.0
    power_mode: str = "equal"
    powers: tuple[float, ...] = ()
    club_mode: str = "mle"
    label_mode: str = "shared"
    objective: str = "toib"
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.n_users >= 1, "n_users >= 1"),
            (self.epochs >= 0, "epochs >= 0"),
            (self.batch_size >= 2, "batch_size >= 2"),
            (self.resamples >= 1, "resamples >= 1"),
            (self.club_steps >= 0, "club_steps >= 0"),
            (self.alpha >= 0, "alpha >= 0"),
            (self.beta >= 0, "beta >= 0"),
            (self.lr >= 0, "lr >= 0"),
            (self.club_lr >= 0, "club_lr >= 0"),
            (self.latent_dim >= 1, "latent_dim >= 1"),
            (self.logvar_clamp > 0, "logvar_clamp > 0"),
            (self.p_max > 0, "p_max > 0"),
            (self.channel in ("awgn", "rayleigh"), "channel in {awgn, rayleigh}"),
            (self.power_mode in ("equal", "custom"), "power_mode in {equal, custom}"),
            (self.club_mode in ("mle", "vclub_ascent"), "club_mode in {mle, vclub_ascent}"),
            (self.label_mode in ("shared", "independent"), "label_mode in {shared, independent}"),
            (self.objective in ("toib", "vib"), "objective in {toib, vib}"),
        ]
        for ok, rule in checks:
            if not ok:
                raise ValueError(f"invalid config: {rule}")
        if self.power_mode == "custom" and len(self.powers) != self.n_users:
            raise ValueError("invalid config: powers needs one entry per user when power_mode = custom")

    def allocation(self) -> PowerAllocation:
        if self.power_mode == "equal":
            return PowerAllocation.equal(self.n_users, self.p_max)
        return PowerAllocation(tuple(self.powers), self.p_max)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, values: dict):
        super().__init__(f"non-finite loss at step {step}: {values}")
        self.step = step
        self.values = values


@dataclass
class EpochStats:
    """Running sums over the steps of one epoch."""

    ce: np.ndarray
    kl: np.ndarray
    correct: np.ndarray
    seen: np.ndarray
    vclub: np.ndarray  # indexed like RunState.pairs
    steps: int = 0

    @classmethod
    def empty(cls, n_users: int, n_pairs: int) -> "EpochStats":
        z = np.zeros
        return cls(z(n_users), z(n_users), z(n_users), z(n_users), z(n_pairs))

    def pack(self) -> list[np.ndarray]:
        return [self.ce, self.kl, self.correct, self.seen, self.vclub, np.array([self.steps], dtype=float)]

    @classmethod
    def unpack(cls, arrays) -> "EpochStats":
        *parts, steps = [a.copy() for a in arrays]
        return cls(*parts, steps=int(steps[0]))


@dataclass
class RunState:
    cfg: TrainConfig
    input_dim: int
    num_classes: int
    encoders: list[GaussianEncoder]
    decoders: list[Decoder]
    opt: AdamState
    bank: PairEstimatorBank | None
    epoch: int = 0
    step: int = 0
    step_in_epoch: int = 0
    stats: EpochStats | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.cfg.n_users) for j in range(self.cfg.n_users) if i != j]

    @property
    def phase_a_updates(self) -> int:
        return self.bank.updates if self.bank is not None else 0

    def main_parameters(self) -> list[Tensor]:
        ps = []
        for enc, dec in zip(self.encoders, self.decoders):
            ps += enc.parameters() + dec.parameters()
        return ps


def build_state(cfg: TrainConfig, input_dim: int, num_classes: int) -> RunState:
    rng = substream(cfg.seed, "init")
    encoders, decoders = [], []
    for _ in range(cfg.n_users):
        enc = GaussianEncoder([input_dim, *cfg.encoder_hidden], cfg.latent_dim, cfg.logvar_clamp)
        dec = Decoder([cfg.latent_dim, *cfg.decoder_hidden, num_classes])
        init_params(enc, rng)
        init_params(dec, rng)
        encoders.append(enc)
        decoders.append(dec)
    bank = None
    if cfg.objective == "toib":
        bank = PairEstimatorBank.build(cfg.n_users, cfg.latent_dim, num_classes, substream(cfg.seed, "init", "club"),
                                       steps=cfg.club_steps, mode=cfg.club_mode, lr=cfg.club_lr,
                                       hidden=cfg.club_hidden)
    state = RunState(cfg, input_dim, num_classes, encoders, decoders, AdamState(lr=cfg.lr), bank)
    state.stats = EpochStats.empty(cfg.n_users, len(state.pairs))
    return state


def encode(state: RunState, xs: list[np.ndarray], rng: np.random.Generator, latent_mean: bool = False):
    """Gaussian latents and power-normalised samples for every user."""
    lats, zs = [], []
    for enc, x in zip(state.encoders, xs):
        lat = encoder_forward(enc, Tensor(x))
        eps = rng.standard_normal(lat.mu.shape)
        z = lat.mu if latent_mean else ad.reparam_sample(lat.mu, lat.logvar, eps)
        lats.append(lat)
        zs.append(power_normalize(z))
    return lats, zs


def broadcast(state: RunState, zs: list[Tensor], rng: np.random.Generator, snr_db: float,
              kind: str | None = None, resamples: int = 1, sigma2: float | None = None) -> list[list[Tensor]]:
    """Superpose, then draw ``resamples`` independent channel uses per user.

    Returns ``y[l][i]``.  Draw order is resample-major, then user.  The noise
    variance is calibrated on this batch unless ``sigma2`` is given.
    """
    cfg = state.cfg
    kind = kind or cfg.channel
    s = superpose(zs, cfg.allocation())
    if sigma2 is None:
        sigma2 = calibrate_noise(s, SnrSpec(snr_db))
    received = []
    for _ in range(resamples):
        row = []
        for _ in range(cfg.n_users):
            real = draw_realization(kind, sigma2, s.shape[0], rng, cfg.equalize)
            row.append(transmit(s, real, rng))
        received.append(row)
    return received


def _frozen(bank: PairEstimatorBank | None):
    params = [p for net in bank.nets.values() for p in net.parameters()] if bank else []

    class _Ctx:
        def __enter__(self):
            for p in params:
                p.requires_grad = False

        def __exit__(self, *exc):
            for p in params:
                p.requires_grad = True
                p.grad = None

    return _Ctx()


def noise_variance(state: RunState, batch: BatchPair, rng: np.random.Generator) -> float:
    """The per-dimension noise variance a training step would calibrate for ``batch``."""
    _, zs = encode(state, batch.x, rng)
    return calibrate_noise(superpose(zs, state.cfg.allocation()), SnrSpec(state.cfg.train_snr_db))


def _forward(state: RunState, batch: BatchPair, rng: np.random.Generator, sigma2: float | None = None):
    cfg = state.cfg
    lats, zs = encode(state, batch.x, rng)
    received = broadcast(state, zs, rng, cfg.train_snr_db, resamples=cfg.resamples, sigma2=sigma2)
    ce, correct = [], np.zeros(cfg.n_users)
    for i, dec in enumerate(state.decoders):
        per_use = []
        for row in received:
            logits = decoder_forward(dec, row[i])
            per_use.append(cross_entropy(logits, batch.u[i]))
            correct[i] += np.sum(predict(logits) == batch.u[i])
        ce.append(per_use[0] if len(per_use) == 1 else ad.scale(_add_all(per_use), 1.0 / len(per_use)))
    kl = [kl_to_std_normal(lat) for lat in lats]
    return zs, ce, kl, correct


def _objective(state: RunState, zs, ce, kl, part: ClassPartition) -> LossBreakdown:
    # caller must hold the estimator bank frozen
    cfg = state.cfg
    vclub = {}
    if state.bank is not None:
        if cfg.alpha > 0:
            for i, j in state.pairs:
                vclub[(i, j)] = vclub_pair(state.bank.nets[(i, j)], zs[i], zs[j], part)
        else:
            # logged only; kept off the graph so alpha = 0 matches the VIB path exactly
            with ad.no_grad():
                for i, j in state.pairs:
                    vclub[(i, j)] = vclub_pair(state.bank.nets[(i, j)], zs[i], zs[j], part)
    return toib_loss(ce, kl, vclub, cfg.alpha, cfg.beta)


def compute_loss(state: RunState, batch: BatchPair, rng: np.random.Generator,
                 sigma2: float | None = None) -> LossBreakdown:
    """Phase-B objective on the tape (estimators frozen, no parameter updates)."""
    part = ClassPartition.from_classes(batch.w)
    zs, ce, kl, _ = _forward(state, batch, rng, sigma2)
    with _frozen(state.bank):
        loss = _objective(state, zs, ce, kl, part)
    return loss


def train_step(state: RunState, batch: BatchPair) -> LossBreakdown:
    """One iteration of the two-phase procedure on a class-aligned batch.

    Encode and broadcast, fit every pair estimator on detached latents
    (Phase A), then take one joint Adam step on all encoders and decoders
    against the full objective with the estimators frozen (Phase B).
    """
    cfg = state.cfg
    rng = substream(cfg.seed, "step", state.step)
    part = ClassPartition.from_classes(batch.w)
    zs, ce, kl, correct = _forward(state, batch, rng)
    if not all(math.isfinite(t.item()) for t in ce + kl):
        raise TrainingDiverged(state.step, {"ce": [t.item() for t in ce], "kl": [t.item() for t in kl]})

    if state.bank is not None and cfg.club_steps > 0:
        phase_a_update(state.bank, [z.data for z in zs], part, diagnostics=False)

    with _frozen(state.bank):
        loss = _objective(state, zs, ce, kl, part)
        if not math.isfinite(loss.total.item()):
            raise TrainingDiverged(state.step, loss.values())
        ad.backward(loss.total)
    adam_step(state.main_parameters(), state.opt)

    st = state.stats
    st.ce += [t.item() for t in ce]
    st.kl += [t.item() for t in kl]
    st.correct += correct
    st.seen += batch.size * cfg.resamples
    for k, pair in enumerate(state.pairs):
        if pair in loss.vclub:
            st.vclub[k] += loss.vclub[pair].item()
    st.steps += 1
    state.step += 1
    state.step_in_epoch += 1
    return loss


def _add_all(ts):
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


def _close_epoch(state: RunState) -> dict:
    st = state.stats
    n = max(st.steps, 1)
    rec = {
        "epoch": state.epoch + 1,
        "ce": (st.ce / n).tolist(),
        "kl": (st.kl / n).tolist(),
        "acc": (st.correct / np.maximum(st.seen, 1)).tolist(),
        "vclub": {pair: st.vclub[k] / n for k, pair in enumerate(state.pairs)} if state.bank else {},
    }
    state.history.append(rec)
    state.epoch += 1
    state.step_in_epoch = 0
    state.stats = EpochStats.empty(state.cfg.n_users, len(state.pairs))
    return rec


def epoch_batches(state: RunState, datasets: list[Dataset]) -> list[BatchPair]:
    rng = substream(state.cfg.seed, "batches", state.epoch)
    return list(class_aligned_batches(datasets, state.cfg.batch_size, rng, label_mode=state.cfg.label_mode))


def train(cfg: TrainConfig, datasets: list[Dataset], state: RunState | None = None,
          max_steps: int | None = None) -> RunState:
    """Run (or resume) training until ``cfg.epochs`` epochs or ``max_steps`` steps."""
    if len(datasets) != cfg.n_users:
        raise ValueError(f"{len(datasets)} datasets for {cfg.n_users} users")
    if state is None:
        state = build_state(cfg, datasets[0].input_dim, datasets[0].num_classes)
    done = 0
    while state.epoch < cfg.epochs:
        batches = epoch_batches(state, datasets)
        for batch in batches[state.step_in_epoch:]:
            if max_steps is not None and done >= max_steps:
                return state
            train_step(state, batch)
            done += 1
        rec = _close_epoch(state)
        log.info("epoch %d ce=%s acc=%s", rec["epoch"], rec["ce"], rec["acc"])
    return state


# -- metrics ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics(state: RunState, user_path, pair_path) -> None:
    with open(user_path, "w", newline="") as fh:
        fh.write("epoch,user,ce,kl,acc_train\n")
        for rec in state.history:
            for i in range(state.cfg.n_users):
                fh.write(f"{rec['epoch']},{i + 1},{_fmt(rec['ce'][i])},{_fmt(rec['kl'][i])},{_fmt(rec['acc'][i])}\n")
    with open(pair_path, "w", newline="") as fh:
        fh.write("epoch,pair_i,pair_j,vclub\n")
        for rec in state.history:
            for (i, j), v in sorted(rec["vclub"].items()):
                fh.write(f"{rec['epoch']},{i + 1},{j + 1},{_fmt(v)}\n")


# -- checkpoints -----------------------------------------------------------

def _opt_arrays(st: AdamState, n_params: int) -> list[np.ndarray]:
    m = st.m or [None] * n_params
    v = st.v or [None] * n_params
    head = np.array([float(st.step), 1.0 if st.m else 0.0])
    return [head] + [a for a in m + v if a is not None]


def checkpoint_save(state: RunState, path) -> None:
    groups = [("counters", [np.array([state.epoch, state.step, state.step_in_epoch, state.phase_a_updates],
                                     dtype=float)])]
    for i, (enc, dec) in enumerate(zip(state.encoders, state.decoders)):
        groups.append((f"encoder{i + 1}", [p.data for p in enc.parameters()]))
        groups.append((f"decoder{i + 1}", [p.data for p in dec.parameters()]))
    groups.append(("adam/main", _opt_arrays(state.opt, len(state.main_parameters()))))
    if state.bank is not None:
        for (i, j) in state.bank.pairs:
            net = state.bank.nets[(i, j)]
            groups.append((f"club{i + 1}_{j + 1}", [p.data for p in net.parameters()]))
            groups.append((f"adam/club{i + 1}_{j + 1}", _opt_arrays(state.bank.states[(i, j)], len(net.parameters()))))
    groups.append(("epoch_stats", state.stats.pack()))
    groups.append(("history", [_history_row(state, rec) for rec in state.history]))
    write_checkpoint(path, groups)


def _history_row(state: RunState, rec: dict) -> np.ndarray:
    vclub = [rec["vclub"].get(pair, 0.0) for pair in state.pairs]
    return np.array([rec["epoch"], *rec["ce"], *rec["kl"], *rec["acc"], *vclub], dtype=float)


def _history_record(state: RunState, row: np.ndarray) -> dict:
    n = state.cfg.n_users
    vals = row[1:]
    return {
        "epoch": int(row[0]),
        "ce": vals[:n].tolist(),
        "kl": vals[n:2 * n].tolist(),
        "acc": vals[2 * n:3 * n].tolist(),
        "vclub": dict(zip(state.pairs, vals[3 * n:].tolist())) if state.bank else {},
    }


def _fill(params: list[Tensor], arrays: list[np.ndarray], name: str) -> None:
    if len(params) != len(arrays):
        raise FormatError(f"group {name!r} has {len(arrays)} tensors, expected {len(params)}", 0)
    for p, a in zip(params, arrays):
        if p.shape != a.shape:
            raise FormatError(f"group {name!r}: tensor shape {a.shape} != {p.shape}", 0)
        p.data = a.copy()


def _restore_opt(st: AdamState, arrays: list[np.ndarray], n_params: int, name: str) -> None:
    head, rest = arrays[0], arrays[1:]
    st.step = int(head[0])
    if head[1]:
        if len(rest) != 2 * n_params:
            raise FormatError(f"group {name!r}: optimizer moment count mismatch", 0)
        st.m = [a.copy() for a in rest[:n_params]]
        st.v = [a.copy() for a in rest[n_params:]]
    else:
        st.m, st.v = [], []


def checkpoint_load(path, cfg: TrainConfig, input_dim: int, num_classes: int) -> RunState:
    """Rebuild a :class:`RunState` for ``cfg`` and fill it from ``path``."""
    groups = dict(read_checkpoint(path))
    state = build_state(cfg, input_dim, num_classes)
    try:
        epoch, step, in_epoch, updates = (int(v) for v in groups["counters"][0])
        state.epoch, state.step, state.step_in_epoch = epoch, step, in_epoch
        for i, (enc, dec) in enumerate(zip(state.encoders, state.decoders)):
            _fill(enc.parameters(), groups[f"encoder{i + 1}"], f"encoder{i + 1}")
            _fill(dec.parameters(), groups[f"decoder{i + 1}"], f"decoder{i + 1}")
        _restore_opt(state.opt, groups["adam/main"], len(state.main_parameters()), "adam/main")
        if state.bank is not None:
            state.bank.updates = updates
            for (i, j) in state.bank.pairs:
                net = state.bank.nets[(i, j)]
                _fill(net.parameters(), groups[f"club{i + 1}_{j + 1}"], f"club{i + 1}_{j + 1}")
                _restore_opt(state.bank.states[(i, j)], groups[f"adam/club{i + 1}_{j + 1}"],
                             len(net.parameters()), f"adam/club{i + 1}_{j + 1}")
        state.stats = EpochStats.unpack(groups["epoch_stats"])
        state.history = [_history_record(state, row) for row in groups["history"]]
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing group {exc.args[0]!r}", 0) from None
    return state


def config_fields() -> list:
    return list(fields(TrainConfig))
