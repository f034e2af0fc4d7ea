"""Central finite-difference checks for every autodiff op and the full training graph."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BatchPair
from .rng import substream

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr``, perturbed in place."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = f()
        flat[k] = orig - h
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return out


def check(fn: Callable[..., Tensor], inputs: list[np.ndarray], h: float = STEP) -> float:
    """Max relative error between tape and finite-difference gradients of the scalar ``fn``."""
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    ad.backward(fn(*leaves))
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

        def f():
            with ad.no_grad():
                return fn(*leaves).item()

        worst = max(worst, relative_error(analytic, numeric_grad(f, leaf.data, h)))
    return worst


def _project(t: Tensor, weights: np.ndarray) -> Tensor:
    # random linear functional so every output element reaches the loss
    return ad.sum(ad.mul(t, weights))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    u = lambda *shape: rng.uniform(-2, 2, size=shape)  # noqa: E731
    W = {k: u(3, 4) for k in ("a", "b")}
    R34, R4, R3, R32, R44, R36 = u(3, 4), u(4), u(3), u(3, 2), u(4, 4), u(3, 6)
    idx = np.array([2, 0, 2, 1])
    cols = np.array([1, 3, 0])
    return {
        "add": (lambda a, b: _project(ad.add(a, b), R34), [W["a"], W["b"]]),
        "add_scalar": (lambda a, c: _project(ad.add(a, c), R34), [W["a"], u()]),
        "sub": (lambda a, b: _project(ad.sub(a, b), R34), [W["a"], W["b"]]),
        "mul": (lambda a, b: _project(ad.mul(a, b), R34), [W["a"], W["b"]]),
        "mul_scalar": (lambda a, c: _project(ad.mul(c, a), R34), [W["a"], u()]),
        "scale": (lambda a: _project(ad.scale(a, -1.7), R34), [W["a"]]),
        "exp": (lambda a: _project(ad.exp(a), R34), [W["a"]]),
        "log": (lambda a: _project(ad.log(a), R34), [rng.uniform(0.2, 2.0, size=(3, 4))]),
        "relu": (lambda a: _project(ad.relu(a), R34), [_away_from_zero(rng, (3, 4))]),
        "tanh": (lambda a: _project(ad.tanh(a), R34), [W["a"]]),
        "clip": (lambda a: _project(ad.clip(a, -1.0, 1.0), R34),
                 [np.array([[-1.5, -0.5, 0.2, 1.4], [0.9, -0.9, 1.8, -1.8], [0.0, 0.5, -0.3, 1.2]])]),
        "matmul": (lambda a, b: _project(ad.matmul(a, b), R32), [W["a"], u(4, 2)]),
        "add_bias": (lambda a, b: _project(ad.add_bias(a, b), R34), [W["a"], R4.copy()]),
        "concat_cols": (lambda a, b: _project(ad.concat_cols(a, b), R36), [W["a"], u(3, 2)]),
        "take_rows": (lambda a: _project(ad.take_rows(a, idx), R44), [W["a"]]),
        "pick": (lambda a: _project(ad.pick(a, cols), R3), [W["a"]]),
        "log_softmax": (lambda a: _project(ad.log_softmax(a), R34), [W["a"]]),
        "sum": (lambda a: ad.sum(a), [W["a"]]),
        "sum_axis": (lambda a: _project(ad.sum(a, axis=1), R3), [W["a"]]),
        "mean": (lambda a: ad.mean(a), [W["a"]]),
        "mean_axis": (lambda a: _project(ad.mean(a, axis=0), R4), [W["a"]]),
        "reparam_sample": (lambda m, lv: _project(ad.reparam_sample(m, lv, R34), W["b"] * 0.5), [W["a"], W["b"]]),
    }


def pipeline_case(seed: int = 0):
    """Tiny end-to-end instance: V=4, d=2, N=2, K=3, alpha=beta=0.01 (untrained CLUB nets).

    The channel noise variance is calibrated once at the base point and then
    held fixed, matching the tape, which treats it as a constant.
    """
    from .training import TrainConfig, build_state, compute_loss, noise_variance

    cfg = TrainConfig(n_users=2, batch_size=4, latent_dim=2, encoder_hidden=(5,), decoder_hidden=(5,),
                      club_hidden=(4,), alpha=0.01, beta=0.01, seed=seed)
    d_x, K = 3, 3
    state = build_state(cfg, d_x, K)
    rng = substream(seed, "gradcheck")
    w = np.array([1, 1, 2, 3])
    batch = BatchPair([rng.standard_normal((4, d_x)) for _ in range(2)], [w.copy(), w.copy()], w)
    params = state.main_parameters()
    with ad.no_grad():
        sigma2 = noise_variance(state, batch, substream(seed, "gradcheck", "noise"))

    def loss():
        return compute_loss(state, batch, substream(seed, "gradcheck", "noise"), sigma2=sigma2).total

    return params, loss


def check_pipeline(seed: int = 0) -> float:
    params, loss = pipeline_case(seed)
    for p in params:
        p.grad = None
    ad.backward(loss())
    analytic = [p.grad.copy() for p in params]

    def f():
        with ad.no_grad():
            return loss().item()

    numeric = [numeric_grad(f, p.data) for p in params]
    return relative_error(np.concatenate([a.ravel() for a in analytic]),
                          np.concatenate([n.ravel() for n in numeric]))


def run_suite(seed: int = 0) -> list[tuple[str, float]]:
    rng = substream(seed, "gradcheck", "ops")
    rows = [(name, check(fn, [x.copy() for x in xs])) for name, (fn, xs) in op_cases(rng).items()]
    rows.append(("pipeline", check_pipeline(seed)))
    return rows
