"""Acceptance criteria, one test and one printed PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 9 minutes on
one core) or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import sys
import time

import numpy as np
import pytest
from scipy import integrate

from toib.autodiff import Tensor
from toib.channel import (PowerAllocation, SnrSpec, calibrate_noise, draw_realization, power_normalize, superpose,
                          transmit)
from toib.club import estimate_gaussian_mi
from toib.data import GenSpec, draw_batch, gen_synthetic, nearest_center_accuracy
from toib.evaluation import cross_decode, evaluate_accuracy, parameter_digest, sweep_snr
from toib.gradcheck import TOLERANCE, run_suite
from toib.nn import GaussianLatent
from toib.objectives import kl_to_std_normal
from toib.rng import substream
from toib.training import TrainConfig, build_state, checkpoint_load, checkpoint_save, train, train_step, write_metrics

SEEDS = range(5)
SNRS = (-5.0, 0.0, 5.0, 10.0, 20.0)
N_EVAL = 2000
EPOCHS = 50


def report(capsys, criterion: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")


# -- 1 ----------------------------------------------------------------------

def test_criterion_1_gradient_oracle(capsys):
    t0 = time.perf_counter()
    rows = run_suite(0)
    elapsed = time.perf_counter() - t0
    worst_name, worst = max(rows, key=lambda r: r[1])
    ok = worst <= TOLERANCE and elapsed < 10 and any(n == "pipeline" for n, _ in rows)
    report(capsys, "1", ok, f"{len(rows)} checks, worst {worst_name} rel err {worst:.2e} (<= 1e-4), {elapsed:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------

def _kl_quad(mu: float, var: float) -> float:
    s = math.sqrt(var)

    def f(z):
        logp = -0.5 * (z - mu) ** 2 / var - 0.5 * math.log(2 * math.pi * var)
        logr = -0.5 * z * z - 0.5 * math.log(2 * math.pi)
        return math.exp(logp) * (logp - logr)

    return integrate.quad(f, mu - 40 * s, mu + 40 * s, epsabs=1e-13, epsrel=1e-13, limit=400)[0]


def test_criterion_2_kl(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    quad_err, mc_err = 0.0, 0.0
    for _ in range(20):
        mu, var = rng.uniform(-2, 2), rng.uniform(0.1, 4)
        kl = kl_to_std_normal(GaussianLatent(Tensor([[mu]]), Tensor([[math.log(var)]]))).item()
        quad_err = max(quad_err, abs(kl - _kl_quad(mu, var)))
        z = mu + math.sqrt(var) * rng.standard_normal(10**6)
        mc = np.mean(-0.5 * (z - mu) ** 2 / var - 0.5 * math.log(var) + 0.5 * z * z)
        mc_err = max(mc_err, abs(mc / kl - 1))
    elapsed = time.perf_counter() - t0
    ok = quad_err <= 1e-6 and mc_err <= 0.01 and elapsed < 30
    report(capsys, "2", ok, f"max |KL - quadrature| {quad_err:.1e} (<= 1e-6), max MC rel err {mc_err:.2%} "
                            f"(<= 1%), {elapsed:.1f}s")
    assert ok


# -- 3 ----------------------------------------------------------------------

def test_criterion_3_club_gaussian_mi(capsys):
    t0 = time.perf_counter()
    lines, ok = [], True
    for rho in (0.0, 0.5, 0.8):
        for d in (1, 4):
            r = estimate_gaussian_mi(rho, d, substream(0, "criterion3", rho, d))
            ok &= r.within_tolerance and r.upper_bound_holds
            lines.append(f"rho={rho} d={d}: est {r.mean:.4f}±{r.stderr:.4f} vs MI {r.true_mi:.4f} "
                         f"(tol {r.tolerance:.3f}, {'ok' if r.within_tolerance else 'out'}; "
                         f"bound {'ok' if r.upper_bound_holds else 'violated'}; exact CLUB {r.club_reference:.4f})")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    report(capsys, "3", ok, f"{elapsed:.1f}s\n    " + "\n    ".join(lines))
    assert ok


# -- 4 ----------------------------------------------------------------------

def _empirical_snr_db(kind: str, rng) -> tuple[float, float]:
    V, d = 12_500, 8  # 10^5 symbols
    zs = [power_normalize(Tensor(rng.standard_normal((V, d)))) for _ in range(2)]
    s = superpose(zs, PowerAllocation.equal(2)).data
    sigma2 = calibrate_noise(s, SnrSpec(5.0))
    real = draw_realization(kind, sigma2, V, rng, equalize=True)
    y = transmit(Tensor(s), real, rng).data
    h = real.gain[:, None]
    noise = (y - s) * h  # undo equalisation to recover n
    return 10 * math.log10(np.mean((h * s) ** 2) / np.mean(noise ** 2)), float(np.mean(h * h))


def test_criterion_4_channel_calibration(capsys):
    t0 = time.perf_counter()
    rng = substream(0, "criterion4")
    awgn, _ = _empirical_snr_db("awgn", rng)
    ray, _ = _empirical_snr_db("rayleigh", rng)
    h2 = float(np.mean(draw_realization("rayleigh", 1.0, 100_000, rng).gain ** 2))
    elapsed = time.perf_counter() - t0
    ok = abs(awgn - 5) <= 0.2 and abs(ray - 5) <= 0.2 and abs(h2 - 1) <= 0.02 and elapsed < 30
    report(capsys, "4", ok, f"target 5 dB: awgn {awgn:.3f} dB, equalized rayleigh {ray:.3f} dB; "
                            f"E[h^2]={h2:.4f}; {elapsed:.1f}s")
    assert ok


# -- 5 ----------------------------------------------------------------------

def test_criterion_5_reductions(capsys):
    t0 = time.perf_counter()
    spec = GenSpec(seed=0)
    tr, te = gen_synthetic(spec, "train"), gen_synthetic(spec, "test")

    short = dict(epochs=5, seed=0)
    a = train(TrainConfig(alpha=0.0, objective="toib", **short), tr)
    b = train(TrainConfig(alpha=0.0, objective="vib", **short), tr)
    bitwise = parameter_digest_main(a) == parameter_digest_main(b)

    one = GenSpec(n_users=1, seed=0)
    tr1, te1 = gen_synthetic(one, "train"), gen_synthetic(one, "test")
    single = train(TrainConfig(n_users=1, **short), tr1)
    empty_vclub = single.bank is not None and not single.bank.pairs and all(not r["vclub"] for r in single.history)

    plain = train(TrainConfig(n_users=1, alpha=0.0, beta=0.0, train_snr_db=math.inf, epochs=EPOCHS, seed=0), tr1)
    (acc,), _ = evaluate_accuracy(plain, te1, math.inf, "awgn", N_EVAL, substream(0, "criterion5"))
    oracle = nearest_center_accuracy(tr1[0], te1[0])
    elapsed = time.perf_counter() - t0
    ok = bitwise and empty_vclub and acc >= oracle - 0.02 and elapsed < 180
    report(capsys, "5", ok, f"alpha=0 vs VIB bitwise: {bitwise}; N=1 vclub empty: {empty_vclub}; "
                            f"noiseless alpha=beta=0 held-out acc {acc:.4f} vs nearest-center {oracle:.4f} "
                            f"(>= oracle - 0.02); {elapsed:.1f}s")
    assert ok


def parameter_digest_main(state) -> str:
    return "".join(p.data.tobytes().hex() for p in state.main_parameters())


# -- 6 ----------------------------------------------------------------------

def _vclub_at_convergence(state) -> float:
    return float(np.mean([sum(r["vclub"].values()) for r in state.history[-5:]]))


@pytest.fixture(scope="module")
def end_to_end():
    """Per seed: TOIB and alpha=0 runs on shared labels, and a TOIB run on independent labels."""
    out = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        shared = GenSpec(seed=seed)
        tr, te = gen_synthetic(shared, "train"), gen_synthetic(shared, "test")
        rec = {"seed": seed}
        for tag, alpha in (("toib", 0.01), ("vib", 0.0)):
            state = train(TrainConfig(epochs=EPOCHS, alpha=alpha, seed=seed), tr)
            sweep = sweep_snr(state, te, SNRS, "awgn", N_EVAL, seed)
            rec[tag] = {"state": state, "sweep": sweep, "vclub": _vclub_at_convergence(state),
                        "train_acc": float(np.mean(state.history[-1]["acc"]))}
        indep = GenSpec(seed=seed, label_mode="independent")
        tri, tei = gen_synthetic(indep, "train"), gen_synthetic(indep, "test")
        state = train(TrainConfig(epochs=EPOCHS, seed=seed, label_mode="independent"), tri)
        rec["cross"] = cross_decode(state, tei, 0.0, "awgn", N_EVAL, substream(seed, "cross-decode"))
        rec["seconds"] = time.perf_counter() - t0
        out.append(rec)
    return out


def test_criterion_6_end_to_end(capsys, end_to_end):
    runs = end_to_end
    med = lambda xs: float(np.median(xs))  # noqa: E731
    lines, ok = [], True

    worst_gap = min(med([r["toib"]["sweep"].accuracy(s, u) for r in runs])
                    - med([r["vib"]["sweep"].accuracy(s, u) for r in runs]) for s in SNRS for u in (1, 2))
    ok_a = worst_gap >= -0.01
    lines.append(f"(a) min over SNR/user of median TOIB - VIB accuracy {worst_gap:+.4f} (>= -0.01): "
                 f"{'ok' if ok_a else 'FAIL'}")

    v_toib, v_vib = med([r["toib"]["vclub"] for r in runs]), med([r["vib"]["vclub"] for r in runs])
    ok_b = v_toib <= v_vib
    lines.append(f"(b) median summed vCLUB, last 5 epochs: TOIB {v_toib:.5f} vs VIB {v_vib:.5f}: "
                 f"{'ok' if ok_b else 'FAIL'}")

    off = np.median(np.stack([r["cross"].acc for r in runs]), axis=0)
    off_entries = off[~np.eye(2, dtype=bool)]
    ok_c = bool(np.all(np.abs(off_entries - 0.25) <= 0.05))
    lines.append(f"(c) median cross-decode matrix {off.round(4).tolist()}, off-diagonal within 0.25±0.05: "
                 f"{'ok' if ok_c else 'FAIL'}")

    gaps = [med([r["toib"]["sweep"].accuracy(20.0, u) for r in runs])
            - med([r["toib"]["sweep"].accuracy(-5.0, u) for r in runs]) for u in (1, 2)]
    ok_d = min(gaps) >= -0.02
    lines.append(f"(d) median acc(20 dB) - acc(-5 dB) per user {[round(g, 4) for g in gaps]} (>= -0.02): "
                 f"{'ok' if ok_d else 'FAIL'}")

    slowest = max(r["seconds"] for r in runs)
    ok = ok_a and ok_b and ok_c and ok_d and slowest < 600
    lines.append(f"slowest seed {slowest:.0f}s (< 600s)")
    report(capsys, "6", ok, "\n    " + "\n    ".join(lines))
    assert ok


def test_default_config_train_accuracy(end_to_end):
    assert np.median([r["toib"]["train_acc"] for r in end_to_end]) >= 0.90


def test_cross_decode_diagonal_dominates(end_to_end):
    med = np.median(np.stack([r["cross"].acc for r in end_to_end]), axis=0)
    assert np.all(np.diag(med)[:, None] >= med)


# -- 7 ----------------------------------------------------------------------

def test_criterion_7_phase_a_cost(capsys):
    t0 = time.perf_counter()
    observed, ok = {}, True
    for n in (1, 2, 3, 4):
        cfg = TrainConfig(n_users=n, club_steps=5, seed=0)
        ds = gen_synthetic(GenSpec(n_users=n, n_train=200, n_test=200))
        state = build_state(cfg, 8, 4)
        deltas = set()
        for k in range(3):
            before = state.phase_a_updates
            train_step(state, draw_batch(ds, cfg.batch_size, substream(0, "criterion7", n, k)))
            deltas.add(state.phase_a_updates - before)
        observed[n] = sorted(deltas)
        ok &= deltas == {5 * n * (n - 1)}
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10
    report(capsys, "7", ok, f"updates/step (M=5) {observed} vs M*N*(N-1) "
                            f"{ {n: 5 * n * (n - 1) for n in observed} }; {elapsed:.1f}s")
    assert ok


# -- 8 ----------------------------------------------------------------------

def _write_outputs(state, te, folder) -> dict:
    folder.mkdir()
    write_metrics(state, folder / "metrics.csv", folder / "metrics_pairs.csv")
    sweep_snr(state, te, SNRS, "awgn", N_EVAL, 0).to_csv(folder / "sweep.csv")
    cross_decode(state, te, 0.0, "awgn", N_EVAL, substream(0, "cross-decode")).to_csv(folder / "crossdecode.csv")
    return {p.name: p.read_bytes() for p in folder.iterdir()}


def test_criterion_8_determinism(capsys, tmp_path):
    spec = GenSpec(seed=0)
    tr, te = gen_synthetic(spec, "train"), gen_synthetic(spec, "test")
    cfg = TrainConfig(epochs=EPOCHS, seed=0)
    first = _write_outputs(train(cfg, tr), te, tmp_path / "a")
    second = _write_outputs(train(cfg, tr), te, tmp_path / "b")
    identical = first == second

    split = 45  # inside epoch 2 (32 steps per epoch)
    full = train(cfg, tr, max_steps=split + 10)
    part = train(cfg, tr, max_steps=split)
    checkpoint_save(part, tmp_path / "ck.bin")
    resumed = train(cfg, tr, state=checkpoint_load(tmp_path / "ck.bin", cfg, 8, 4), max_steps=10)
    resume_ok = parameter_digest(resumed) == parameter_digest(full) and resumed.step == full.step
    ok = identical and resume_ok
    report(capsys, "8", ok, f"two full runs byte-identical ({', '.join(sorted(first))}): {identical}; "
                            f"resume after step {split} + 10 steps bitwise equal: {resume_ok}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
