"""Runtime invariant suite behind the ``validate`` CLI subcommand.

Each check is a fast, deterministic self-test of a structural property the
pipeline relies on. The pytest suite is the authoritative verification;
this module exists so a deployed install can sanity-check itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baselines, fastpath, harness, model, rank1


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _check(name):
    def wrap(fn):
        fn._check_name = name
        return fn

    return wrap


@_check("steering vector unit modulus and norm")
def _steering(rng):
    for length in (4, 63, 128):
        for theta in (-1.2, 0.0, 0.7, np.pi / 2 - 1e-3):
            a = model.steering_vector(theta, length)
            assert np.allclose(np.abs(a), 1.0, atol=1e-12)
            assert abs(np.vdot(a, a).real - length) < 1e-9
            assert a[0] == 1.0 + 0j


@_check("hankel index rule and square symmetry")
def _hankel(rng):
    y = np.arange(12, dtype=complex) + 1j
    h = rank1.build_hankel(y, 5)
    for i in range(5):
        for j in range(7):
            assert h.ybar[i, j] == y[i + j]
    y2 = model.complex_gaussian(rng, (16,))
    sq = rank1.build_hankel(y2, 8)
    assert np.array_equal(sq.ybar, sq.ybar.T)


@_check("noiseless hankel rank equals path count")
def _rank(rng):
    cfg = model.SystemConfig(M=32, K=1, B=1, P=3, sigma_n2=0.0, seed=5)
    chan = model.draw_channel(cfg, rng)
    h = rank1.build_hankel(chan.H[:, 0], cfg.L)
    s = np.linalg.svd(h.ybar, compute_uv=False)
    assert np.count_nonzero(s > 1e-8 * s[0]) == cfg.P


@_check("subspace projector idempotent, denominator bounded")
def _projector(rng):
    cfg = model.SystemConfig(M=64, K=1, B=1, P=2, sigma_n2=1e-2, seed=6)
    chan = model.draw_channel(cfg, rng)
    y = chan.H[:, 0] + model.complex_gaussian(rng, (64,), cfg.sigma_n2)
    basis = rank1.signal_subspace(rank1.build_hankel(y, cfg.L), cfg.P)
    proj = basis.u_p @ basis.u_p.conj().T
    assert np.linalg.norm(proj @ proj - proj) <= 1e-8
    spec = rank1.pseudo_spectrum(basis, cfg)
    denom = 1.0 / spec.values
    assert denom.min() >= 0.0
    assert denom.max() <= cfg.L * (1 + 1e-6)


@_check("phase and scaling equivariance of the estimator")
def _equivariance(rng):
    cfg = model.SystemConfig(M=64, K=1, B=1, P=2, sigma_n2=1e-3, seed=7)
    chan = model.draw_channel(cfg, rng)
    y = chan.H[:, 0] + model.complex_gaussian(rng, (64,), cfg.sigma_n2)
    ref = rank1.estimate_single_user(y, cfg)
    rot = rank1.estimate_single_user(np.exp(0.9j) * y, cfg)
    assert np.allclose(ref.aoas[0].thetas, rot.aoas[0].thetas)
    assert np.allclose(rot.gains[0], np.exp(0.9j) * ref.gains[0])
    scaled = rank1.estimate_single_user(2.5 * y, cfg)
    assert np.allclose(ref.aoas[0].thetas, scaled.aoas[0].thetas)
    assert np.allclose(scaled.gains[0], 2.5 * ref.gains[0])


@_check("nystrom exact at full sampling (noiseless)")
def _nystrom(rng):
    cfg = model.SystemConfig(M=32, K=1, B=1, P=2, sigma_n2=0.0, seed=8)
    chan = model.draw_channel(cfg, rng)
    h = rank1.build_hankel(chan.H[:, 0], cfg.L)
    exact = rank1.signal_subspace(h, cfg.P)
    sketch = fastpath.sample_columns(h, h.L, rng)
    approx = fastpath.approx_subspace(
        sketch, fastpath.nystrom_weight(h, sketch.indices), cfg.P
    )
    d = np.linalg.norm(
        approx.u_p @ approx.u_p.conj().T - exact.u_p @ exact.u_p.conj().T
    )
    assert d <= 1e-8, f"projector distance {d:.2e}"


@_check("coherence endpoints (spike and DFT bases)")
def _coherence(rng):
    L, P = 64, 4
    eye = np.eye(L)[:, :P]
    assert abs(fastpath.coherence(eye) - L / P) < 1e-12
    dft = np.exp(-2j * np.pi * np.outer(np.arange(L), np.arange(P)) / L) / np.sqrt(L)
    assert abs(fastpath.coherence(dft) - 1.0) < 1e-9


@_check("despreading recovers each user noiselessly")
def _despread(rng):
    cfg = model.SystemConfig(M=16, K=3, B=6, P=1, sigma_n2=0.0, seed=9)
    chan = model.draw_channel(cfg, rng)
    X = model.draw_pilots(cfg, rng)
    Y = model.transmit(chan, X, 0.0, rng)
    for k in range(cfg.K):
        assert np.allclose(model.despread(Y, X.X[:, k]), chan.H[:, k], atol=1e-10)


@_check("LS exact noiselessly; MMSE approaches LS as noise vanishes")
def _ls_mmse(rng):
    cfg = model.SystemConfig(M=12, K=2, B=4, P=1, sigma_n2=0.0, seed=10)
    chan = model.draw_channel(cfg, rng)
    X = model.draw_pilots(cfg, rng)
    Y = model.transmit(chan, X, 0.0, rng)
    ls = baselines.ls_estimate(Y, X)
    assert np.allclose(ls.H_hat, chan.H, atol=1e-10)
    cov = baselines.genie_covariance(cfg, rng, n_samples=10 * cfg.M)
    mm = baselines.mmse_estimate(Y, X, cov, sigma_n2=1e-10, method="direct")
    rel = np.linalg.norm(mm.H_hat - ls.H_hat) / np.linalg.norm(chan.H)
    assert rel <= 1e-4, f"MMSE-LS gap {rel:.2e}"


@_check("CRLB ordering: MMSE floor above beamforming floor")
def _crlb(rng):
    for M in (8, 64, 256, 1024):
        for snr in (0.0, 10.0, 20.0, 40.0):
            cfg = model.SystemConfig(M=M, K=1, B=2, P=5).at_snr_db(snr)
            assert baselines.crlb_mmse(cfg) > baselines.crlb_rank1(cfg)


@_check("FFT estimator exact for an on-bin path")
def _fft(rng):
    M = 64
    cfg = model.SystemConfig(M=M, K=1, B=1, P=1, sigma_n2=0.0)
    theta = float(np.arcsin(2 * 5 / M))
    h = 0.8 * np.exp(0.3j) * model.steering_vector(theta, M)
    est = baselines.fft_angular_estimate(h, cfg)
    assert harness.nmse(est.h_hat, h) < 1e-10


@_check("sweep determinism under reseeding")
def _determinism(rng):
    spec = harness.SweepSpec(
        config=model.SystemConfig(M=32, K=2, B=4, P=2, seed=123),
        snr_db_list=(20.0,),
        M_list=(32,),
        trials=3,
        estimators=("rank1", "ls"),
    )
    a = harness.run_sweep(spec)
    b = harness.run_sweep(spec)
    assert a.records == b.records


ALL_CHECKS = [
    obj for obj in globals().values() if callable(obj) and hasattr(obj, "_check_name")
]


def run_checks() -> list[CheckResult]:
    results = []
    for fn in ALL_CHECKS:
        rng = np.random.default_rng(2024)
        try:
            fn(rng)
            results.append(CheckResult(fn._check_name, True))
        except AssertionError as exc:
            results.append(CheckResult(fn._check_name, False, str(exc)))
        except Exception as exc:  # noqa: BLE001 - report, do not crash the CLI
            results.append(
                CheckResult(fn._check_name, False, f"{type(exc).__name__}: {exc}")
            )
    return results
