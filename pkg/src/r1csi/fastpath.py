"""Nystrom-accelerated signal subspace for the square Hankel embedding.

Uniform column sampling plus the pseudo-inverse of the sampled principal
submatrix give a low-rank surrogate whose SVD costs O(s^2 L) instead of
O(L^3). The rest of the pipeline (spectrum scan, beamforming,
reconstruction) is shared with the exact estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError
from .model import SystemConfig
from .rank1 import (
    ChannelEstimate,
    HankelEmbedding,
    PseudoSpectrum,
    build_hankel,
    detect_peaks,
    polish_aoas,
    pseudo_spectrum,
    reconstruct,
    solve_gains,
)


class RankDeficitError(EstimationError):
    """The sketch carries fewer independent directions than requested."""


@dataclass(frozen=True)
class ColumnSketch:
    """s uniformly sampled columns of the square Hankel matrix.

    ``C`` holds the raw (unscaled) columns; the sampling-matrix scale
    sqrt(L/s) is tracked separately. It cancels identically in the
    compressed core below, so the subspace never sees it.
    """

    C: np.ndarray
    indices: np.ndarray
    scale: float


@dataclass(frozen=True)
class NystromWeight:
    """Pseudo-inverse of the sampled principal submatrix Ybar(I, I)."""

    W: np.ndarray
    pinv_tolerance: float


@dataclass(frozen=True)
class ApproxSubspace:
    """Approximate signal subspace from the compressed core.

    ``core_asymmetry`` records ||B - B^H||_F / ||B||_F before the core was
    symmetrized: the square complex Hankel is symmetric but not Hermitian,
    so B is only approximately Hermitian and the defect is measured rather
    than assumed away.
    """

    u_p: np.ndarray
    eigvals: np.ndarray
    core_asymmetry: float


def default_sampling_length(P: int) -> int:
    """Operating default s = ceil(1.5 P)."""
    return math.ceil(1.5 * P)


def sample_columns(
    hankel: HankelEmbedding, s: int, rng: np.random.Generator
) -> ColumnSketch:
    """Gather s distinct columns of a square Hankel, uniformly at random."""
    if not hankel.is_square:
        raise ValueError(
            f"column sampling requires a square Hankel (L = M - L), got shape "
            f"{hankel.ybar.shape}"
        )
    L = hankel.L
    if not 1 <= s <= L:
        raise ValueError(f"sampling length must satisfy 1 <= s <= L={L}, got {s}")
    indices = np.sort(rng.choice(L, size=s, replace=False))
    return ColumnSketch(
        C=hankel.ybar[:, indices], indices=indices, scale=math.sqrt(L / s)
    )


def nystrom_weight(
    hankel: HankelEmbedding,
    indices: np.ndarray,
    pinv_tolerance: float = 1e-10,
    rank: int | None = None,
) -> NystromWeight:
    """W = pinv(Ybar(I, I)) with a relative singular-value cutoff.

    ``rank`` additionally truncates the pseudo-inverse to its strongest
    directions. The sampled principal submatrix has exactly P signal
    singular values; beyond them the plain pseudo-inverse divides by
    noise-level values and floods the compressed core with amplified
    noise, so the estimator truncates at the path count. Noiseless inputs
    are unaffected (the trailing values fall below the cutoff anyway).
    """
    indices = np.asarray(indices)
    L = hankel.L
    if indices.size == 0 or indices.min() < 0 or indices.max() >= min(
        L, hankel.ybar.shape[1]
    ):
        raise ValueError(f"column indices out of range for Hankel {hankel.ybar.shape}")
    sub = hankel.ybar[np.ix_(indices, indices)]
    U, s, Vh = np.linalg.svd(sub)
    keep = s > pinv_tolerance * (s[0] if s.size else 0.0)
    if rank is not None:
        if rank < 1:
            raise ValueError("rank must be >= 1")
        keep &= np.arange(s.shape[0]) < rank
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    W = (Vh.conj().T * inv[None, :]) @ U.conj().T
    return NystromWeight(W=W, pinv_tolerance=pinv_tolerance)


def exact_weight(hankel: HankelEmbedding, sketch: ColumnSketch) -> NystromWeight:
    """Residual-optimal weight C^+ Ybar (C^+)^H.

    Diagnostic alternative to the sketched weight; costs O(s M^2) and is
    excluded from the standard pipeline.
    """
    c_pinv = np.linalg.pinv(sketch.C, rcond=1e-10)
    return NystromWeight(
        W=c_pinv @ hankel.ybar @ c_pinv.conj().T, pinv_tolerance=1e-10
    )


def approx_subspace(
    sketch: ColumnSketch, weight: NystromWeight, P: int
) -> ApproxSubspace:
    """Signal subspace of the Nystrom surrogate C W C^H, restricted to rank P.

    The sketch SVD C = U_c S_c V_c^H compresses the surrogate to the s x s
    core B = S_c V_c^H W V_c S_c. B is symmetrized to (B + B^H)/2 before the
    eigendecomposition (the measured defect is reported), directions are
    ranked by |eigenvalue| since symmetrization can flip signs, and
    U_c U_B is re-orthonormalized by a thin QR.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    U_c, s_c, V_ch = np.linalg.svd(sketch.C, full_matrices=False)
    tol = s_c[0] * max(sketch.C.shape) * np.finfo(float).eps if s_c.size else 0.0
    rank = int(np.count_nonzero(s_c > tol))
    if P > rank:
        raise RankDeficitError(
            f"requested P={P} directions but the sketch has numerical rank "
            f"{rank} (s={sketch.C.shape[1]})"
        )
    B = (s_c[:, None] * V_ch) @ weight.W @ (V_ch.conj().T * s_c[None, :])
    norm_b = np.linalg.norm(B)
    asym = float(np.linalg.norm(B - B.conj().T) / norm_b) if norm_b > 0 else 0.0
    B_h = 0.5 * (B + B.conj().T)
    w, Q = np.linalg.eigh(B_h)
    order = np.argsort(-np.abs(w))[:P]
    U_tilde = U_c @ Q[:, order]
    U_tilde, _ = np.linalg.qr(U_tilde)
    return ApproxSubspace(u_p=U_tilde, eigvals=w[order], core_asymmetry=asym)


def coherence(U: np.ndarray) -> float:
    """Row coherence mu = (L/P) max_m ||U(m, :)||^2 of an orthonormal basis."""
    U = np.asarray(U)
    L, P = U.shape
    gram_dev = np.max(np.abs(U.conj().T @ U - np.eye(P)))
    if gram_dev > 1e-6:
        raise ValueError(
            f"coherence needs orthonormal columns (Gram deviation {gram_dev:.2e})"
        )
    return float(L / P * np.max(np.sum(np.abs(U) ** 2, axis=1)))


def required_sampling_length(P: int, delta: float, mu: float) -> int:
    """Sufficient sampling length ceil(4.5 P log2(P/delta) mu).

    A sufficient condition only; the operating default ceil(1.5 P) is far
    smaller and works well in practice.
    """
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if P < 1:
        raise ValueError("P must be >= 1")
    if mu < 1:
        raise ValueError(f"coherence must be >= 1, got {mu}")
    return math.ceil(4.5 * P * math.log2(P / delta) * mu)


def spectrum_bound_holds(
    exact: PseudoSpectrum,
    approx: PseudoSpectrum,
    L: int,
    s: int,
    sigma_p: float,
    sigma_p1: float,
    rtol: float = 0.0,
) -> np.ndarray:
    """Pointwise truth of sqrt(P) <= (1 + (L/sqrt(s)) sigma_{P+1}/sigma_P) sqrt(P~).

    Test-harness diagnostic for the approximation guarantee; returns one
    boolean per grid point.
    """
    if exact.grid.shape != approx.grid.shape or not np.allclose(
        exact.grid, approx.grid
    ):
        raise ValueError("pseudo-spectra were sampled on different grids")
    factor = 1.0 + (L / math.sqrt(s)) * (sigma_p1 / sigma_p)
    return np.sqrt(exact.values) <= factor * np.sqrt(approx.values) * (1.0 + rtol)


def estimate_fast(
    y: np.ndarray,
    config: SystemConfig,
    rng: np.random.Generator,
    s: int | None = None,
    refine: bool = True,
    polish: bool = True,
    gain_method: str = "joint",
) -> ChannelEstimate:
    """Single-user estimate with the subspace stage replaced by Nystrom.

    Requires an even M with L = M/2 so the Hankel is square. Peak polish,
    gain solving, and reconstruction are shared with the exact estimator.
    """
    y = np.asarray(y).ravel()
    if y.shape[0] != config.M:
        raise ValueError(f"y has {y.shape[0]} entries, config says M={config.M}")
    if config.L != config.M - config.L:
        raise ValueError(
            f"fast path requires a square Hankel (even M with L = M/2), got "
            f"M={config.M}, L={config.L}"
        )
    if s is None:
        s = default_sampling_length(config.P)
    hankel = build_hankel(y, config.L)
    sketch = sample_columns(hankel, s, rng)
    weight = nystrom_weight(hankel, sketch.indices, rank=config.P)
    basis = approx_subspace(sketch, weight, config.P)
    spectrum = pseudo_spectrum(basis, config)
    aoas = detect_peaks(spectrum, config.P, refine=refine)
    if polish:
        aoas = polish_aoas(y, aoas, config.d_over_lambda, grid_step=np.pi / config.N)
    gains = solve_gains(y, aoas, config.d_over_lambda, gain_method)
    h_hat = reconstruct(aoas, gains, config.M, config.d_over_lambda)
    return ChannelEstimate(
        H_hat=h_hat[:, None],
        estimator_tag="rank1_fast",
        aoas=(aoas,),
        gains=(gains,),
    )
