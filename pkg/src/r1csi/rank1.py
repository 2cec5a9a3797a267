"""Two-stage subspace channel estimator for a single spatial snapshot.

Pipeline: stack the despread receive vector into a Hankel matrix, split off
the signal subspace by SVD, scan a MUSIC-style pseudo-spectrum for the P
strongest angles, then read the path gains back out with matched
beamformers and rebuild the channel vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import EstimationError
from .model import SystemConfig, steering_matrix

# Relative floor applied to the pseudo-spectrum denominator so exact nulls
# (noiseless, on-grid paths) stay finite.
DENOMINATOR_FLOOR = 1e-12


class PeakDeficitError(EstimationError):
    """The pseudo-spectrum exposed fewer local maxima than requested paths."""


@dataclass(frozen=True)
class HankelEmbedding:
    """Space-embedding Hankel matrix built from one receive vector.

    ``ybar[i, j] == y[i + j]`` for 0 <= i < L, 0 <= j < source_length - L.
    """

    ybar: np.ndarray
    L: int
    source_length: int

    @property
    def is_square(self) -> bool:
        return self.ybar.shape[0] == self.ybar.shape[1]


@dataclass(frozen=True)
class SubspaceBasis:
    """Leading left singular vectors of the Hankel embedding."""

    u_p: np.ndarray
    singular_values: np.ndarray


@dataclass(frozen=True)
class PseudoSpectrum:
    """Spatial pseudo-spectrum sampled on a uniform angle grid."""

    grid: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class AoAEstimate:
    """Estimated arrival angles, ordered by descending spectrum value."""

    thetas: np.ndarray
    refined: bool


@dataclass(frozen=True)
class ChannelEstimate:
    """Channel estimate plus the per-user angle/gain decomposition.

    ``H_hat`` is always (M, K); single-user estimators produce K = 1.
    ``aoas``/``gains`` hold one entry per user (None where the estimator has
    no angular stage or where that user failed). ``failed_users`` maps user
    index to the failure message; failed columns are zero.
    """

    H_hat: np.ndarray
    estimator_tag: str
    aoas: tuple = ()
    gains: tuple = ()
    failed_users: dict = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.failed_users is None:
            object.__setattr__(self, "failed_users", {})

    @property
    def h_hat(self) -> np.ndarray:
        """The single-user channel vector; only valid when K == 1."""
        if self.H_hat.shape[1] != 1:
            raise ValueError("h_hat is only defined for single-user estimates")
        return self.H_hat[:, 0]


def build_hankel(y: np.ndarray, L: int) -> HankelEmbedding:
    """Stack y into the L x (M - L) Hankel matrix Ybar(i, j) = y[i + j].

    The last sample y[M-1] is unused; with L = M/2 this makes Ybar square
    and equal to its plain transpose, which the fast path relies on. The
    matrix is a strided view into y, no data is copied.
    """
    y = np.asarray(y).ravel()
    M = y.shape[0]
    if not 1 <= L <= M - 1:
        raise ValueError(f"stack length out of range: L={L}, M={M}")
    view = np.lib.stride_tricks.sliding_window_view(y, M - L)[:L]
    return HankelEmbedding(ybar=view, L=L, source_length=M)


def signal_subspace(hankel: HankelEmbedding, P: int) -> SubspaceBasis:
    """First P left singular vectors of the Hankel embedding.

    Columns are phase-canonicalized: the largest-magnitude entry of each is
    rotated to be real and positive, so equal inputs give equal bases.
    """
    rows, cols = hankel.ybar.shape
    if not 1 <= P <= min(rows, cols):
        raise ValueError(f"P must satisfy 1 <= P <= min(L, M-L) = {min(rows, cols)}")
    U, s, _ = np.linalg.svd(hankel.ybar, full_matrices=False)
    u_p = U[:, :P].copy()
    for j in range(P):
        pivot = u_p[np.argmax(np.abs(u_p[:, j])), j]
        u_p[:, j] *= np.conj(pivot) / abs(pivot)
    return SubspaceBasis(u_p=u_p, singular_values=s)


@lru_cache(maxsize=8)
def _steering_grid(L: int, N: int, d_over_lambda: float):
    """Cached angle grid on [-pi/2, pi/2) and its L x N steering matrix."""
    grid = -np.pi / 2 + np.pi * np.arange(N) / N
    A = np.exp(
        2j * np.pi * d_over_lambda * np.outer(np.arange(L), np.sin(grid))
    )
    grid.setflags(write=False)
    A.setflags(write=False)
    return grid, A


def pseudo_spectrum(basis, config: SystemConfig) -> PseudoSpectrum:
    """Evaluate 1 / (a_L^H (I - U U^H) a_L) on the uniform angle grid.

    The grid spans [-pi/2, pi/2): a ULA cannot distinguish theta from
    pi - theta, so scanning a full circle would duplicate every peak.
    ``basis`` may be a SubspaceBasis, an approximate subspace, or a raw
    (L, P) array with orthonormal columns.
    """
    U = np.asarray(getattr(basis, "u_p", basis))
    if U.ndim != 2 or U.shape[1] < 1:
        raise ValueError("subspace basis must have at least one column")
    L = U.shape[0]
    grid, A = _steering_grid(L, config.N, config.d_over_lambda)
    G = U.conj().T @ A
    denom = L - np.einsum("pn,pn->n", G, G.conj()).real
    floor = DENOMINATOR_FLOOR * L
    values = 1.0 / np.maximum(denom, floor)
    return PseudoSpectrum(grid=grid, values=values)


def _local_maxima(values: np.ndarray) -> np.ndarray:
    """Indices of strict local maxima; endpoints count, no circular wrap."""
    v = values
    idx = np.nonzero((v[1:-1] > v[:-2]) & (v[1:-1] > v[2:]))[0] + 1
    ends = []
    if v.shape[0] >= 2 and v[0] > v[1]:
        ends.append(0)
    if v.shape[0] >= 2 and v[-1] > v[-2]:
        ends.append(v.shape[0] - 1)
    if ends:
        idx = np.sort(np.concatenate([idx, np.array(ends, dtype=idx.dtype)]))
    return idx


def detect_peaks(
    spectrum: PseudoSpectrum, P: int, refine: bool = True
) -> AoAEstimate:
    """Pick the P largest local maxima of the pseudo-spectrum.

    Value ties break toward the smaller grid index. With ``refine`` each
    interior peak is nudged by a 3-point parabolic fit on log spectrum
    values, restoring sub-grid resolution without a finer grid.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    v = spectrum.values
    peaks = _local_maxima(v)
    if peaks.shape[0] < P:
        raise PeakDeficitError(
            f"found {peaks.shape[0]} spectrum peaks but {P} paths were requested; "
            f"{P - peaks.shape[0]} unresolved (AoA gap condition likely violated)"
        )
    order = np.lexsort((peaks, -v[peaks]))
    chosen = peaks[order[:P]]

    step = spectrum.grid[1] - spectrum.grid[0]
    thetas = spectrum.grid[chosen].astype(float).copy()
    if refine:
        logv = np.log(v)
        for i, idx in enumerate(chosen):
            if idx == 0 or idx == v.shape[0] - 1:
                continue  # endpoint peaks cannot be interpolated
            l0, l1, l2 = logv[idx - 1], logv[idx], logv[idx + 1]
            den = l0 - 2.0 * l1 + l2
            if den >= 0 or not np.isfinite(den):
                continue
            delta = 0.5 * (l0 - l2) / den
            thetas[i] += float(np.clip(delta, -0.5, 0.5)) * step
    return AoAEstimate(thetas=thetas, refined=refine)


def _newton_remax(
    r: np.ndarray, m: np.ndarray, w_start: float, w_lo: float, w_hi: float,
    max_iter: int = 10,
) -> float:
    """Maximize |sum_m r_m e^(-j m w)|^2 near w_start, clamped to [w_lo, w_hi]."""
    w = w_start
    for _ in range(max_iter):
        ph = np.exp(-1j * w * m)
        g = np.dot(r, ph)
        g1 = np.dot(r, -1j * m * ph)
        g2 = np.dot(r, -(m**2) * ph)
        f1 = 2.0 * (np.conj(g) * g1).real
        f2 = 2.0 * (abs(g1) ** 2 + (np.conj(g) * g2).real)
        if f2 >= 0 or not np.isfinite(f1) or not np.isfinite(f2):
            break  # outside the concave basin; keep the current point
        w_next = float(np.clip(w - f1 / f2, w_lo, w_hi))
        if abs(w_next - w) < 1e-13:
            return w_next
        w = w_next
    return w


def polish_aoas(
    y: np.ndarray,
    aoas,
    d_over_lambda: float = 0.5,
    grid_step: float = np.pi / 4096,
    cycles: int = 3,
) -> AoAEstimate:
    """Polish grid-seeded angles by coordinate ascent on the ML objective.

    Each cycle solves the path gains jointly by least squares, then
    re-maximizes every path's matched-filter power on the residual with the
    other paths' contributions subtracted. The cancellation removes the
    neighbor-sidelobe bias a plain matched-filter (or grid) peak carries,
    leaving a noise-limited angle error; the objective uses the raw
    snapshot, so exact and sketched subspaces polish identically. Per-path
    movement is clamped well below the seed separation so peaks never merge.
    """
    thetas = np.asarray(getattr(aoas, "thetas", aoas), dtype=float).ravel().copy()
    y = np.asarray(y).ravel()
    M = y.shape[0]
    m = np.arange(M)
    scale = 2.0 * np.pi * d_over_lambda
    P = thetas.shape[0]
    w = scale * np.sin(thetas)
    w_ref = w.copy()
    for _ in range(cycles):
        A = np.exp(1j * np.outer(m, w))
        gains, *_ = np.linalg.lstsq(A, y, rcond=None)
        for p in range(P):
            others = [q for q in range(P) if q != p]
            resid = y - A[:, others] @ gains[others] if others else y
            if P > 1:
                nn = np.min(np.abs(np.delete(w, p) - w_ref[p]))
            else:
                nn = np.inf
            limit = min(10.0 * scale * grid_step, 0.4 * nn)
            w[p] = _newton_remax(
                resid, m, w[p], w_ref[p] - limit, w_ref[p] + limit
            )
            A[:, p] = np.exp(1j * m * w[p])
    u = w / scale
    inside = np.abs(u) < 1.0
    thetas[inside] = np.arcsin(u[inside])
    return AoAEstimate(thetas=thetas, refined=True)


def beamform_gains(
    y: np.ndarray, aoas, d_over_lambda: float = 0.5
) -> np.ndarray:
    """Per-path matched-beamformer gains alpha_p = a_M^H(theta_p) y / M.

    This is the ML gain solution when the estimated angles are accurate and
    the steering vectors are nearly orthogonal (large M).
    """
    thetas = np.asarray(getattr(aoas, "thetas", aoas), dtype=float).ravel()
    if thetas.size == 0:
        raise ValueError("at least one AoA is required")
    y = np.asarray(y).ravel()
    A = steering_matrix(thetas, y.shape[0], d_over_lambda)
    return A.conj().T @ y / y.shape[0]


def joint_ls_gains(
    y: np.ndarray, aoas, d_over_lambda: float = 0.5
) -> np.ndarray:
    """Least-squares gains solving min ||A(theta) alpha - y||.

    Diagnostic alternative to beamform_gains for studying finite-M
    cross-term leakage; not used by the standard pipeline.
    """
    thetas = np.asarray(getattr(aoas, "thetas", aoas), dtype=float).ravel()
    if thetas.size == 0:
        raise ValueError("at least one AoA is required")
    y = np.asarray(y).ravel()
    A = steering_matrix(thetas, y.shape[0], d_over_lambda)
    gains, *_ = np.linalg.lstsq(A, y, rcond=None)
    return gains


def reconstruct(
    aoas, gains: np.ndarray, M: int, d_over_lambda: float = 0.5
) -> np.ndarray:
    """Angular-domain channel estimate h = sum_p gains[p] a_M(thetas[p])."""
    thetas = np.asarray(getattr(aoas, "thetas", aoas), dtype=float).ravel()
    gains = np.asarray(gains).ravel()
    if thetas.shape[0] != gains.shape[0]:
        raise ValueError(
            f"{thetas.shape[0]} AoAs but {gains.shape[0]} gains"
        )
    return steering_matrix(thetas, M, d_over_lambda) @ gains


def minimal_gap_threshold(L: int) -> float:
    """Minimum AoA separation f(L) resolvable with stack length L.

    f(L) = (1/L) sqrt(2/pi) (2/pi - 4/L)^(-1/2); requires L > 2 pi so the
    inner term is positive.
    """
    if L <= 2 * math.pi:
        raise ValueError(f"gap threshold needs L > 2*pi, got L={L}")
    inner = 2.0 / math.pi - 4.0 / L
    return math.sqrt(2.0 / math.pi) / (L * math.sqrt(inner))


def estimate_path_count(
    singular_values: np.ndarray, tau: float = 0.05
) -> int:
    """Model-order heuristic: count singular values above tau * sigma_1.

    Offered for exploration only; the estimators take P as a known input.
    """
    s = np.asarray(singular_values, dtype=float).ravel()
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.count_nonzero(s > tau * s[0]))


def solve_gains(
    y: np.ndarray, aoas, d_over_lambda: float = 0.5, gain_method: str = "joint"
) -> np.ndarray:
    """Gain stage shared by the estimators.

    ``joint`` solves all P gains at once by least squares, the exact ML
    solution for known angles; ``per_path`` is the matched-beamformer
    shortcut, which approximates it for large M but leaks energy between
    closely spaced paths at finite M.
    """
    if gain_method == "joint":
        return joint_ls_gains(y, aoas, d_over_lambda)
    if gain_method == "per_path":
        return beamform_gains(y, aoas, d_over_lambda)
    raise ValueError(f"unknown gain_method {gain_method!r}")


def estimate_single_user(
    y: np.ndarray,
    config: SystemConfig,
    refine: bool = True,
    polish: bool = True,
    gain_method: str = "joint",
) -> ChannelEstimate:
    """Full single-user pipeline on a despread receive vector."""
    y = np.asarray(y).ravel()
    if y.shape[0] != config.M:
        raise ValueError(f"y has {y.shape[0]} entries, config says M={config.M}")
    hankel = build_hankel(y, config.L)
    basis = signal_subspace(hankel, config.P)
    spectrum = pseudo_spectrum(basis, config)
    aoas = detect_peaks(spectrum, config.P, refine=refine)
    if polish:
        aoas = polish_aoas(
            y, aoas, config.d_over_lambda, grid_step=np.pi / config.N
        )
    gains = solve_gains(y, aoas, config.d_over_lambda, gain_method)
    h_hat = reconstruct(aoas, gains, config.M, config.d_over_lambda)
    return ChannelEstimate(
        H_hat=h_hat[:, None], estimator_tag="rank1", aoas=(aoas,), gains=(gains,)
    )


def estimate_multi_user(
    Y: np.ndarray,
    pilots,
    config: SystemConfig,
    refine: bool = True,
) -> ChannelEstimate:
    """Despread each user with its pilot column and estimate independently.

    Requires orthonormal pilots (despreading then removes multi-user
    interference exactly). Per-user failures are collected in
    ``failed_users``; the corresponding columns are zero and the remaining
    users are unaffected.
    """
    from .model import PilotMatrix, despread

    X = pilots.X if isinstance(pilots, PilotMatrix) else np.asarray(pilots)
    gram = X.conj().T @ X
    if not np.allclose(gram, np.eye(config.K), atol=1e-8):
        raise ValueError("multi-user estimation requires orthonormal pilot columns")

    H_hat = np.zeros((config.M, config.K), dtype=complex)
    aoas: list = []
    gains: list = []
    failed: dict[int, str] = {}
    for k in range(config.K):
        y_k = despread(Y, X[:, k])
        try:
            est = estimate_single_user(y_k, config, refine=refine)
        except EstimationError as exc:
            failed[k] = str(exc)
            aoas.append(None)
            gains.append(None)
            continue
        H_hat[:, k] = est.h_hat
        aoas.append(est.aoas[0])
        gains.append(est.gains[0])
    return ChannelEstimate(
        H_hat=H_hat,
        estimator_tag="rank1",
        aoas=tuple(aoas),
        gains=tuple(gains),
        failed_users=failed,
    )
