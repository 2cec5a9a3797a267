"""Uplink signal model: ULA steering, multipath channels, pilots, AWGN.

Scenario symbols live in :class:`SystemConfig`. All random draws take an
explicit ``numpy.random.Generator`` so trials are reproducible and safe to
run concurrently.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ChannelGenerationError

# Bounded retry budget for the AoA gap condition (see draw_channel).
MAX_GAP_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SystemConfig:
    """Scenario parameters for one simulated uplink.

    Args:
        M: BS antenna count.
        K: number of single-antenna users.
        B: pilot length in symbols (defaults to 2K).
        L: Hankel stack length (defaults to M // 2).
        P: propagation paths per user.
        N: angle-grid size for the pseudo-spectrum.
        d_over_lambda: antenna spacing over carrier wavelength.
        sigma_x2: pilot symbol power. Defaults to 1/B so every orthonormal
            pilot column carries unit energy; with that convention the
            post-despreading noise variance equals sigma_n2.
        sigma_n2: per-entry receiver noise power.
        seed: root seed for harness-level stream splitting.
    """

    M: int
    K: int = 1
    B: int | None = None
    L: int | None = None
    P: int = 1
    N: int = 4096
    d_over_lambda: float = 0.5
    sigma_x2: float | None = None
    sigma_n2: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.B is None:
            object.__setattr__(self, "B", 2 * self.K)
        if self.B < self.K:
            raise ValueError(f"B must be >= K, got B={self.B}, K={self.K}")
        if self.L is None:
            object.__setattr__(self, "L", self.M // 2)
        if self.P < 1:
            raise ValueError(f"P must be >= 1, got {self.P}")
        if self.L < self.P or self.M - self.L < self.P:
            raise ValueError(
                f"stack length must satisfy P <= L <= M - P, got "
                f"L={self.L}, M={self.M}, P={self.P}"
            )
        if self.N < self.M:
            raise ValueError(f"N must be >= M, got N={self.N}, M={self.M}")
        if self.d_over_lambda <= 0:
            raise ValueError("d_over_lambda must be positive")
        if self.sigma_x2 is None:
            object.__setattr__(self, "sigma_x2", 1.0 / self.B)
        if self.sigma_x2 <= 0:
            raise ValueError("sigma_x2 must be positive")
        if self.sigma_n2 < 0:
            raise ValueError("sigma_n2 must be nonnegative")

    @property
    def snr_db(self) -> float:
        """SNR defined as sigma_x2 / sigma_n2, in dB."""
        if self.sigma_n2 == 0:
            return math.inf
        return 10.0 * math.log10(self.sigma_x2 / self.sigma_n2)

    def at_snr_db(self, snr_db: float) -> "SystemConfig":
        """Return a copy with sigma_n2 set so that sigma_x2/sigma_n2 hits snr_db."""
        return dataclasses.replace(
            self, sigma_n2=self.sigma_x2 * 10.0 ** (-snr_db / 10.0)
        )


@dataclass(frozen=True)
class ChannelRealization:
    """One drawn multipath channel for K users.

    ``aoas`` and ``gains`` are (K, P) arrays; column k of ``H`` is
    sum_p gains[k, p] * a_M(aoas[k, p]).
    """

    aoas: np.ndarray
    gains: np.ndarray
    H: np.ndarray
    min_aoa_gap: float
    correlation_mode: str
    cluster_rank: int | None = None


@dataclass(frozen=True)
class PilotMatrix:
    """B x K pilot matrix plus the convention it was drawn under."""

    X: np.ndarray
    kind: str


def complex_gaussian(
    rng: np.random.Generator, shape: tuple[int, ...], variance: float = 1.0
) -> np.ndarray:
    """i.i.d. circularly symmetric complex Gaussian samples, per-entry variance."""
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def steering_vector(
    theta: float, length: int, d_over_lambda: float = 0.5
) -> np.ndarray:
    """ULA phase response to a plane wave from angle ``theta`` (radians).

    Entry m is exp(j * 2 pi * m * d_over_lambda * sin(theta)); entry 0 is 1.
    """
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    m = np.arange(length)
    return np.exp(2j * np.pi * d_over_lambda * math.sin(theta) * m)


def steering_matrix(
    thetas: np.ndarray, length: int, d_over_lambda: float = 0.5
) -> np.ndarray:
    """Column-wise collection of steering vectors, shape (length, len(thetas))."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    m = np.arange(length)[:, None]
    return np.exp(2j * np.pi * d_over_lambda * np.sin(thetas)[None, :] * m)


def min_pairwise_gap(thetas: np.ndarray) -> float:
    """Smallest |theta_p - theta_p'| over distinct pairs; inf for < 2 angles."""
    thetas = np.asarray(thetas, dtype=float).ravel()
    if thetas.size < 2:
        return math.inf
    return float(np.min(np.diff(np.sort(thetas))))


def _draw_path_aoas(
    rng: np.random.Generator, n_paths: int, gap_u: float, edge_margin_u: float
) -> np.ndarray:
    """Uniform AoAs on [-pi/2, pi/2) resampled until resolvable.

    Two rejection predicates, both in the sin-theta (spatial frequency)
    domain where the array actually resolves: the pairwise gap
    |sin a - sin b| >= gap_u, and an endfire margin
    1 - |sin theta| >= edge_margin_u. The array response is periodic in
    sin theta, so a path too close to |sin theta| = 1 aliases across the
    +-pi/2 boundary of the spectrum scan and plants a spurious second null
    at the opposite grid edge. |sin a - sin b| <= |a - b|, so the sin-domain
    gap implies the same bound on the angular gap.
    """
    batch = 64
    attempts = 0
    while attempts < MAX_GAP_ATTEMPTS:
        cand = rng.uniform(-np.pi / 2, np.pi / 2, size=(batch, n_paths))
        sines = np.sin(cand)
        ok = 1.0 - np.abs(sines).max(axis=1) >= edge_margin_u
        if n_paths > 1:
            gaps = np.min(np.diff(np.sort(sines, axis=1), axis=1), axis=1)
            ok &= gaps >= gap_u
        hits = np.nonzero(ok)[0]
        if hits.size:
            return cand[hits[0]]
        attempts += batch
    raise ChannelGenerationError(
        f"no AoA draw met the minimum sin-domain gap {gap_u:.4g} and endfire "
        f"margin {edge_margin_u:.4g} after {MAX_GAP_ATTEMPTS} attempts "
        f"(P={n_paths}); the (P, L) combination is infeasible"
    )


def draw_channel(
    config: SystemConfig,
    rng: np.random.Generator,
    mode: str = "full_rank",
    rank: int | None = None,
) -> ChannelRealization:
    """Draw a multipath channel whose AoAs satisfy the resolvability gap.

    AoAs are uniform on [-pi/2, pi/2), rejection-resampled until each user's
    paths are resolvable: the minimum pairwise separation reaches
    max{f(L), f(M - L)} measured as a spatial-frequency gap
    d_over_lambda * |sin a - sin b| (which implies the same bound on
    |a - b|), plus an endfire margin of one scan-null width. Gains are
    i.i.d. CN(0, 1), so the envelope is Rayleigh with unit second moment.

    ``mode="low_rank"`` draws ``rank`` parameter sets and assigns users to
    clusters round-robin, so clustered users share spatial parameters and
    rank(H) equals ``rank``.
    """
    from .rank1 import minimal_gap_threshold  # local import to avoid a cycle

    if mode not in ("full_rank", "low_rank"):
        raise ValueError(f"unknown correlation mode {mode!r}")
    if mode == "low_rank":
        if rank is None or not (1 <= rank <= config.K):
            raise ValueError(f"low_rank mode needs 1 <= rank <= K, got {rank}")
    if config.P > 1:
        gap_u = max(
            minimal_gap_threshold(config.L),
            minimal_gap_threshold(config.M - config.L),
        ) / config.d_over_lambda
    else:
        gap_u = 0.0  # single path: no pairwise condition
    # One scan-null width of the shorter Hankel aperture.
    edge_margin_u = 2.0 / min(config.L, config.M - config.L)

    n_sets = rank if mode == "low_rank" else config.K
    set_aoas = np.empty((n_sets, config.P))
    set_gains = complex_gaussian(rng, (n_sets, config.P))
    for s in range(n_sets):
        set_aoas[s] = _draw_path_aoas(rng, config.P, gap_u, edge_margin_u)

    assign = np.arange(config.K) % n_sets
    aoas = set_aoas[assign]
    gains = set_gains[assign]

    H = np.empty((config.M, config.K), dtype=complex)
    for k in range(config.K):
        A = steering_matrix(aoas[k], config.M, config.d_over_lambda)
        H[:, k] = A @ gains[k]

    min_gap = min(min_pairwise_gap(set_aoas[s]) for s in range(n_sets))
    return ChannelRealization(
        aoas=aoas,
        gains=gains,
        H=H,
        min_aoa_gap=float(min_gap),
        correlation_mode=mode,
        cluster_rank=rank if mode == "low_rank" else None,
    )


def draw_pilots(
    config: SystemConfig, rng: np.random.Generator, kind: str = "orthonormal"
) -> PilotMatrix:
    """Draw a B x K pilot matrix.

    ``orthonormal`` takes K columns of the unitary B x B DFT matrix (unit
    energy per column, X^H X = I). ``random_gaussian`` draws i.i.d. entries
    with per-entry power sigma_x2, the single-user random-pilot convention.
    """
    if kind == "orthonormal":
        if config.B < config.K:
            raise ValueError(
                f"orthonormal pilots need B >= K, got B={config.B}, K={config.K}"
            )
        b = np.arange(config.B)
        dft = np.exp(-2j * np.pi * np.outer(b, b) / config.B) / math.sqrt(config.B)
        return PilotMatrix(X=dft[:, : config.K], kind=kind)
    if kind == "random_gaussian":
        X = complex_gaussian(rng, (config.B, config.K), variance=config.sigma_x2)
        return PilotMatrix(X=X, kind=kind)
    raise ValueError(f"unknown pilot kind {kind!r}")


def transmit(
    channel: ChannelRealization | np.ndarray,
    pilots: PilotMatrix | np.ndarray,
    sigma_n2: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Received M x B block Y = H X^H + N with per-entry noise power sigma_n2."""
    H = channel.H if isinstance(channel, ChannelRealization) else np.asarray(channel)
    X = pilots.X if isinstance(pilots, PilotMatrix) else np.asarray(pilots)
    if H.shape[1] != X.shape[1]:
        raise ValueError(
            f"channel has {H.shape[1]} users but pilot matrix has {X.shape[1]} columns"
        )
    Y = H @ X.conj().T
    if sigma_n2 > 0:
        Y = Y + complex_gaussian(rng, Y.shape, variance=sigma_n2)
    return Y


def despread(Y: np.ndarray, x_k: np.ndarray) -> np.ndarray:
    """Per-user received vector y_k = Y x_k.

    For orthonormal pilots this removes multi-user interference exactly and
    leaves per-entry residual noise variance sigma_n2.
    """
    Y = np.asarray(Y)
    x_k = np.asarray(x_k).ravel()
    if Y.ndim != 2 or Y.shape[1] != x_k.shape[0]:
        raise ValueError(
            f"shape mismatch: Y is {Y.shape}, pilot column has {x_k.shape[0]} entries"
        )
    return Y @ x_k
