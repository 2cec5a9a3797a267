"""Reference estimators and closed-form accuracy predictions.

Implements the comparison set (least squares, genie-aided linear MMSE,
FFT-angular) together with the gain-estimation error floors and the
predicted SNR advantage of the subspace estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import EstimationError
from .model import ChannelRealization, PilotMatrix, SystemConfig, draw_channel
from .rank1 import AoAEstimate, ChannelEstimate, beamform_gains, reconstruct

# Condition-number guard for pilot Gram matrices.
_MAX_PILOT_COND = 1e12


def _pilot_array(pilots) -> np.ndarray:
    return pilots.X if isinstance(pilots, PilotMatrix) else np.asarray(pilots)


def ls_estimate(Y: np.ndarray, pilots) -> ChannelEstimate:
    """Least-squares channel estimate for Y = H X^H + N.

    Solves min_H ||Y - H X^H||_F, i.e. H = Y X (X^H X)^{-1}; for orthonormal
    pilots this reduces to H = Y X.
    """
    X = _pilot_array(pilots)
    Y = np.asarray(Y)
    gram = X.conj().T @ X
    if np.linalg.cond(gram) > _MAX_PILOT_COND:
        raise ValueError("pilot matrix is rank-deficient; LS estimate undefined")
    H_hat = np.linalg.solve(gram.T, (Y @ X).T).T
    return ChannelEstimate(H_hat=H_hat, estimator_tag="ls")


@dataclass(frozen=True)
class CovarianceModel:
    """Empirical channel covariance handed to the genie MMSE estimator.

    Independent users give a block-diagonal covariance stored as one M x M
    block per user (``user_blocks``); correlated (clustered) users need the
    dense MK x MK matrix. The noise covariance is sigma_n2 * I.
    """

    user_blocks: tuple | None
    dense_matrix: np.ndarray | None
    noise_variance: float
    sample_count: int
    M: int
    K: int

    @property
    def is_block_diagonal(self) -> bool:
        return self.user_blocks is not None

    def dense(self) -> np.ndarray:
        """Full MK x MK channel covariance (vec ordering, column-major)."""
        if self.dense_matrix is not None:
            return self.dense_matrix
        MK = self.M * self.K
        R = np.zeros((MK, MK), dtype=complex)
        for k, block in enumerate(self.user_blocks):
            sl = slice(k * self.M, (k + 1) * self.M)
            R[sl, sl] = block
        return R


def genie_covariance(
    config: SystemConfig,
    rng: np.random.Generator,
    mode: str = "full_rank",
    rank: int | None = None,
    n_samples: int | None = None,
    sampler=None,
) -> CovarianceModel:
    """Estimate the channel covariance from independent channel draws.

    This is the statistical prior a genie hands to the linear MMSE
    estimator; it is built once per scenario and reused across noise
    realizations. ``sampler(rng) -> (M, K) array`` overrides the default
    channel law (used by tests with pinned path parameters).

    Args:
        n_samples: number of channel draws; defaults to 20 * M * K and must
            be at least 10 * M per user block.
    """
    if n_samples is None:
        n_samples = 20 * config.M * config.K
    if n_samples < 10 * config.M:
        raise ValueError(
            f"covariance needs n_samples >= 10*M = {10 * config.M}, got {n_samples}"
        )
    if sampler is None:
        def sampler(r):  # noqa: ANN001
            return draw_channel(config, r, mode=mode, rank=rank).H

    M, K = config.M, config.K
    block_diagonal = mode == "full_rank"
    chunk = max(1, min(512, n_samples))
    if block_diagonal:
        acc = [np.zeros((M, M), dtype=complex) for _ in range(K)]
    else:
        acc_dense = np.zeros((M * K, M * K), dtype=complex)

    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        if block_diagonal:
            buf = np.empty((K, M, n), dtype=complex)
            for i in range(n):
                H = sampler(rng)
                buf[:, :, i] = H.T
            for k in range(K):
                acc[k] += buf[k] @ buf[k].conj().T
        else:
            buf = np.empty((M * K, n), dtype=complex)
            for i in range(n):
                buf[:, i] = sampler(rng).reshape(-1, order="F")
            acc_dense += buf @ buf.conj().T
        done += n

    if block_diagonal:
        blocks = tuple(0.5 * (R + R.conj().T) / n_samples for R in acc)
        return CovarianceModel(
            user_blocks=blocks,
            dense_matrix=None,
            noise_variance=config.sigma_n2,
            sample_count=n_samples,
            M=M,
            K=K,
        )
    dense = 0.5 * (acc_dense + acc_dense.conj().T) / n_samples
    return CovarianceModel(
        user_blocks=None,
        dense_matrix=dense,
        noise_variance=config.sigma_n2,
        sample_count=n_samples,
        M=M,
        K=K,
    )


@dataclass(frozen=True)
class MmseFilter:
    """Per-user Wiener filters W_k = R_k (R_k + sigma_n2 I)^{-1}, precomputed.

    Valid only for a block-diagonal prior with orthonormal pilots, where the
    joint MMSE estimate decouples into per-user filtering of the despread
    vectors. Sweeps prepare this once per noise level.
    """

    per_user: tuple
    sigma_n2: float


def prepare_mmse_filter(cov: CovarianceModel, sigma_n2: float) -> MmseFilter:
    if not cov.is_block_diagonal:
        raise ValueError("per-user MMSE filtering needs a block-diagonal prior")
    filters = []
    for R in cov.user_blocks:
        A = R + sigma_n2 * np.eye(R.shape[0])
        filters.append(np.linalg.solve(A, R).conj().T)
    return MmseFilter(per_user=tuple(filters), sigma_n2=sigma_n2)


def _solve_regularized(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve the Hermitian PSD system, adding a tiny ridge when singular."""
    try:
        return scipy.linalg.solve(S, rhs, assume_a="pos")
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-12 * np.trace(S).real / S.shape[0]
    return scipy.linalg.solve(
        S + ridge * np.eye(S.shape[0]), rhs, assume_a="pos"
    )


def mmse_estimate(
    Y: np.ndarray,
    pilots,
    cov: CovarianceModel,
    sigma_n2: float | None = None,
    method: str = "auto",
    filt: MmseFilter | None = None,
) -> ChannelEstimate:
    """Genie-aided linear MMSE estimate of the channel matrix.

    The reference form is vec(H) = R X~^H (X~ R X~^H + sigma_n2 I)^{-1}
    vec(Y) with X~ = conj(X) kron I_M (the Kronecker factor that makes
    vec(H X^H) = X~ vec(H) for complex pilots). ``method="direct"``
    evaluates it literally at O((MB)^3); ``method="auto"`` switches to the
    algebraically identical per-user filtering whenever the prior is
    block-diagonal and the pilots are orthonormal.
    """
    X = _pilot_array(pilots)
    Y = np.asarray(Y)
    M, B = Y.shape
    K = X.shape[1]
    if sigma_n2 is None:
        sigma_n2 = filt.sigma_n2 if filt is not None else cov.noise_variance
    if method not in ("auto", "direct", "decoupled"):
        raise ValueError(f"unknown method {method!r}")

    orthonormal = np.allclose(X.conj().T @ X, np.eye(K), atol=1e-8)
    decouple = method == "decoupled" or (
        method == "auto" and orthonormal and (filt is not None or cov.is_block_diagonal)
    )
    if decouple:
        if not orthonormal:
            raise ValueError("decoupled MMSE requires orthonormal pilots")
        if filt is None:
            filt = prepare_mmse_filter(cov, sigma_n2)
        H_hat = np.empty((M, K), dtype=complex)
        Yx = Y @ X  # all despread vectors at once
        for k in range(K):
            H_hat[:, k] = filt.per_user[k] @ Yx[:, k]
        return ChannelEstimate(H_hat=H_hat, estimator_tag="mmse")

    R = cov.dense()
    X_tilde = np.kron(X.conj(), np.eye(M))
    S = X_tilde @ R @ X_tilde.conj().T + sigma_n2 * np.eye(M * B)
    sol = _solve_regularized(S, Y.reshape(-1, order="F"))
    h_vec = R @ (X_tilde.conj().T @ sol)
    return ChannelEstimate(
        H_hat=h_vec.reshape((M, K), order="F"), estimator_tag="mmse"
    )


def fft_angular_estimate(y: np.ndarray, config: SystemConfig) -> ChannelEstimate:
    """Angular-domain estimate from the M-point DFT of the receive vector.

    The P largest-magnitude bins are mapped to angles via
    sin(theta) = b / (M d_over_lambda) with the signed alias (b or b - M)
    of smaller |sin|; bins falling outside |sin| <= 1 are discarded and the
    next bin is taken. Resolution is limited to one DFT bin, which is what
    produces this estimator's high-SNR error floor.
    """
    y = np.asarray(y).ravel()
    M = y.shape[0]
    if M != config.M:
        raise ValueError(f"y has {M} entries, config says M={config.M}")
    if M < 2 * config.P:
        raise ValueError(f"FFT estimator needs M >= 2P, got M={M}, P={config.P}")
    bins = np.fft.fft(y)
    order = np.lexsort((np.arange(M), -np.abs(bins)))
    sines = []
    for b in order:
        cands = [b, b - M]
        valid = [
            c / (M * config.d_over_lambda)
            for c in cands
            if abs(c / (M * config.d_over_lambda)) <= 1.0
        ]
        if not valid:
            continue
        sines.append(min(valid, key=lambda u: (abs(u), -u)))
        if len(sines) == config.P:
            break
    if len(sines) < config.P:
        raise EstimationError(
            f"only {len(sines)} DFT bins map inside |sin(theta)| <= 1, "
            f"need {config.P}"
        )
    thetas = np.arcsin(np.asarray(sines))
    aoas = AoAEstimate(thetas=thetas, refined=False)
    gains = beamform_gains(y, aoas, config.d_over_lambda)
    h_hat = reconstruct(aoas, gains, M, config.d_over_lambda)
    return ChannelEstimate(
        H_hat=h_hat[:, None], estimator_tag="fft", aoas=(aoas,), gains=(gains,)
    )


def crlb_rank1(config: SystemConfig) -> float:
    """Gain-estimation variance floor sigma_n2 / (M B sigma_x2)."""
    return config.sigma_n2 / (config.M * config.B * config.sigma_x2)


def crlb_mmse(config: SystemConfig, rho_h2: float | None = None) -> float:
    """Per-entry error floor of the linear MMSE estimator.

    sigma_n2 / (B sigma_x2 + rho_h2 sigma_n2) with the channel-prior
    curvature rho_h2 defaulting to P + 1.
    """
    if rho_h2 is None:
        rho_h2 = config.P + 1
    return config.sigma_n2 / (config.B * config.sigma_x2 + rho_h2 * config.sigma_n2)


def predicted_snr_gain(
    M: int, B: int, noise_to_signal: float, rho_h2: float = 6.0
) -> float:
    """Predicted SNR advantage over linear MMSE at a fixed target NMSE.

    10 log10[ M / (1 + rho_h2 / B * noise_to_signal) ] dB, which approaches
    10 log10(M) as the noise-to-signal ratio vanishes. ``rho_h2`` is the
    prior curvature P + 1 (default corresponds to P = 5).
    """
    if M < 1 or B < 1 or noise_to_signal < 0:
        raise ValueError("M, B must be positive and noise_to_signal nonnegative")
    return 10.0 * math.log10(M / (1.0 + rho_h2 / B * noise_to_signal))


@dataclass(frozen=True)
class BeamPatternModel:
    """Gaussian main-lobe model of the matched beamformer.

    The half-power beamwidth of an M-element ULA is 2/M; the lobe is
    modeled as M exp(-beta (theta - theta_p)^2) with beta = ln 2 / bw^2.
    """

    half_power_beamwidth: float
    beta: float

    @classmethod
    def for_array(cls, M: int) -> "BeamPatternModel":
        bw = 2.0 / M
        return cls(half_power_beamwidth=bw, beta=math.log(2.0) / bw**2)

    def gain(self, offset: float, M: int) -> float:
        """Main-lobe amplitude at an angular offset from the beam center."""
        return M * math.exp(-self.beta * offset**2)


def predicted_gain_bias(aoa_error: float, M: int) -> float:
    """Multiplicative bias exp(-2 ln 2 M^2 delta^2) on the expected gain.

    Follows from the Gaussian main-lobe model: a beamformer pointed
    ``aoa_error`` radians off the true path attenuates the recovered gain.
    Unbiasedness requires the AoA error to shrink faster than 1/M.
    """
    if aoa_error < 0:
        raise ValueError("aoa_error must be nonnegative")
    return math.exp(-2.0 * math.log(2.0) * (M * aoa_error) ** 2)
