"""Rank-1 subspace channel estimator and benchmark harness for massive MIMO.

The estimator recovers per-path arrival angles from a single despread
spatial snapshot via a Hankel space embedding and a subspace
pseudo-spectrum, then reads the path gains out with matched beamformers.
A Nystrom-sketched variant brings the subspace cost down to linear in the
antenna count. ``harness`` drives paired Monte Carlo comparisons against
LS, genie-aided MMSE, and FFT-angular baselines.
"""

__version__ = "0.1.0"

from .errors import ChannelGenerationError, EstimationError
from .model import (
    ChannelRealization,
    PilotMatrix,
    SystemConfig,
    despread,
    draw_channel,
    draw_pilots,
    steering_matrix,
    steering_vector,
    transmit,
)
from .rank1 import (
    AoAEstimate,
    ChannelEstimate,
    HankelEmbedding,
    PeakDeficitError,
    PseudoSpectrum,
    SubspaceBasis,
    beamform_gains,
    build_hankel,
    detect_peaks,
    estimate_multi_user,
    estimate_single_user,
    minimal_gap_threshold,
    pseudo_spectrum,
    reconstruct,
    signal_subspace,
)
from .fastpath import (
    ApproxSubspace,
    ColumnSketch,
    NystromWeight,
    RankDeficitError,
    approx_subspace,
    coherence,
    estimate_fast,
    nystrom_weight,
    required_sampling_length,
    sample_columns,
    spectrum_bound_holds,
)
from .baselines import (
    BeamPatternModel,
    CovarianceModel,
    crlb_mmse,
    crlb_rank1,
    fft_angular_estimate,
    genie_covariance,
    ls_estimate,
    mmse_estimate,
    predicted_gain_bias,
    predicted_snr_gain,
)
from .harness import (
    SweepResult,
    SweepSpec,
    TrialRecord,
    aoa_rmse,
    bench_runtime,
    emit_csv,
    nmse,
    run_sweep,
    snr_gain_at_target,
    split_rng,
)

__all__ = [name for name in dir() if not name.startswith("_")]
