"""Monte Carlo experiment engine: paired sweeps, metrics, runtime benches, CSV.

Determinism contract: every random stream is derived from the sweep seed
and structural indices (M index, SNR index, trial, estimator slot) via
``SeedSequence`` spawn keys, so results are bitwise identical regardless of
worker count or scheduling. Within a trial all estimators consume the same
channel, pilots, and noise.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import (
    CovarianceModel,
    MmseFilter,
    fft_angular_estimate,
    genie_covariance,
    ls_estimate,
    mmse_estimate,
    prepare_mmse_filter,
)
from .errors import EstimationError
from .fastpath import estimate_fast
from .model import SystemConfig, despread, draw_channel, draw_pilots, transmit
from .rank1 import ChannelEstimate, estimate_multi_user

KNOWN_ESTIMATORS = ("rank1", "rank1_fast", "ls", "mmse", "fft")

# Stable stream slots: adding or removing estimators from a sweep never
# changes the data (slot 0) or any other estimator's stream.
_SLOT = {"rank1": 1, "rank1_fast": 2, "ls": 3, "mmse": 4, "fft": 5}
_COV_KEY = 6


def split_rng(seed: int, *key: int) -> np.random.Generator:
    """Child generator for a structural position under the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def nmse(H_hat: np.ndarray, H: np.ndarray) -> float:
    """Normalized squared error ||H_hat - H||_F^2 / ||H||_F^2."""
    H_hat = np.asarray(H_hat)
    H = np.asarray(H)
    if H_hat.shape != H.shape:
        raise ValueError(f"shape mismatch: {H_hat.shape} vs {H.shape}")
    denom = np.linalg.norm(H) ** 2
    if denom == 0:
        raise ValueError("true channel has zero norm")
    return float(np.linalg.norm(H_hat - H) ** 2 / denom)


def aoa_rmse(est, truth) -> float:
    """RMS angle error after order-free matching (sort both, pair in order)."""
    est = np.sort(np.asarray(getattr(est, "thetas", est), dtype=float).ravel())
    truth = np.sort(np.asarray(truth, dtype=float).ravel())
    if est.shape[0] != truth.shape[0]:
        raise ValueError(
            f"estimate has {est.shape[0]} angles, truth has {truth.shape[0]}"
        )
    return float(np.sqrt(np.mean((est - truth) ** 2)))


def to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


@dataclass(frozen=True)
class SweepSpec:
    """One Monte Carlo experiment: the grid, the contenders, the budget.

    ``config`` supplies K, B, P, N, spacing, pilot power, and the root
    seed; each point overrides M (with L = M // 2) and the noise power
    implied by the SNR.
    """

    config: SystemConfig
    snr_db_list: tuple
    M_list: tuple
    trials: int
    estimators: tuple = ("rank1",)
    mode: str = "full_rank"
    cluster_rank: int | None = None
    metrics: tuple = ("nmse", "aoa_rmse", "runtime")
    fast_s: int | None = None
    cov_samples: int | None = None
    workers: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "snr_db_list", tuple(float(s) for s in self.snr_db_list))
        object.__setattr__(self, "M_list", tuple(int(m) for m in self.M_list))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.snr_db_list or not self.M_list:
            raise ValueError("snr_db_list and M_list must be nonempty")
        unknown = set(self.estimators) - set(KNOWN_ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")
        for M in self.M_list:
            self.point_config(M)  # raises if any point violates invariants

    def point_config(self, M: int, snr_db: float | None = None) -> SystemConfig:
        cfg = SystemConfig(
            M=M,
            K=self.config.K,
            B=self.config.B,
            L=M // 2,
            P=self.config.P,
            N=self.config.N,
            d_over_lambda=self.config.d_over_lambda,
            sigma_x2=self.config.sigma_x2,
            sigma_n2=self.config.sigma_n2,
            seed=self.config.seed,
        )
        return cfg if snr_db is None else cfg.at_snr_db(snr_db)


@dataclass(frozen=True)
class TrialRecord:
    estimator: str
    M: int
    K: int
    B: int
    L: int
    P: int
    snr_db: float
    trial: int
    nmse: float | None
    aoa_rmse: float | None
    runtime_ns: int
    seed: int
    failed: bool


@dataclass(frozen=True)
class AggregateRecord:
    estimator: str
    M: int
    K: int
    B: int
    L: int
    P: int
    snr_db: float
    trials: int
    failures: int
    nmse_mean_db: float
    nmse_median_db: float
    nmse_p10_db: float
    nmse_p90_db: float
    runtime_median_ns: int


@dataclass(frozen=True)
class SweepResult:
    spec: SweepSpec
    records: tuple
    aggregates: tuple = field(default=())

    def select(self, **match) -> list:
        return [
            r
            for r in self.records
            if all(getattr(r, k) == v for k, v in match.items())
        ]


def _pooled_aoa_rmse(est: ChannelEstimate, truth_aoas: np.ndarray) -> float | None:
    """RMS over all matched (user, path) angle errors; None when unavailable."""
    if not est.aoas:
        return None
    sq = []
    for k, user_aoas in enumerate(est.aoas):
        if user_aoas is None:
            continue
        e = np.sort(np.asarray(user_aoas.thetas, dtype=float))
        t = np.sort(np.asarray(truth_aoas[k], dtype=float))
        if e.shape[0] != t.shape[0]:
            continue
        sq.extend(((e - t) ** 2).tolist())
    if not sq:
        return None
    return float(np.sqrt(np.mean(sq)))


def _fft_multi(Y, X, config) -> ChannelEstimate:
    H_hat = np.zeros((config.M, config.K), dtype=complex)
    aoas, gains, failed = [], [], {}
    for k in range(config.K):
        try:
            est = fft_angular_estimate(despread(Y, X[:, k]), config)
        except EstimationError as exc:
            failed[k] = str(exc)
            aoas.append(None)
            gains.append(None)
            continue
        H_hat[:, k] = est.h_hat
        aoas.append(est.aoas[0])
        gains.append(est.gains[0])
    return ChannelEstimate(
        H_hat=H_hat, estimator_tag="fft", aoas=tuple(aoas), gains=tuple(gains),
        failed_users=failed,
    )


def _fast_multi(Y, X, config, rng, s) -> ChannelEstimate:
    H_hat = np.zeros((config.M, config.K), dtype=complex)
    aoas, gains, failed = [], [], {}
    for k in range(config.K):
        try:
            est = estimate_fast(despread(Y, X[:, k]), config, rng, s=s)
        except EstimationError as exc:
            failed[k] = str(exc)
            aoas.append(None)
            gains.append(None)
            continue
        H_hat[:, k] = est.h_hat
        aoas.append(est.aoas[0])
        gains.append(est.gains[0])
    return ChannelEstimate(
        H_hat=H_hat, estimator_tag="rank1_fast", aoas=tuple(aoas),
        gains=tuple(gains), failed_users=failed,
    )


def run_estimator(
    tag: str,
    Y: np.ndarray,
    pilots,
    config: SystemConfig,
    rng: np.random.Generator,
    cov: CovarianceModel | None = None,
    filt: MmseFilter | None = None,
    fast_s: int | None = None,
) -> ChannelEstimate:
    """Dispatch one estimator on a received block. Used per sweep trial."""
    X = getattr(pilots, "X", pilots)
    if tag == "rank1":
        return estimate_multi_user(Y, X, config)
    if tag == "rank1_fast":
        return _fast_multi(Y, X, config, rng, fast_s)
    if tag == "ls":
        return ls_estimate(Y, X)
    if tag == "mmse":
        if cov is None and filt is None:
            raise ValueError("mmse needs a covariance model or prepared filter")
        return mmse_estimate(
            Y, X, cov, sigma_n2=config.sigma_n2, method="auto", filt=filt
        )
    if tag == "fft":
        return _fft_multi(Y, X, config)
    raise ValueError(f"unknown estimator tag {tag!r}")


def _run_point_m(spec: SweepSpec, mi: int) -> list:
    """All records for one M value (every SNR point and trial)."""
    M = spec.M_list[mi]
    seed = spec.config.seed
    base_cfg = spec.point_config(M)
    want_aoa = "aoa_rmse" in spec.metrics

    cov = None
    if "mmse" in spec.estimators:
        cov = genie_covariance(
            base_cfg,
            split_rng(seed, mi, _COV_KEY),
            mode=spec.mode,
            rank=spec.cluster_rank,
            n_samples=spec.cov_samples,
        )

    records = []
    for si, snr in enumerate(spec.snr_db_list):
        cfg = spec.point_config(M, snr)
        filt = None
        if cov is not None and cov.is_block_diagonal:
            filt = prepare_mmse_filter(cov, cfg.sigma_n2)
        for t in range(spec.trials):
            data_rng = split_rng(seed, mi, si, t, 0)
            chan = draw_channel(cfg, data_rng, mode=spec.mode, rank=spec.cluster_rank)
            pilots = draw_pilots(cfg, data_rng)
            Y = transmit(chan, pilots, cfg.sigma_n2, data_rng)
            for tag in spec.estimators:
                erng = split_rng(seed, mi, si, t, _SLOT[tag])
                t0 = time.perf_counter_ns()
                try:
                    est = run_estimator(
                        tag, Y, pilots, cfg, erng, cov=cov, filt=filt,
                        fast_s=spec.fast_s,
                    )
                    failed = bool(est.failed_users)
                except EstimationError as exc:
                    est = None
                    failed = True
                    del exc
                dt = max(1, time.perf_counter_ns() - t0)
                if est is not None and not failed:
                    err = nmse(est.H_hat, chan.H)
                    rmse = _pooled_aoa_rmse(est, chan.aoas) if want_aoa else None
                else:
                    err = None
                    rmse = None
                records.append(
                    TrialRecord(
                        estimator=tag, M=M, K=cfg.K, B=cfg.B, L=cfg.L, P=cfg.P,
                        snr_db=snr, trial=t, nmse=err, aoa_rmse=rmse,
                        runtime_ns=dt, seed=seed, failed=failed,
                    )
                )
    return records


def compute_aggregates(records) -> tuple:
    """Per-(estimator, M, snr) summary; failed trials are excluded from the
    NMSE statistics and reported in the failure count."""
    groups: dict = {}
    for r in records:
        groups.setdefault(
            (r.estimator, r.M, r.K, r.B, r.L, r.P, r.snr_db), []
        ).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[6])):
        rows = groups[key]
        ok = [r.nmse for r in rows if not r.failed and r.nmse is not None]
        failures = sum(1 for r in rows if r.failed)
        if ok:
            arr = np.asarray(ok)
            mean_db = to_db(float(arr.mean()))
            med_db = to_db(float(np.median(arr)))
            p10_db = to_db(float(np.percentile(arr, 10)))
            p90_db = to_db(float(np.percentile(arr, 90)))
        else:
            mean_db = med_db = p10_db = p90_db = math.nan
        runtime_med = int(np.median([r.runtime_ns for r in rows]))
        est, M, K, B, L, P, snr = key
        out.append(
            AggregateRecord(
                estimator=est, M=M, K=K, B=B, L=L, P=P, snr_db=snr,
                trials=len(rows), failures=failures, nmse_mean_db=mean_db,
                nmse_median_db=med_db, nmse_p10_db=p10_db, nmse_p90_db=p90_db,
                runtime_median_ns=runtime_med,
            )
        )
    return tuple(out)


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Execute the full grid. Results are identical for any worker count."""
    indices = list(range(len(spec.M_list)))
    if spec.workers > 1 and len(indices) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            chunks = list(pool.map(_run_point_m, [spec] * len(indices), indices))
    else:
        chunks = [_run_point_m(spec, mi) for mi in indices]
    records = tuple(r for chunk in chunks for r in chunk)
    return SweepResult(
        spec=spec, records=records, aggregates=compute_aggregates(records)
    )


def snr_gain_at_target(
    result: SweepResult,
    gamma_target: float,
    est_a: str = "rank1",
    est_b: str = "mmse",
) -> dict:
    """SNR advantage of ``est_a`` over ``est_b`` at a target NMSE, per M.

    Interpolates each estimator's mean-NMSE-vs-SNR curve linearly in
    (dB, dB) space and returns snr_b - snr_a for every swept M.
    """
    target_db = to_db(gamma_target)

    def crossing(est: str, M: int) -> float:
        pts = sorted(
            (a.snr_db, a.nmse_mean_db)
            for a in result.aggregates
            if a.estimator == est and a.M == M
        )
        if not pts:
            raise ValueError(f"no aggregates for estimator {est!r} at M={M}")
        for (s0, d0), (s1, d1) in zip(pts, pts[1:]):
            if (d0 - target_db) * (d1 - target_db) <= 0 and d0 != d1:
                return s0 + (target_db - d0) * (s1 - s0) / (d1 - d0)
        raise ValueError(
            f"target NMSE {gamma_target:g} outside swept range for {est!r} at M={M}"
        )

    return {
        M: crossing(est_b, M) - crossing(est_a, M)
        for M in sorted(set(a.M for a in result.aggregates))
    }


@dataclass(frozen=True)
class RuntimeStats:
    estimator: str
    M: int
    repetitions: int
    runtimes_ns: tuple
    median_ns: float


def bench_runtime(
    estimator_tag: str,
    config: SystemConfig,
    repetitions: int = 7,
    fast_s: int | None = None,
    cov: CovarianceModel | None = None,
) -> RuntimeStats:
    """Median wall-clock per estimate, single-threaded, after 2 warmup runs.

    The MMSE baseline is timed through the literal dense formula (the
    complexity the estimator is criticized for), never through the
    precomputed per-user filter shortcut. Covariance construction happens
    outside the timed region.
    """
    from threadpoolctl import threadpool_limits

    if repetitions < 5:
        raise ValueError("repetitions must be >= 5")
    data_rng = split_rng(config.seed, 7001)
    chan = draw_channel(config, data_rng)
    pilots = draw_pilots(config, data_rng)
    Y = transmit(chan, pilots, config.sigma_n2, data_rng)
    if estimator_tag == "mmse" and cov is None:
        cov = genie_covariance(
            config, split_rng(config.seed, 7002), n_samples=10 * config.M
        )

    def once(rng):
        if estimator_tag == "mmse":
            return mmse_estimate(
                Y, pilots, cov, sigma_n2=config.sigma_n2, method="direct"
            )
        return run_estimator(
            estimator_tag, Y, pilots, config, rng, cov=cov, fast_s=fast_s
        )

    times = []
    with threadpool_limits(limits=1):
        for i in range(2 + repetitions):
            rng = split_rng(config.seed, 7003, i)
            t0 = time.perf_counter_ns()
            once(rng)
            dt = time.perf_counter_ns() - t0
            if i >= 2:
                times.append(dt)
    return RuntimeStats(
        estimator=estimator_tag,
        M=config.M,
        repetitions=repetitions,
        runtimes_ns=tuple(times),
        median_ns=float(np.median(times)),
    )


def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs = np.log(np.asarray(xs, dtype=float))
    ys = np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(xs, ys, 1)[0])


_RECORD_FIELDS = (
    "estimator", "M", "K", "B", "L", "P", "snr_db", "trial",
    "nmse", "aoa_rmse", "runtime_ns", "seed", "failed",
)
_AGG_FIELDS = (
    "estimator", "M", "K", "B", "L", "P", "snr_db", "trials", "failures",
    "nmse_mean_db", "nmse_median_db", "nmse_p10_db", "nmse_p90_db",
    "runtime_median_ns",
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def emit_csv(
    result: SweepResult,
    records_path,
    aggregates_path=None,
) -> tuple[Path, Path]:
    """Write one row per trial plus an aggregates file.

    Rows are ordered by (estimator, M, snr_db, trial) so identical sweeps
    produce byte-identical files.
    """
    records_path = Path(records_path)
    if aggregates_path is None:
        aggregates_path = records_path.with_name(
            records_path.stem + "_aggregates" + records_path.suffix
        )
    aggregates_path = Path(aggregates_path)
    records_path.parent.mkdir(parents=True, exist_ok=True)

    rows = sorted(
        result.records, key=lambda r: (r.estimator, r.M, r.snr_db, r.trial)
    )
    try:
        with open(records_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(_RECORD_FIELDS)
            for r in rows:
                writer.writerow([_fmt(getattr(r, f)) for f in _RECORD_FIELDS])
        with open(aggregates_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(_AGG_FIELDS)
            for a in result.aggregates:
                writer.writerow([_fmt(getattr(a, f)) for f in _AGG_FIELDS])
    except OSError as exc:
        raise OSError(f"failed writing sweep CSV to {records_path}: {exc}") from exc
    return records_path, aggregates_path


def load_records(path) -> tuple:
    """Parse a records CSV back into TrialRecord rows (round-trip helper)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                TrialRecord(
                    estimator=row["estimator"],
                    M=int(row["M"]),
                    K=int(row["K"]),
                    B=int(row["B"]),
                    L=int(row["L"]),
                    P=int(row["P"]),
                    snr_db=float(row["snr_db"]),
                    trial=int(row["trial"]),
                    nmse=float(row["nmse"]) if row["nmse"] else None,
                    aoa_rmse=float(row["aoa_rmse"]) if row["aoa_rmse"] else None,
                    runtime_ns=int(row["runtime_ns"]),
                    seed=int(row["seed"]),
                    failed=row["failed"] == "1",
                )
            )
    return tuple(out)
