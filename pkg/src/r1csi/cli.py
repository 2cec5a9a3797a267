"""Command-line front end: sweeps, single estimates, benches, spectra, checks.

Angles cross this boundary in degrees; everything internal is radians.
Exit codes: 0 success, 1 failed validation or estimator error, 2 usage.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version dependent
    import tomli as tomllib

from . import __version__
from .errors import EstimationError
from .harness import (
    SweepSpec,
    bench_runtime,
    emit_csv,
    nmse,
    run_sweep,
    split_rng,
)
from .model import SystemConfig, draw_channel, draw_pilots, transmit
from .plots import PLOT_KINDS, emit_plot

ENV_SEED = "R1CSI_SEED"
ENV_OUT_DIR = "R1CSI_OUT_DIR"

_CONFIG_KEYS = ("M", "K", "B", "L", "P", "N", "d_over_lambda", "sigma_x2")
_SWEEP_KEYS = (
    "M_list", "snr_db_list", "trials", "estimators", "mode", "cluster_rank",
    "fast_s", "cov_samples", "workers",
)


@dataclass(frozen=True)
class CliCommand:
    subcommand: str
    options: dict
    out_dir: Path
    verbosity: int


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _str_list(text: str) -> list[str]:
    return [tok.strip() for tok in text.split(",") if tok.strip()]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--M", type=int, help="antenna count")
    p.add_argument("--K", type=int, help="user count")
    p.add_argument("--B", type=int, help="pilot length (default 2K)")
    p.add_argument("--L", type=int, help="stack length (default M//2)")
    p.add_argument("--P", type=int, help="paths per user")
    p.add_argument("--N", type=int, help="angle grid size")
    p.add_argument("--d-over-lambda", type=float, dest="d_over_lambda")
    p.add_argument("--sigma-x2", type=float, dest="sigma_x2")
    p.add_argument("--snr-db", type=float, dest="snr_db")


def parse_args(argv) -> CliCommand:
    """Parse and validate argv; exits with code 2 on usage errors."""
    parser = argparse.ArgumentParser(
        prog="r1csi",
        description="Rank-1 subspace channel estimation benchmark harness",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", type=str, default=None)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p_sweep = sub.add_parser("sweep", parents=[common], help="run a Monte Carlo sweep")
    p_sweep.add_argument("--config", type=str, help="TOML config file")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--M-list", type=_int_list, dest="M_list")
    p_sweep.add_argument("--snr-db-list", type=_float_list, dest="snr_db_list")
    p_sweep.add_argument("--trials", type=int)
    p_sweep.add_argument("--estimators", type=_str_list)
    p_sweep.add_argument("--mode", choices=("full_rank", "low_rank"))
    p_sweep.add_argument("--cluster-rank", type=int, dest="cluster_rank")
    p_sweep.add_argument("--fast-s", type=int, dest="fast_s")
    p_sweep.add_argument("--cov-samples", type=int, dest="cov_samples")
    p_sweep.add_argument("--workers", type=int, default=None)
    p_sweep.add_argument("--plot", type=_str_list, default=[],
                         help="comma-separated plot kinds")

    p_est = sub.add_parser("estimate", parents=[common],
                           help="one end-to-end estimate on a drawn channel")
    _add_config_flags(p_est)
    p_est.add_argument("--estimator", default="rank1",
                       choices=("rank1", "rank1_fast", "fft"))
    p_est.add_argument("--fast-s", type=int, dest="fast_s")

    p_bench = sub.add_parser("bench", parents=[common],
                             help="single-threaded runtime benchmarks")
    _add_config_flags(p_bench)
    p_bench.add_argument("--M-list", type=_int_list, dest="M_list")
    p_bench.add_argument("--estimators", type=_str_list,
                         default=["rank1", "rank1_fast", "ls"])
    p_bench.add_argument("--repetitions", type=int, default=7)
    p_bench.add_argument("--fast-s", type=int, dest="fast_s")

    p_spec = sub.add_parser("spectrum", parents=[common],
                            help="dump exact and fast pseudo-spectra")
    _add_config_flags(p_spec)
    p_spec.add_argument("--fast-s", type=int, dest="fast_s")

    sub.add_parser("validate", parents=[common], help="run the invariant suite")

    ns = parser.parse_args(argv)
    options = vars(ns)
    out_dir = options.pop("out_dir", None) or os.environ.get(ENV_OUT_DIR) or "."
    if options.get("seed") is None:
        env_seed = os.environ.get(ENV_SEED)
        options["seed"] = int(env_seed) if env_seed is not None else 0
    verbosity = options.pop("verbose", 0)
    return CliCommand(
        subcommand=options.pop("subcommand"),
        options=options,
        out_dir=Path(out_dir),
        verbosity=verbosity,
    )


def _load_toml(path: str) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return format(v, ".17g") + ("" if math.isfinite(v) else "  # nonfinite")
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


def dump_effective_config(spec: SweepSpec, seed: int, path: Path) -> Path:
    """Write the resolved sweep configuration; re-running it reproduces the
    sweep byte for byte."""
    cfg = spec.config
    lines = [f"seed = {seed}", "", "[config]"]
    for key in _CONFIG_KEYS:
        lines.append(f"{key} = {_toml_value(getattr(cfg, key))}")
    lines += ["", "[sweep]"]
    for key in _SWEEP_KEYS:
        value = getattr(spec, key)
        if value is None:
            continue
        lines.append(f"{key} = {_toml_value(list(value) if isinstance(value, tuple) else value)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _build_config(opts: dict, file_cfg: dict, seed: int) -> SystemConfig:
    merged = dict(file_cfg)
    for key in _CONFIG_KEYS:
        if opts.get(key) is not None:
            merged[key] = opts[key]
    if "M" not in merged:
        raise ValueError("M is required (flag --M or [config] section)")
    cfg = SystemConfig(seed=seed, **merged)
    if opts.get("snr_db") is not None:
        cfg = cfg.at_snr_db(opts["snr_db"])
    return cfg


def _cmd_sweep(cmd: CliCommand) -> int:
    opts = cmd.options
    data = _load_toml(opts["config"]) if opts.get("config") else {}
    seed = opts["seed"] if opts.get("seed") is not None else data.get("seed", 0)
    file_sweep = dict(data.get("sweep", {}))
    for key in _SWEEP_KEYS:
        if opts.get(key) is not None:
            file_sweep[key] = opts[key]
    config = _build_config(opts, data.get("config", {}), seed)
    if "M_list" not in file_sweep:
        file_sweep["M_list"] = [config.M]
    if "snr_db_list" not in file_sweep:
        snr = opts.get("snr_db")
        file_sweep["snr_db_list"] = [snr if snr is not None else 20.0]
    file_sweep.setdefault("trials", 100)
    file_sweep.setdefault("estimators", ["rank1"])
    if file_sweep.get("workers") is None:
        file_sweep["workers"] = os.cpu_count() or 1
    spec = SweepSpec(config=config, **file_sweep)

    dump_effective_config(spec, seed, cmd.out_dir / "effective_config.toml")
    result = run_sweep(spec)
    rec_path, agg_path = emit_csv(result, cmd.out_dir / "sweep_records.csv")
    print(f"wrote {rec_path} and {agg_path}")
    for kind in opts.get("plot") or []:
        if kind == "spectrum":
            print("plot kind 'spectrum' belongs to the spectrum subcommand",
                  file=sys.stderr)
            return 1
        out = emit_plot(result, kind, cmd.out_dir / f"{kind}.svg")
        print(f"wrote {out}")
    failures = sum(a.failures for a in result.aggregates)
    if cmd.verbosity:
        for a in result.aggregates:
            print(
                f"{a.estimator:10s} M={a.M:<5d} snr={a.snr_db:+6.1f} dB  "
                f"median NMSE {a.nmse_median_db:+7.2f} dB  "
                f"failures {a.failures}/{a.trials}"
            )
    print(f"{len(result.records)} records, {failures} failed trials")
    return 0


def _cmd_estimate(cmd: CliCommand) -> int:
    opts = cmd.options
    config = _build_config(opts, {}, opts["seed"])
    rng = split_rng(config.seed, 0)
    chan = draw_channel(config, rng)
    pilots = draw_pilots(config, rng)
    Y = transmit(chan, pilots, config.sigma_n2, rng)
    from .harness import run_estimator

    est = run_estimator(
        opts["estimator"], Y, pilots, config, split_rng(config.seed, 1),
        fast_s=opts.get("fast_s"),
    )
    if est.failed_users:
        for k, msg in est.failed_users.items():
            print(f"error: estimate: user {k}: {msg}", file=sys.stderr)
        return 1
    print(f"estimator : {est.estimator_tag}")
    print(
        f"scenario  : M={config.M} K={config.K} B={config.B} L={config.L} "
        f"P={config.P} snr_db={config.snr_db:.1f} seed={config.seed}"
    )
    for k in range(config.K):
        true_deg = np.degrees(np.sort(chan.aoas[k]))
        est_deg = np.degrees(np.sort(est.aoas[k].thetas))
        print(f"user {k}: aoa_deg  = {np.array2string(est_deg, precision=3)}")
        print(f"        true_deg = {np.array2string(true_deg, precision=3)}")
        print(
            f"        gains    = {np.array2string(est.gains[k], precision=3)}"
        )
    err = nmse(est.H_hat, chan.H)
    print(f"nmse = {err:.3e} ({10 * math.log10(err) if err > 0 else -math.inf:.1f} dB)")
    return 0


def _cmd_bench(cmd: CliCommand) -> int:
    opts = cmd.options
    m_list = opts.get("M_list") or [opts.get("M") or 256]
    print(f"{'estimator':12s} {'M':>6s} {'median':>12s} {'spread':>18s}")
    for M in m_list:
        merged = {k: opts[k] for k in _CONFIG_KEYS if opts.get(k) is not None}
        merged["M"] = M
        merged.pop("L", None)  # sweep geometry pins L = M // 2
        config = SystemConfig(seed=opts["seed"], **merged)
        if opts.get("snr_db") is not None:
            config = config.at_snr_db(opts["snr_db"])
        for tag in opts["estimators"]:
            stats = bench_runtime(
                tag, config, repetitions=opts["repetitions"],
                fast_s=opts.get("fast_s"),
            )
            lo = min(stats.runtimes_ns) / 1e6
            hi = max(stats.runtimes_ns) / 1e6
            print(
                f"{tag:12s} {M:>6d} {stats.median_ns / 1e6:>9.3f} ms "
                f"[{lo:>8.3f}, {hi:>8.3f}] ms"
            )
    return 0


def _cmd_spectrum(cmd: CliCommand) -> int:
    import csv as _csv

    from .fastpath import (
        approx_subspace,
        default_sampling_length,
        nystrom_weight,
        sample_columns,
    )
    from .model import despread
    from .rank1 import build_hankel, detect_peaks, pseudo_spectrum, signal_subspace

    opts = cmd.options
    config = _build_config(opts, {}, opts["seed"])
    rng = split_rng(config.seed, 0)
    chan = draw_channel(config, rng)
    pilots = draw_pilots(config, rng)
    Y = transmit(chan, pilots, config.sigma_n2, rng)
    y = despread(Y, pilots.X[:, 0])

    hank = build_hankel(y, config.L)
    exact = pseudo_spectrum(signal_subspace(hank, config.P), config)
    s = opts.get("fast_s") or default_sampling_length(config.P)
    sketch = sample_columns(hank, s, split_rng(config.seed, 1))
    approx = pseudo_spectrum(
        approx_subspace(sketch, nystrom_weight(hank, sketch.indices), config.P),
        config,
    )

    cmd.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = cmd.out_dir / "spectrum.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["angle_deg", "exact", "fast"])
        for g, e, f in zip(np.degrees(exact.grid), exact.values, approx.values):
            writer.writerow([format(g, ".17g"), format(e, ".17g"), format(f, ".17g")])
    svg_path = emit_plot(
        {"exact": exact, f"fast (s={s})": approx}, "spectrum",
        cmd.out_dir / "spectrum.svg",
    )
    peaks = detect_peaks(exact, config.P)
    print(f"true AoAs  [deg]: {np.array2string(np.degrees(np.sort(chan.aoas[0])), precision=3)}")
    print(f"peak AoAs  [deg]: {np.array2string(np.degrees(np.sort(peaks.thetas)), precision=3)}")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def _cmd_validate(cmd: CliCommand) -> int:
    from .validate import run_checks

    results = run_checks()
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{r.name:<{width}s}  {status}"
        if not r.passed:
            failed += 1
            line += f"  ({r.detail})"
        print(line)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def run(cmd: CliCommand) -> int:
    """Execute a parsed command, mapping failures to exit codes."""
    handlers = {
        "sweep": _cmd_sweep,
        "estimate": _cmd_estimate,
        "bench": _cmd_bench,
        "spectrum": _cmd_spectrum,
        "validate": _cmd_validate,
    }
    try:
        return handlers[cmd.subcommand](cmd)
    except EstimationError as exc:
        print(f"error: {cmd.subcommand}: estimation failed: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {cmd.subcommand}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> None:
    sys.exit(run(parse_args(sys.argv[1:] if argv is None else argv)))
