"""SVG figure emission for sweep results and spectra."""

from __future__ import annotations

from pathlib import Path

import numpy as np

PLOT_KINDS = ("nmse_vs_snr", "gain_vs_M", "runtime_vs_M", "spectrum")


def _axes():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.2, 3.6), layout="constrained")
    return plt, fig, ax


def emit_plot(data, kind: str, path, gamma_target: float = 1e-2) -> Path:
    """Render one figure kind to an SVG file.

    ``data`` is a SweepResult for the sweep kinds and a mapping of
    label -> PseudoSpectrum for ``kind="spectrum"``. ``gain_vs_M`` overlays
    the predicted SNR-gain curve so the logarithmic trend can be checked by
    eye.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt, fig, ax = _axes()
    try:
        if kind == "nmse_vs_snr":
            _nmse_vs_snr(ax, data)
        elif kind == "gain_vs_M":
            _gain_vs_m(ax, data, gamma_target)
        elif kind == "runtime_vs_M":
            _runtime_vs_m(ax, data)
        else:
            _spectrum(ax, data)
        fig.savefig(path, format="svg")
    finally:
        plt.close(fig)
    return path


def _series(result, estimator, M):
    pts = sorted(
        (a.snr_db, a.nmse_median_db)
        for a in result.aggregates
        if a.estimator == estimator and a.M == M
    )
    return [p[0] for p in pts], [p[1] for p in pts]


def _nmse_vs_snr(ax, result):
    Ms = sorted(set(a.M for a in result.aggregates))
    for est in result.spec.estimators:
        for M in Ms:
            x, y = _series(result, est, M)
            if not x:
                continue
            label = est if len(Ms) == 1 else f"{est} (M={M})"
            ax.plot(x, y, marker="o", label=label)
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel("median NMSE [dB]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)


def _gain_vs_m(ax, result, gamma_target):
    from .baselines import predicted_snr_gain
    from .harness import snr_gain_at_target

    gaps = snr_gain_at_target(result, gamma_target)
    Ms = sorted(gaps)
    ax.semilogx(Ms, [gaps[m] for m in Ms], marker="o", base=2, label="measured")
    cfg = result.spec.config
    ratio = cfg.sigma_n2 / cfg.sigma_x2
    pred = [predicted_snr_gain(m, cfg.B, ratio, rho_h2=cfg.P + 1) for m in Ms]
    ax.semilogx(Ms, pred, linestyle="--", base=2, label="predicted")
    ax.set_xlabel("antennas M")
    ax.set_ylabel(f"SNR gain at NMSE={gamma_target:g} [dB]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)


def _runtime_vs_m(ax, result):
    for est in result.spec.estimators:
        pts = sorted(
            (a.M, a.runtime_median_ns * 1e-9)
            for a in result.aggregates
            if a.estimator == est
        )
        if not pts:
            continue
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker="o", label=est)
    ax.set_xlabel("antennas M")
    ax.set_ylabel("median runtime [s]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)


def _spectrum(ax, spectra):
    for label, spec in spectra.items():
        ax.semilogy(np.degrees(spec.grid), spec.values, label=label, linewidth=0.9)
    ax.set_xlabel("angle [deg]")
    ax.set_ylabel("pseudo-spectrum")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
