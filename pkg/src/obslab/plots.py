"""Figure rendering for scenario reports.

Figures are a convenience layer over the written CSV (which remains the data
contract): everything here is derived from the parsed trace columns plus the
params echo, never from in-memory simulation state.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_figures"]


def _save(fig, out_dir, name):
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return path


def _fig_error(cols, meta, out_dir):
    t, err = cols["t"], cols["err_sup"]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    pos = err > 0
    ax.semilogy(t[pos], err[pos], lw=1.2, label="sup-norm estimation error")
    env = cols.get("envelope")
    if env is not None and np.all(np.isfinite(env)):
        ax.semilogy(t, env, "--", lw=1.0, label="certified envelope")
    ax.set_xlabel("t")
    ax.set_ylabel("error")
    ax.legend(frameon=False, fontsize=8)
    ax.set_title("estimation error", fontsize=10)
    return _save(fig, out_dir, "error_decay.png")


def _fig_states(cols, meta, out_dir):
    t = cols["t"]
    n = sum(1 for k in cols if k.startswith("x") and k[1:].isdigit())
    fig, axes = plt.subplots(n, 1, figsize=(6.0, 2.2 * n), sharex=True, squeeze=False)
    for i in range(n):
        ax = axes[i, 0]
        ax.plot(t, cols[f"x{i}"], lw=1.2, label=f"x{i}")
        ax.plot(t, cols[f"xhat{i}"], "--", lw=1.0, label=f"estimate")
        ax.legend(frameon=False, fontsize=8)
    axes[-1, 0].set_xlabel("t")
    fig.suptitle("plant vs observer", fontsize=10)
    return _save(fig, out_dir, "states.png")


def _fig_predictor(cols, meta, out_dir):
    t = cols["t"]
    fig, ax = plt.subplots(figsize=(6.0, 3.0))
    ax.plot(t, cols["y0"], lw=1.0, label="measured output")
    ax.plot(t, cols["w0"], lw=0.9, alpha=0.8, label="inter-sample predictor")
    ax.set_xlabel("t")
    ax.legend(frameon=False, fontsize=8)
    ax.set_title("output vs predictor (resets at sampling instants)", fontsize=10)
    return _save(fig, out_dir, "predictor.png")


def _fig_lyapunov(cols, meta, out_dir):
    t, V = cols["t"], cols["V"]
    if not np.any(V > 0):
        return None
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    pos = V > 0
    ax.semilogy(t[pos], V[pos], lw=1.2, label="V(t)")
    zeta = meta.get("zeta")
    if zeta is not None and V[0] > 0:
        ax.semilogy(t, 1.05 * np.exp(-0.5 * float(zeta) * t) * V[0], "--", lw=1.0,
                    label="1.05 e^(-zeta t/2) V(0)")
    ax.set_xlabel("t")
    ax.legend(frameon=False, fontsize=8)
    ax.set_title("Lyapunov functional", fontsize=10)
    return _save(fig, out_dir, "lyapunov.png")


def _fig_bound(cols, meta, out_dir):
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(cols["omega"], cols["delta_max"], lw=1.3)
    ax.axhline(meta["inv_gamma_L"], ls="--", lw=0.9, color="gray",
               label="1/(gamma L) supremum")
    ax.set_xlabel("omega")
    ax.set_ylabel("max certified sampling diameter")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, out_dir, "bound_curve.png")


def _fig_equivalence(cols, meta, out_dir):
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.4))
    t = cols["t"]
    axes[0].plot(t, cols["v_end"], lw=1.2, label="field route v(t, 1)")
    axes[0].plot(t, cols["x1_dde"], "--", lw=1.0, label="delay route x1(t)")
    axes[0].set_xlabel("t")
    axes[0].legend(frameon=False, fontsize=8)
    ms = sorted(int(k.split("M")[1]) for k in meta if k.startswith("rel_err_M"))
    errs = [meta[f"rel_err_M{m}"] for m in ms]
    axes[1].loglog(ms, errs, "o-", lw=1.2, label="observed")
    ref = errs[0] * (np.asarray(ms, dtype=float) / ms[0]) ** -2.0
    axes[1].loglog(ms, ref, "--", lw=0.9, color="gray", label="order 2")
    axes[1].set_xlabel("grid cells M")
    axes[1].set_ylabel("rel. sup error")
    axes[1].legend(frameon=False, fontsize=8)
    fig.suptitle("field vs delay representation", fontsize=10)
    return _save(fig, out_dir, "equivalence.png")


def render_figures(kind, cols, meta, out_dir):
    """Render the report figures for one scenario; returns written paths."""
    written = []
    try:
        if kind in ("reactor_observer", "reactor_closed_loop", "highgain_observer"):
            written.append(_fig_error(cols, meta, out_dir))
            written.append(_fig_states(cols, meta, out_dir))
            written.append(_fig_predictor(cols, meta, out_dir))
            lyap = _fig_lyapunov(cols, meta, out_dir)
            if lyap:
                written.append(lyap)
        elif kind == "bound_table":
            written.append(_fig_bound(cols, meta, out_dir))
        elif kind == "equivalence_check":
            written.append(_fig_equivalence(cols, meta, out_dir))
    finally:
        plt.close("all")
    return [w for w in written if w]
