"""Report figures written to PNG files.

Figures are rendered with the Agg backend and without a software stamp in
the PNG metadata, so identical inputs give identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_sweep_contours", "plot_difference", "plot_eh_map",
           "plot_p_histogram", "plot_surface_map"]

_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def _grid(rows, metric, **match):
    """Mean ``metric`` on the (N, I) grid for rows matching ``match``."""
    sel = [r for r in rows if r["metric"] == metric
           and all(r.get(k) == v for k, v in match.items())]
    Ns = sorted({r["N"] for r in sel})
    Is = sorted({r["I"] for r in sel})
    Z = np.full((len(Is), len(Ns)), np.nan)
    for r in sel:
        Z[Is.index(r["I"]), Ns.index(r["N"])] = r["value"]
    return np.array(Ns, dtype=float), np.array(Is, dtype=float), Z


def _panel(ax, Ns, Is, Z, vmin, vmax, cmap):
    if len(Ns) >= 2 and len(Is) >= 2:
        mesh = ax.pcolormesh(Ns, Is, Z, shading="nearest", vmin=vmin,
                             vmax=vmax, cmap=cmap)
        if np.isfinite(Z).all() and np.ptp(Z) > 0:
            cs = ax.contour(Ns, Is, Z, levels=5, colors="k", linewidths=0.6)
            ax.clabel(cs, fontsize=7, fmt="%.2f")
    else:
        mesh = ax.imshow(Z, origin="lower", aspect="auto", vmin=vmin,
                         vmax=vmax, cmap=cmap)
        ax.set_xticks(range(len(Ns)), [f"{n:g}" for n in Ns])
        ax.set_yticks(range(len(Is)), [f"{i:g}" for i in Is])
    ax.set_xlabel("subjects N")
    ax.set_ylabel("intensity I")
    return mesh


def _configs(rows):
    seen = []
    for r in rows:
        key = (r["signal"], r["variant"], r["E"], r["H"], r["h_thr"])
        if key not in seen:
            seen.append(key)
    return seen


def _label(key):
    signal, variant, E, H, h = key
    if variant == "tfce":
        return f"signal {signal}, TFCE E={E:g} H={H:g}"
    if variant == "cluster":
        return f"signal {signal}, cluster h={h:g}"
    return f"signal {signal}, no TFCE"


def plot_sweep_contours(rows, path, metric="sensitivity"):
    """One panel per (signal, method) showing ``metric`` over N x I."""
    configs = _configs(rows)
    ncol = min(3, len(configs)) or 1
    nrow = max(1, -(-len(configs) // ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(4 * ncol, 3.2 * nrow),
                             squeeze=False)
    im = None
    for ax, key in zip(axes.flat, configs):
        Ns, Is, Z = _grid(rows, metric, **dict(zip(
            ("signal", "variant", "E", "H", "h_thr"), key)))
        im = _panel(ax, Ns, Is, Z, 0.0, 1.0, "viridis")
        ax.set_title(_label(key), fontsize=9)
    for ax in list(axes.flat)[len(configs):]:
        ax.set_axis_off()
    if im is not None:
        fig.colorbar(im, ax=axes.ravel().tolist(), label=metric)
    _save(fig, path)


def plot_difference(rows, path, metric="sensitivity", E=0.5, H=2.0):
    """TFCE minus no-TFCE ``metric`` over N x I, per signal."""
    signals = sorted({r["signal"] for r in rows if r["variant"] == "mur"})
    fig, axes = plt.subplots(1, max(1, len(signals)),
                             figsize=(4.2 * max(1, len(signals)), 3.4),
                             squeeze=False)
    for ax, s in zip(axes.flat, signals):
        Ns, Is, tf = _grid(rows, metric, signal=s, variant="tfce", E=E, H=H)
        _, _, mur = _grid(rows, metric, signal=s, variant="mur")
        im = _panel(ax, Ns, Is, tf - mur, -1.0, 1.0, "RdBu_r")
        ax.set_title(f"signal {s}: TFCE - MUR", fontsize=9)
        fig.colorbar(im, ax=ax, label=f"{metric} difference")
    if not signals:
        axes[0, 0].set_axis_off()
    _save(fig, path)


def plot_eh_map(rows, path, metric="sensitivity"):
    """``metric`` averaged over the (N, I) grid for each TFCE (E, H)."""
    sel = [r for r in rows if r["variant"] == "tfce"
           and r["metric"] == metric]
    signals = sorted({r["signal"] for r in sel})
    Es = sorted({r["E"] for r in sel})
    Hs = sorted({r["H"] for r in sel})
    fig, axes = plt.subplots(1, max(1, len(signals)),
                             figsize=(4 * max(1, len(signals)), 3.4),
                             squeeze=False)
    for ax, s in zip(axes.flat, signals):
        Z = np.full((len(Hs), len(Es)), np.nan)
        for i, H in enumerate(Hs):
            for j, E in enumerate(Es):
                vals = [r["value"] for r in sel if r["signal"] == s
                        and r["E"] == E and r["H"] == H]
                if vals:
                    Z[i, j] = np.mean(vals)
        im = ax.imshow(Z, origin="lower", aspect="auto", vmin=0, vmax=1,
                       cmap="viridis")
        ax.set_xticks(range(len(Es)), [f"{e:g}" for e in Es])
        ax.set_yticks(range(len(Hs)), [f"{h:g}" for h in Hs])
        ax.set_xlabel("E")
        ax.set_ylabel("H")
        ax.set_title(f"signal {s}", fontsize=9)
        fig.colorbar(im, ax=ax, label=metric)
    if not signals:
        axes[0, 0].set_axis_off()
    _save(fig, path)


def plot_p_histogram(p, path, bins=20, title="raw p-values"):
    p = np.asarray(p, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.hist(p, bins=bins, range=(0, 1), color="0.4", edgecolor="white")
    ax.axhline(p.size / bins, color="tab:red", lw=1, ls="--")
    ax.set_xlabel("p")
    ax.set_ylabel("vertices")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def plot_surface_map(mesh, values, path, mask=None, title=None,
                     cmap="RdBu_r"):
    """Per-vertex values on the surface, outlined where ``mask`` is set."""
    from mpl_toolkits.mplot3d.art3d import Poly3DCollection

    values = np.asarray(values, dtype=float)
    tri = mesh.triangles
    face_val = values[tri].mean(axis=1)
    lim = float(np.nanmax(np.abs(values))) or 1.0
    norm = plt.Normalize(-lim, lim)
    colors = plt.get_cmap(cmap)(norm(face_val))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        colors[~mask[tri].all(axis=1), 3] = 0.35
    fig = plt.figure(figsize=(5, 4))
    ax = fig.add_subplot(projection="3d")
    coll = Poly3DCollection(mesh.vertices[tri], facecolors=colors,
                            edgecolors="none")
    ax.add_collection3d(coll)
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    pad = 0.5 * max(float(np.max(hi - lo)), 1.0) * (hi - lo == 0)
    lo, hi = lo - pad, hi + pad
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_zlim(lo[2], hi[2])
    ax.set_box_aspect(hi - lo)
    ax.set_axis_off()
    sm = plt.cm.ScalarMappable(norm=norm, cmap=cmap)
    fig.colorbar(sm, ax=ax, shrink=0.7)
    if title:
        ax.set_title(title, fontsize=9)
    _save(fig, path)
