"""Report figures rendered to PNG files (non-interactive backend)."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 110


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".part.png"
    fig.savefig(tmp, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_energy(times, breakdowns, path):
    """Stacked energy contributions and the total against time."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    keys = list(breakdowns[0].as_dict())
    for key in keys:
        vals = np.array([b.as_dict()[key] for b in breakdowns])
        if np.any(vals != 0):
            ax.plot(times, vals, lw=1.0, label=key)
    ax.plot(times, [b.total for b in breakdowns], "k-", lw=2.0, label="total")
    ax.set_xlabel("t")
    ax.set_ylabel("energy")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_theta_range(traj, path):
    t = traj.times
    lo = [s.theta.min() for s in traj.states]
    hi = [s.theta.max() for s in traj.states]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.fill_between(t, lo, hi, alpha=0.3)
    ax.plot(t, lo, label="min theta")
    ax.plot(t, hi, label="max theta")
    ax.set_xlabel("t")
    ax.set_ylabel("temperature")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_damage(traj, path):
    t = traj.times
    M = traj.mesh.lumped_mass
    mean = [float(M @ s.z) / M.sum() for s in traj.states]
    zmin = [s.z.min() for s in traj.states]
    upper = [0] + [r.active_upper for r in traj.reports[1:]]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(t, mean, label="mean z")
    ax.plot(t, zmin, label="min z")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("t")
    ax.set_ylabel("damage variable")
    ax2 = ax.twinx()
    ax2.step(t, upper, "k:", where="post", lw=0.8, label="upper-active nodes")
    ax2.set_ylabel("upper-active nodes")
    ax.legend(loc="lower left")
    return _save(fig, path)


def plot_inequalities(reports, path):
    """Worst scaled residual per inequality kind, per window end ``t``."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    kinds = sorted({r.kind for r in reports})
    for kind in kinds:
        worst = {}
        for r in reports:
            if r.kind == kind:
                v = r.residual / r.scale
                worst[r.t] = min(worst.get(r.t, np.inf), v)
        ts = sorted(worst)
        ax.plot(ts, [worst[t] for t in ts], ".-", lw=0.8, label=kind)
    ax.axhline(-1e-6, color="r", ls="--", lw=0.8, label="tolerance")
    ax.set_yscale("symlog", linthresh=1e-12)
    ax.set_xlabel("window end step")
    ax.set_ylabel("min residual / scale")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_fields(mesh, state, path, names=("c", "z", "theta")):
    fields = state.fields()
    fig, axes = plt.subplots(1, len(names), figsize=(3.4 * len(names), 3.0), squeeze=False)
    for ax, name in zip(axes[0], names):
        vals = fields[name]
        if mesh.dim == 1:
            ax.plot(mesh.coords[:, 0], vals)
        else:
            # axis 0 fastest: reshape in Fortran order, slice the first layer in 3D
            img = vals.reshape(mesh.node_shape, order="F")
            if mesh.dim == 3:
                img = img[:, :, mesh.node_shape[2] // 2]
            im = ax.imshow(img.T, origin="lower", extent=(0, mesh.extents[0], 0, mesh.extents[1]))
            fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(f"{name} at t={state.t:.4g}")
    return _save(fig, path)


def plot_convergence(hs, errors, path, order=None, xlabel="h"):
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.loglog(hs, errors, "o-", label="error")
    if order is not None:
        ref = errors[0] * (np.asarray(hs) / hs[0]) ** order
        ax.loglog(hs, ref, "k--", lw=0.8, label=f"slope {order:.2f}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("error")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    return _save(fig, path)
