"""Measurements: matter power spectrum, pair-force test harness, metrics.

Everything here is pure observation: fields and particles pass through
unchanged, and CSV serialization returns strings (the CLI owns all file
writes).
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import pm as pm_mod
from . import shortrange as sr_mod
from .core import Background
from .fft import ContractError
from .particles import ParticleStore
from .timers import Timers


# ---------------------------------------------------------------------------
# power spectrum

@dataclass
class PowerSpectrumResult:
    k: np.ndarray           # bin centers, 1/Mpc
    power: np.ndarray       # Mpc^3
    counts: np.ndarray      # modes per bin
    shot_noise: float       # Mpc^3 (reported, not subtracted)
    a: float
    edges: np.ndarray = None

    def to_csv(self):
        lines = ["# k [1/Mpc], P(k) [Mpc^3], modes, shot_noise [Mpc^3]"]
        for k, p, c in zip(self.k, self.power, self.counts):
            lines.append(f"{k:.8e},{p:.8e},{int(c)},{self.shot_noise:.8e}")
        return "\n".join(lines) + "\n"


def _cic_window(n_g, box_length):
    k1 = np.pi * np.fft.fftfreq(n_g)  # k * delta / 2 on the lattice
    w1 = np.ones(n_g)
    nz = k1 != 0
    w1[nz] = (np.sin(k1[nz]) / k1[nz]) ** 2
    return w1[:, None, None] * w1[None, :, None] * w1[None, None, :]


def power_spectrum(source, n_g, box_length, n_bins=24, a=1.0, deconvolve=None):
    """Binned P(k) of a particle set or a density-contrast grid.

    Particle input is CIC-deposited and the squared CIC window divided out;
    a raw grid bypasses both. Convention: P_mode = |delta_k|^2 V / N_c^2
    with delta_k the unnormalized DFT of the contrast, so Poisson-sampled
    particles give the flat shot noise V / N_p (reported separately).
    Logarithmic bins cover every nonzero lattice mode.
    """
    volume = box_length ** 3
    n_c = n_g ** 3
    if isinstance(source, ParticleStore):
        if len(source) == 0:
            raise ContractError("cannot measure an empty particle set")
        sel = source.active_mask
        grid = pm_mod.cic_deposit_mass(source.x[sel], source.y[sel], source.z[sel],
                                       source.mass[sel], n_g, box_length)
        contrast = grid / grid.mean() - 1.0
        shot = volume / int(np.count_nonzero(sel))
        deconvolve = True if deconvolve is None else deconvolve
    else:
        contrast = np.asarray(source, dtype=np.float64)
        if contrast.shape != (n_g, n_g, n_g):
            raise ContractError("grid shape does not match n_g")
        shot = 0.0
        deconvolve = bool(deconvolve)

    delta_k = np.fft.fftn(contrast)
    if deconvolve:
        delta_k = delta_k / _cic_window(n_g, box_length)
    pk_mode = np.abs(delta_k) ** 2 * volume / n_c ** 2

    k1 = 2.0 * np.pi * np.fft.fftfreq(n_g, d=box_length / n_g)
    kk = np.sqrt(k1[:, None, None] ** 2 + k1[None, :, None] ** 2 + k1[None, None, :] ** 2)
    kk_flat = kk.ravel()
    pk_flat = pk_mode.ravel()
    nonzero = kk_flat > 0

    k_min = 2.0 * np.pi / box_length
    k_max = np.sqrt(3.0) * np.pi * n_g / box_length
    edges = np.geomspace(k_min * 0.999, k_max * 1.001, n_bins + 1)
    which = np.digitize(kk_flat[nonzero], edges) - 1
    counts = np.bincount(which, minlength=n_bins)[:n_bins]
    psum = np.bincount(which, weights=pk_flat[nonzero], minlength=n_bins)[:n_bins]
    ksum = np.bincount(which, weights=kk_flat[nonzero], minlength=n_bins)[:n_bins]
    with np.errstate(invalid="ignore", divide="ignore"):
        pk = np.where(counts > 0, psum / np.maximum(counts, 1), 0.0)
        kc = np.where(counts > 0, ksum / np.maximum(counts, 1),
                      0.5 * (edges[:-1] + edges[1:]))
    return PowerSpectrumResult(k=kc, power=pk, counts=counts, shot_noise=shot,
                               a=a, edges=edges)


# ---------------------------------------------------------------------------
# two-particle force harness

@dataclass
class PairForceResult:
    r: np.ndarray                 # bin centers (Mpc)
    f_radial: np.ndarray          # mean combined radial force per bin
    f_newton: np.ndarray          # softened Newtonian reference per bin
    f_tangential_rms: np.ndarray  # per-sample tangential RMS per bin
    rms_profile_error: float      # RMS over bins of (radial mean / newton - 1)
    sample_scatter: float         # per-sample radial scatter at the outermost bin
    short_range_beyond_cut: float # max |f_SR| sampled at r >= r_cut (must be 0)

    def to_csv(self):
        lines = ["# r [Mpc], F_radial, F_newton, F_tangential_rms"]
        for r, fr, fn, ft in zip(self.r, self.f_radial, self.f_newton,
                                 self.f_tangential_rms):
            lines.append(f"{r:.8e},{fr:.8e},{fn:.8e},{ft:.8e}")
        return "\n".join(lines) + "\n"


def pair_force_test(config, cosmo, kernel, n_samples=8000, r_range=None,
                    n_bins=20, a=1.0, seed=77, rank_grid=(1, 1)):
    """Combined PM + short-range pair force vs the softened Newtonian law.

    Samples two-particle configurations by superposing single-source grid
    responses (the self-interaction of the composed kernel is zero to
    roundoff, so this equals a true two-particle solve) and adds the pair
    kernel directly. Radial profiles are r-binned means over random
    orientations and sub-cell offsets; the per-sample scatter is reported
    alongside.
    """
    delta = config.delta
    if r_range is None:
        r_range = (0.2 * delta, config.r_cut)
    rng = np.random.default_rng(seed)
    background = Background(a=a)
    n_per = 200
    n_sources = max(1, n_samples // n_per)

    s_list, frad_list, ftan_list, fsr_out = [], [], [], 0.0
    for _ in range(n_sources):
        src = rng.uniform(0.0, config.box_length, size=3)
        r = rng.uniform(r_range[0], r_range[1], size=n_per)
        # a few samples beyond the cutoff check the hard zero there
        r[:8] = rng.uniform(config.r_cut, 1.3 * config.r_cut, size=8)
        u = rng.normal(size=(n_per, 3))
        u /= np.linalg.norm(u, axis=1)[:, None]
        pts = (src + r[:, None] * u) % config.box_length
        store = ParticleStore(x=[src[0]], y=[src[1]], z=[src[2]],
                              px=[0], py=[0], pz=[0], mass=[1.0], ids=[0])
        density = pm_mod.cic_deposit(store, config)
        grids = pm_mod.solve_forces(density, background, cosmo, rank_grid)
        f_pm = pm_mod.cic_interpolate(grids, pts[:, 0], pts[:, 1], pts[:, 2], config)
        dv = src - pts
        dv -= config.box_length * np.round(dv / config.box_length)
        rr = np.linalg.norm(dv, axis=1)
        s = rr ** 2
        f_sr_factor = sr_mod.eval_f_sr(s, kernel)
        fsr_out = max(fsr_out, float(np.max(np.abs(f_sr_factor[rr >= kernel.r_cut]),
                                            initial=0.0)))
        f_comb = f_pm + (cosmo.G / a) * dv * f_sr_factor[:, None]
        frad = (f_comb * dv).sum(axis=1) / rr
        ftan = np.linalg.norm(f_comb - (frad / rr)[:, None] * dv, axis=1)
        s_list.append(rr)
        frad_list.append(frad)
        ftan_list.append(ftan)

    r_all = np.concatenate(s_list)
    frad_all = np.concatenate(frad_list)
    ftan_all = np.concatenate(ftan_list)
    inside = r_all <= config.r_cut
    # normalize each sample by the Newtonian factor at its own radius, then
    # bin: avoids the convexity bias of comparing bin means at bin centers
    newton_all = (cosmo.G / a) * sr_mod.newtonian_factor(r_all ** 2, kernel.epsilon) * r_all
    ratio_all = frad_all / newton_all

    edges = np.linspace(r_range[0], min(r_range[1], config.r_cut), n_bins + 1)
    centers, fr_mean, fn_ref, ft_rms, devs = [], [], [], [], []
    last_scatter = 0.0
    for i in range(n_bins):
        m = inside & (r_all >= edges[i]) & (r_all < edges[i + 1])
        if m.sum() < 8:
            continue
        rc = r_all[m].mean()
        newton = (cosmo.G / a) * sr_mod.newtonian_factor(rc ** 2, kernel.epsilon) * rc
        centers.append(rc)
        fr_mean.append(frad_all[m].mean())
        fn_ref.append(newton)
        ft_rms.append(np.sqrt((ftan_all[m] ** 2).mean()))
        devs.append(ratio_all[m].mean() - 1.0)
        last_scatter = ratio_all[m].std() / abs(ratio_all[m].mean())
    return PairForceResult(
        r=np.array(centers), f_radial=np.array(fr_mean), f_newton=np.array(fn_ref),
        f_tangential_rms=np.array(ft_rms),
        rms_profile_error=float(np.sqrt(np.mean(np.array(devs) ** 2))),
        sample_scatter=float(last_scatter),
        short_range_beyond_cut=fsr_out)


def kernel_anisotropy(config, cosmo, a=1.0, r=None, n_orientations=240, seed=99,
                      sigma=None, n_s=None):
    """Directional scatter of the composed spectral force kernel at radius r.

    Evaluates the solver's kernel response to a point source by direct
    spectral summation (no deposit or gather, hence no sub-cell noise) over
    random orientations: returns RMS tangential / mean radial. sigma/n_s
    override the filter for on/off comparisons.
    """
    if r is None:
        r = config.r_cut
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n_orientations, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    forces = pm_mod.kernel_force_at(r * u, config, cosmo, Background(a=a),
                                    sigma=sigma, n_s=n_s)
    f_rad = -(forces * u).sum(axis=1)          # toward the source
    f_tan = np.linalg.norm(forces + f_rad[:, None] * u, axis=1)
    return float(np.sqrt((f_tan ** 2).mean()) / abs(f_rad.mean()))


# ---------------------------------------------------------------------------
# metrics

PHASES = ("kernel", "walk", "fft", "other")


@dataclass
class MetricsRecord:
    step: int
    wall_seconds: float
    n_particles: int
    n_substeps: int
    n_threads: int
    fractions: dict = field(default_factory=dict)

    @property
    def time_per_substep_per_particle(self):
        return self.wall_seconds / (self.n_substeps * self.n_particles)

    @property
    def scaled_time_per_substep_per_particle(self):
        """threads x time/substep/particle, the weak-scaling-flat metric."""
        return self.n_threads * self.time_per_substep_per_particle

    def csv_row(self):
        frac = [f"{self.fractions.get(p, 0.0):.4f}" for p in PHASES]
        return ",".join([
            str(self.step), f"{self.wall_seconds:.6e}", str(self.n_particles),
            str(self.n_substeps), str(self.n_threads),
            f"{self.time_per_substep_per_particle:.6e}",
            f"{self.scaled_time_per_substep_per_particle:.6e}", *frac])

    @staticmethod
    def csv_header():
        return ("# step,wall_seconds,particles,substeps,threads,"
                "time_per_substep_per_particle,threads_x_time_per_substep_per_particle,"
                + ",".join(f"frac_{p}" for p in PHASES))


def metrics_csv(records):
    return "\n".join([MetricsRecord.csv_header()] + [r.csv_row() for r in records]) + "\n"


def fractions_from_phases(phase_seconds, wall_seconds):
    """Kernel/walk/fft fractions from scoped timers; the remainder is other."""
    out = {}
    known = 0.0
    for p in ("kernel", "walk", "fft"):
        t = phase_seconds.get(p, 0.0)
        out[p] = t / wall_seconds if wall_seconds > 0 else 0.0
        known += out[p]
    out["other"] = max(0.0, 1.0 - known)
    return out


def record_metrics(reports, n_threads=1):
    """Per-step MetricsRecord stream from stepper reports."""
    records = []
    prev = {}
    for i, rep in enumerate(reports):
        snap = rep.phase_seconds or {}
        delta = {k: snap.get(k, 0.0) - prev.get(k, 0.0) for k in set(snap) | set(prev)}
        prev = snap
        records.append(MetricsRecord(
            step=i, wall_seconds=rep.wall_seconds, n_particles=rep.n_particles,
            n_substeps=rep.n_substeps, n_threads=n_threads,
            fractions=fractions_from_phases(delta, rep.wall_seconds)))
    return records


def fixed_force_workload(n_particles=20000, box=32.0, seed=5):
    """Deterministic uniform-random particle set + kernel for thread sweeps."""
    rng = np.random.default_rng(seed)
    n = n_particles
    store = ParticleStore(
        x=rng.uniform(0, box, n), y=rng.uniform(0, box, n), z=rng.uniform(0, box, n),
        px=np.zeros(n), py=np.zeros(n), pz=np.zeros(n),
        mass=np.ones(n), ids=np.arange(n, dtype=np.uint64))
    kernel = sr_mod.ShortRangeKernel(epsilon=0.01, r_cut=3.2,
                                     poly=(0.26, -0.07, 0.01, -9e-4, 4e-5, -8e-7))
    return store, kernel, box


def thread_sweep(max_threads=None, repeats=1, leaf_capacity=256):
    """Rerun a fixed force workload at 1..max threads; returns timing rows."""
    store, kernel, box = fixed_force_workload()
    max_threads = max_threads or (os.cpu_count() or 1)
    threads = sorted({1, 2, max_threads} | {t for t in (4, 8) if t <= max_threads})
    rows = []
    sr_mod.tree_forces(store, kernel, leaf_capacity=leaf_capacity, box_length=box)  # warm
    for t in threads:
        best = float("inf")
        for _ in range(repeats):
            timers = Timers()
            sr_mod.tree_forces(store, kernel, leaf_capacity=leaf_capacity,
                               box_length=box, n_threads=t, timers=timers)
            best = min(best, timers.totals.get("kernel", 0.0))
        rows.append({"threads": t, "kernel_seconds": best})
    base = rows[0]["kernel_seconds"]
    for row in rows:
        row["speedup"] = base / row["kernel_seconds"]
    return rows


def thread_sweep_csv(rows):
    lines = ["# threads,kernel_seconds,speedup"]
    for r in rows:
        lines.append(f"{r['threads']},{r['kernel_seconds']:.6e},{r['speedup']:.4f}")
    return "\n".join(lines) + "\n"


def kernel_efficiency_sweep(list_sizes=(100, 300, 1000, 3000), n_targets=200,
                            repeats=3, seed=11):
    """Time per pair interaction vs neighbor-list size (reported, not asserted)."""
    rng = np.random.default_rng(seed)
    kernel = sr_mod.ShortRangeKernel(epsilon=0.01, r_cut=10.0,
                                     poly=(0.26, -0.07, 0.01, -9e-4, 4e-5, -8e-7))
    rows = []
    for n_list in list_sizes:
        nlist = sr_mod.NeighborList(
            x=rng.uniform(0, 5, n_list), y=rng.uniform(0, 5, n_list),
            z=rng.uniform(0, 5, n_list), mass=np.ones(n_list))
        x = rng.uniform(0, 5, n_targets)
        y = rng.uniform(0, 5, n_targets)
        z = rng.uniform(0, 5, n_targets)
        sr_mod.pp_leaf_forces(x, y, z, nlist, kernel)  # warm
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            sr_mod.pp_leaf_forces(x, y, z, nlist, kernel)
            best = min(best, time.perf_counter() - t0)
        rows.append({"list_size": n_list,
                     "ns_per_interaction": best / (n_list * n_targets) * 1e9})
    return rows
