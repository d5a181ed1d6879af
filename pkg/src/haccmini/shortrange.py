"""Short/close-range force: fitted residual kernel, RCB tree, direct sums.

The pair kernel multiplies the separation vector:

    f_SR(s) = (s + eps)^(-3/2) - f_grid(s),   s = r.r
    f_SR(s) = 0  for s >= r_cut^2 and for s == 0

where f_grid is a fifth-degree polynomial in s fitted to the measured grid
force of the PM solver, so that (PM + short-range) reproduces the softened
Newtonian pair force inside the matching radius. All sums returned here are
"raw" kernel sums sum_j m_j (x_j - x_i) f_SR(s_ij); the caller applies the
G/a prefactor (the same one the PM prefactor carries).

Forces are evaluated one tree leaf at a time against a contiguous neighbor
list shared by every particle in the leaf.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import pm as pm_mod
from .core import NumericError
from .particles import ParticleStore
from .timers import null_timers

TREE = "tree"
P3M_DIRECT = "p3m_direct"


class ConfigurationError(ValueError):
    """Requested mode or parameters are not available."""


@dataclass(frozen=True)
class ShortRangeKernel:
    epsilon: float          # softening, enters as s + epsilon (Mpc^2)
    r_cut: float            # matching radius (Mpc)
    poly: tuple             # ascending coefficients c0..c5 of f_grid(s)

    def f_grid(self, s):
        return np.polyval(self.poly[::-1], s)


def eval_f_sr(s, kernel):
    """Scalar force factor; total function, 0 beyond the cutoff and at s=0."""
    s = np.asarray(s, dtype=np.float64)
    inside = (s > 0.0) & (s < kernel.r_cut ** 2)
    safe = np.where(inside, s, 1.0)
    val = (safe + kernel.epsilon) ** -1.5 - np.polyval(kernel.poly[::-1], safe)
    return np.where(inside, val, 0.0)


def newtonian_factor(s, epsilon):
    """Softened Newtonian scalar factor (s + eps)^(-3/2)."""
    return (np.asarray(s, dtype=np.float64) + epsilon) ** -1.5


def measure_grid_force(config, cosmo, n_sources=128, n_per_source=96,
                       seed=20250808, rank_grid=(1, 1)):
    """Sample the PM pair force: (s, radial force factor) arrays.

    Each sample is a two-particle configuration: a randomly placed unit-mass
    source goes through the production chain (deposit, solve, gather) and
    the force is read at a random orientation and separation in (0, r_cut].
    Values are normalized by G m / r so they multiply a separation vector.
    """
    from .core import Background

    rng = np.random.default_rng(seed)
    delta, r_cut, box = config.delta, config.r_cut, config.box_length
    background = Background(a=1.0)

    s_all, f_all = [], []
    for _ in range(n_sources):
        src = rng.uniform(0.0, box, size=3)
        r = rng.uniform(0.02 * delta, r_cut, size=n_per_source)
        u = rng.normal(size=(n_per_source, 3))
        u /= np.linalg.norm(u, axis=1)[:, None]
        pts = (src + r[:, None] * u) % box
        store = ParticleStore(x=[src[0]], y=[src[1]], z=[src[2]],
                              px=[0], py=[0], pz=[0], mass=[1.0], ids=[0])
        density = pm_mod.cic_deposit(store, config)
        grids = pm_mod.solve_forces(density, background, cosmo, rank_grid)
        force = pm_mod.cic_interpolate(grids, pts[:, 0], pts[:, 1], pts[:, 2], config)
        dv = src - pts
        dv -= box * np.round(dv / box)
        rr = np.linalg.norm(dv, axis=1)
        f_radial = (force * dv).sum(axis=1) / rr
        s_all.append(rr ** 2)
        f_all.append(f_radial * background.a / (cosmo.G * rr))
    return np.concatenate(s_all), np.concatenate(f_all)


def fit_grid_force(config, cosmo, epsilon=None, n_sources=128, n_per_source=96,
                   seed=20250808, rank_grid=(1, 1), samples=None):
    """Fit f_grid(s) to the measured PM pair force of `config`.

    Weighted least squares of a fifth-degree polynomial in s against
    >= n_sources * n_per_source sampled configurations, with the endpoint
    pinned to the softened Newtonian factor at r_cut^2 so the fitted kernel
    hands off smoothly at the matching radius. The weight (s + eps)^{3/2}
    makes the residual metric "error relative to the Newtonian force".
    """
    if epsilon is None:
        epsilon = (0.1 * config.delta) ** 2
    if samples is None:
        samples = measure_grid_force(config, cosmo, n_sources=n_sources,
                                     n_per_source=n_per_source, seed=seed,
                                     rank_grid=rank_grid)
    s, f = samples
    r_cut = config.r_cut

    degree = 5
    basis = np.vander(s, degree + 1, increasing=True)
    weights = (s + epsilon) ** 1.5
    a_w = basis * weights[:, None]
    cond = np.linalg.cond(a_w)
    if cond > 1e12:
        raise NumericError(f"grid-force fit is ill-conditioned (cond={cond:.3g})")
    edge = np.vander([r_cut ** 2], degree + 1, increasing=True)[0]
    target = newtonian_factor(r_cut ** 2, epsilon)
    # substitute c = c0 + N z with c0 the minimum-norm constrained point and
    # N an orthonormal basis of the constraint nullspace
    c0 = edge * target / (edge @ edge)
    q, _ = np.linalg.qr(np.column_stack([edge, np.eye(degree + 1)]))
    nullsp = q[:, 1:degree + 1]
    z, *_ = np.linalg.lstsq(a_w @ nullsp, (f - basis @ c0) * weights, rcond=None)
    coef = c0 + nullsp @ z
    return ShortRangeKernel(epsilon=epsilon, r_cut=r_cut, poly=tuple(coef))


def fit_residual_profile(kernel, samples, config, n_bins=15, r_min=None):
    """r-binned fit residual, relative to the softened Newtonian factor."""
    s, f = samples
    r = np.sqrt(s)
    r_min = 0.1 * config.delta if r_min is None else r_min
    rel = (f - kernel.f_grid(s)) * (s + kernel.epsilon) ** 1.5
    edges = np.linspace(r_min, config.r_cut, n_bins + 1)
    devs = []
    for i in range(n_bins):
        m = (r >= edges[i]) & (r < edges[i + 1])
        if m.sum() >= 8:
            devs.append(rel[m].mean())
    return np.array(devs)


# ---------------------------------------------------------------------------
# RCB tree

@dataclass
class RCBNode:
    lo: int
    hi: int
    bounds: np.ndarray          # (3, 2) geometric box (split planes live here)
    tight: np.ndarray = None    # (3, 2) tight particle bounds, used by the walk
    split_axis: int = -1
    split_coord: float = 0.0
    left: "RCBNode" = None
    right: "RCBNode" = None
    degenerate: bool = False

    @property
    def is_leaf(self):
        return self.left is None

    @property
    def size(self):
        return self.hi - self.lo


@dataclass
class RCBTree:
    store: ParticleStore        # partitioned copy; leaf ranges are contiguous
    order: np.ndarray           # order[i] = original index of slot i
    root: RCBNode = None
    leaves: list = field(default_factory=list)
    leaf_capacity: int = 200
    degenerate_leaves: int = 0


def _partition_range(store, order, lo, hi, mask):
    """Three-phase partition of [lo, hi): record the swap plan from the
    split mask, apply it to the six position/momentum arrays, then to the
    remaining arrays."""
    plan = np.concatenate([np.flatnonzero(mask), np.flatnonzero(~mask)]) + lo
    for name in ParticleStore.POS_FIELDS + ParticleStore.VEL_FIELDS:
        arr = getattr(store, name)
        arr[lo:hi] = arr[plan]
    for name in ParticleStore.OTHER_FIELDS:
        arr = getattr(store, name)
        arr[lo:hi] = arr[plan]
    order[lo:hi] = order[plan]
    return lo + int(mask.sum())


def rcb_build(particles, leaf_capacity=200, bounds=None):
    """Recursive coordinate bisection down to <= leaf_capacity per leaf.

    Splits perpendicular to the longest box side at the center-of-mass
    coordinate. The input store is copied; the copy is reordered so every
    leaf owns a contiguous, disjoint index range.
    """
    if len(particles) < 1:
        raise ValueError("need at least one particle")
    store = particles.copy()
    order = np.arange(len(store), dtype=np.int64)
    if bounds is None:
        bounds = np.array([
            [store.x.min(), store.x.max()],
            [store.y.min(), store.y.max()],
            [store.z.min(), store.z.max()],
        ])
    else:
        bounds = np.asarray(bounds, dtype=np.float64)
    tree = RCBTree(store=store, order=order, leaf_capacity=leaf_capacity)
    coords = {0: store.x, 1: store.y, 2: store.z}

    def build(lo, hi, box):
        node = RCBNode(lo=lo, hi=hi, bounds=box)
        node.tight = np.array([
            [coords[a][lo:hi].min(), coords[a][lo:hi].max()] for a in range(3)
        ])
        if hi - lo <= leaf_capacity:
            tree.leaves.append(node)
            return node
        for axis in np.argsort(box[:, 0] - box[:, 1]):  # longest side first
            axis = int(axis)
            c = coords[axis][lo:hi]
            m = store.mass[lo:hi]
            com = float(np.average(c, weights=m))
            mask = c < com
            n_left = int(mask.sum())
            if 0 < n_left < hi - lo:
                mid = _partition_range(store, order, lo, hi, mask)
                node.split_axis = axis
                node.split_coord = com
                left_box, right_box = box.copy(), box.copy()
                left_box[axis, 1] = com
                right_box[axis, 0] = com
                node.left = build(lo, mid, left_box)
                node.right = build(mid, hi, right_box)
                return node
        # no axis separates the points (all coincident): keep as a leaf
        node.degenerate = True
        tree.degenerate_leaves += 1
        tree.leaves.append(node)
        return node

    tree.root = build(0, len(store), bounds)
    return tree


@dataclass
class NeighborList:
    """Contiguous interaction arrays shared by all particles of one leaf."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    mass: np.ndarray

    def __len__(self):
        return self.x.size


def _interval_gap(a0, a1, b0, b1, period=None):
    direct = max(a0 - b1, b0 - a1, 0.0)
    if period is None:
        return direct
    g = direct
    for shift in (-period, period):
        g = min(g, max(a0 - (b1 + shift), (b0 + shift) - a1, 0.0))
    return g


def build_neighbor_list(tree, leaf, r_cut, box_length=None):
    """All particles within r_cut of `leaf`'s bounding box, contiguous.

    The walk collects whole leaves whose tight boxes touch the inflated
    leaf box, then the gathered candidates are clipped to that box while
    being copied into the contiguous interaction arrays. Complete by
    construction (anything within r_cut of a leaf particle survives the
    clip); minimality is not attempted, the kernel cutoff handles the
    corner extras. With `box_length` all box distances are minimum-image.
    """
    ranges = []

    def visit(node):
        for axis in range(3):
            if _interval_gap(leaf.tight[axis, 0] - r_cut, leaf.tight[axis, 1] + r_cut,
                             node.tight[axis, 0], node.tight[axis, 1],
                             box_length) > 0.0:
                return
        if node.is_leaf:
            ranges.append((node.lo, node.hi))
            return
        visit(node.left)
        visit(node.right)

    visit(tree.root)
    idx = np.concatenate([np.arange(lo, hi) for lo, hi in ranges])
    s = tree.store
    keep = np.ones(idx.size, dtype=bool)
    for axis, arr in enumerate((s.x, s.y, s.z)):
        lo, hi = leaf.tight[axis]
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) + r_cut
        d = np.abs(arr[idx] - center)
        if box_length is not None:
            d = np.minimum(d, box_length - d)
        keep &= d <= half
    idx = idx[keep]
    return NeighborList(x=s.x[idx], y=s.y[idx], z=s.z[idx], mass=s.mass[idx])


def pp_leaf_forces(x, y, z, neighbors, kernel, box_length=None):
    """Raw kernel sums for one leaf against its shared neighbor list.

    Self pairs land on the s == 0 floor of eval_f_sr and contribute 0.
    Minimum-image separations when box_length is given.
    """
    dx = neighbors.x[None, :] - np.asarray(x)[:, None]
    dy = neighbors.y[None, :] - np.asarray(y)[:, None]
    dz = neighbors.z[None, :] - np.asarray(z)[:, None]
    if box_length is not None:
        for d in (dx, dy, dz):
            d -= box_length * np.round(d / box_length)
    s = dx * dx + dy * dy + dz * dz
    f = eval_f_sr(s, kernel) * neighbors.mass[None, :]
    return np.stack([(f * dx).sum(axis=1), (f * dy).sum(axis=1), (f * dz).sum(axis=1)], axis=1)


def _bulk_neighbor_lists(tree, r_cut, box_length=None):
    """Neighbor lists for every leaf from one vectorized leaf-pair pass.

    Same semantics as build_neighbor_list (tight-box intersection inflated
    by r_cut, then the clip), evaluated for all leaf pairs at once instead
    of walking the tree once per leaf.
    """
    leaves = tree.leaves
    tight = np.array([leaf.tight for leaf in leaves])     # (L, 3, 2)
    center = tight.mean(axis=2)
    half = 0.5 * (tight[:, :, 1] - tight[:, :, 0])
    touch = np.ones((len(leaves), len(leaves)), dtype=bool)
    for axis in range(3):
        d = np.abs(center[:, None, axis] - center[None, :, axis])
        if box_length is not None:
            d = np.minimum(d, box_length - d)
        touch &= d <= half[:, None, axis] + half[None, :, axis] + r_cut
    s = tree.store
    out = []
    for i, leaf in enumerate(leaves):
        js = np.flatnonzero(touch[i])
        idx = np.concatenate([np.arange(leaves[j].lo, leaves[j].hi) for j in js])
        keep = np.ones(idx.size, dtype=bool)
        for axis, arr in enumerate((s.x, s.y, s.z)):
            d = np.abs(arr[idx] - center[i, axis])
            if box_length is not None:
                d = np.minimum(d, box_length - d)
            keep &= d <= half[i, axis] + r_cut
        idx = idx[keep]
        out.append(NeighborList(x=s.x[idx], y=s.y[idx], z=s.z[idx], mass=s.mass[idx]))
    return out


def tree_forces(particles, kernel, leaf_capacity=200, box_length=None,
                bounds=None, n_threads=1, timers=None):
    """TREE mode: RCB build, per-leaf contiguous lists, per-leaf direct sums."""
    timers = timers or null_timers()
    with timers.phase("walk"):
        tree = rcb_build(particles, leaf_capacity=leaf_capacity, bounds=bounds)
        lists = _bulk_neighbor_lists(tree, kernel.r_cut, box_length)
    out = np.empty((len(particles), 3))

    def leaf_job(i):
        leaf = tree.leaves[i]
        s = tree.store
        acc = pp_leaf_forces(s.x[leaf.lo:leaf.hi], s.y[leaf.lo:leaf.hi],
                             s.z[leaf.lo:leaf.hi], lists[i], kernel, box_length)
        out[tree.order[leaf.lo:leaf.hi]] = acc

    with timers.phase("kernel"):
        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                list(pool.map(leaf_job, range(len(tree.leaves))))
        else:
            for i in range(len(tree.leaves)):
                leaf_job(i)
    return out


def p3m_direct_forces(particles, kernel, box_length=None, n_threads=1, timers=None):
    """P3M mode: cell-binned direct summation with the same pair kernel."""
    timers = timers or null_timers()
    x, y, z, mass = particles.x, particles.y, particles.z, particles.mass
    with timers.phase("walk"):
        if box_length is not None:
            lo = np.zeros(3)
            span = np.full(3, box_length)
        else:
            lo = np.array([x.min(), y.min(), z.min()])
            span = np.array([x.max(), y.max(), z.max()]) - lo + 1e-9
        n_cells = np.maximum(1, np.floor(span / kernel.r_cut).astype(int))
        cell_size = span / n_cells
        ci = np.minimum(((x - lo[0]) / cell_size[0]).astype(int), n_cells[0] - 1)
        cj = np.minimum(((y - lo[1]) / cell_size[1]).astype(int), n_cells[1] - 1)
        ck = np.minimum(((z - lo[2]) / cell_size[2]).astype(int), n_cells[2] - 1)
        flat = (ci * n_cells[1] + cj) * n_cells[2] + ck
        order = np.argsort(flat, kind="stable")
        sorted_flat = flat[order]
        starts = np.searchsorted(sorted_flat, np.arange(n_cells.prod() + 1))

    out = np.empty((len(particles), 3))

    with timers.phase("walk"):
        # 27-stencil neighbor table for every cell, vectorized
        ii, jj, kk = np.meshgrid(*[np.arange(n) for n in n_cells], indexing="ij")
        neighbor_table = np.empty((int(n_cells.prod()), 27), dtype=np.int64)
        col = 0
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    ni, nj, nk = ii + di, jj + dj, kk + dk
                    if box_length is not None:
                        ni %= n_cells[0]; nj %= n_cells[1]; nk %= n_cells[2]
                        flat_n = (ni * n_cells[1] + nj) * n_cells[2] + nk
                    else:
                        valid = ((0 <= ni) & (ni < n_cells[0]) & (0 <= nj)
                                 & (nj < n_cells[1]) & (0 <= nk) & (nk < n_cells[2]))
                        flat_n = np.where(valid, (ni * n_cells[1] + nj) * n_cells[2] + nk, -1)
                    neighbor_table[:, col] = flat_n.ravel()
                    col += 1
        neighbor_table.sort(axis=1)

    def members(c):
        return order[starts[c]:starts[c + 1]]

    def cell_job(cell):
        own = members(cell)
        if own.size == 0:
            return
        cells27 = neighbor_table[cell]
        cells27 = np.unique(cells27[cells27 >= 0])
        idx = np.concatenate([members(c) for c in cells27])
        nlist = NeighborList(x=x[idx], y=y[idx], z=z[idx], mass=mass[idx])
        out[own] = pp_leaf_forces(x[own], y[own], z[own], nlist, kernel, box_length)

    with timers.phase("kernel"):
        cells = range(int(n_cells.prod()))
        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                list(pool.map(cell_job, cells))
        else:
            for c in cells:
                cell_job(c)
    return out


def short_range_forces(particles, kernel, mode=TREE, box_length=None,
                       leaf_capacity=200, bounds=None, n_threads=1, timers=None):
    """Raw short-range kernel sums for every particle, by tree or by P3M."""
    if len(particles) == 0:
        return np.zeros((0, 3))
    if mode == TREE:
        return tree_forces(particles, kernel, leaf_capacity=leaf_capacity,
                           box_length=box_length, bounds=bounds,
                           n_threads=n_threads, timers=timers)
    if mode == P3M_DIRECT:
        return p3m_direct_forces(particles, kernel, box_length=box_length,
                                 n_threads=n_threads, timers=timers)
    raise ConfigurationError(f"unknown short-range mode {mode!r}")


def brute_force_short_range(particles, kernel, box_length=None, chunk=512):
    """O(N^2) cutoff direct sum; the oracle for every short-range path."""
    x, y, z, mass = particles.x, particles.y, particles.z, particles.mass
    nlist = NeighborList(x=x, y=y, z=z, mass=mass)
    out = np.empty((len(particles), 3))
    for lo in range(0, len(particles), chunk):
        hi = min(lo + chunk, len(particles))
        out[lo:hi] = pp_leaf_forces(x[lo:hi], y[lo:hi], z[lo:hi], nlist, kernel, box_length)
    return out
