"""3-D block decomposition with particle overloading.

Each logical rank owns a rectangular block of the box; every particle is
ACTIVE in exactly the block containing it (half-open intervals break the
ties) and is replicated as a PASSIVE copy into every block whose halo --
the block inflated by overload_depth -- contains it, including copies
shifted by a box period. With depth >= r_cut, each rank can evaluate its
short-range forces without any particle communication; passive copies are
refreshed between long-range steps and turn active when a particle crosses
an ownership boundary.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np

from .particles import ACTIVE, PASSIVE, ParticleStore, concatenate


class ConfigurationError(ValueError):
    pass


class OverloadEscapeError(RuntimeError):
    """A particle moved beyond its previous owner's halo between refreshes."""


@dataclass(frozen=True)
class DomainGeometry:
    box_length: float
    rank_dims: tuple

    def __post_init__(self):
        if any(d < 1 for d in self.rank_dims) or len(self.rank_dims) != 3:
            raise ConfigurationError("rank_dims must be three positive counts")

    @property
    def n_ranks(self):
        d1, d2, d3 = self.rank_dims
        return d1 * d2 * d3

    def rank_coords(self, rank):
        d1, d2, d3 = self.rank_dims
        i, rest = divmod(rank, d2 * d3)
        j, k = divmod(rest, d3)
        return i, j, k

    def block(self, rank):
        """((lo, hi) per axis) of the rank's owned region, half-open."""
        coords = self.rank_coords(rank)
        out = []
        for axis, c in enumerate(coords):
            parts = self.rank_dims[axis]
            lo = c * self.box_length / parts
            hi = (c + 1) * self.box_length / parts
            out.append((lo, hi))
        return tuple(out)

    def min_block_extent(self):
        return min(self.box_length / d for d in self.rank_dims)

    def owner_of(self, x, y, z):
        """Rank owning each position (positions must lie in [0, L))."""
        d1, d2, d3 = self.rank_dims
        i = np.minimum((np.asarray(x) / self.box_length * d1).astype(int), d1 - 1)
        j = np.minimum((np.asarray(y) / self.box_length * d2).astype(int), d2 - 1)
        k = np.minimum((np.asarray(z) / self.box_length * d3).astype(int), d3 - 1)
        return (i * d2 + j) * d3 + k


def decompose(box_length, rank_dims, n_ranks=None):
    """Near-equal 3-D blocks; rejects a rank-dim product that mismatches."""
    geometry = DomainGeometry(box_length=float(box_length), rank_dims=tuple(rank_dims))
    if n_ranks is not None and geometry.n_ranks != n_ranks:
        raise ConfigurationError(
            f"rank_dims product {geometry.n_ranks} != communicator size {n_ranks}")
    return geometry


@dataclass
class OverloadedSet:
    """Per-rank particle store with ACTIVE/PASSIVE status flags."""

    rank: int
    store: ParticleStore
    overload_depth: float
    geometry: DomainGeometry

    @property
    def n_active(self):
        return int(np.count_nonzero(self.store.status == ACTIVE))

    @property
    def n_passive(self):
        return int(np.count_nonzero(self.store.status == PASSIVE))

    def active(self):
        return self.store.select(self.store.status == ACTIVE)


def _halo_members(store, block, depth, box_length):
    """Index/shift pairs whose shifted position falls in block +- depth.

    Returns (indices, shifted_positions). A particle can enter the same halo
    through more than one periodic shift (small rank counts); each entry
    becomes its own replica.
    """
    x = np.column_stack([store.x, store.y, store.z])
    idx_out, pos_out = [], []
    for shift in product((-box_length, 0.0, box_length), repeat=3):
        xs = x + np.asarray(shift)
        m = np.ones(len(store), dtype=bool)
        for axis in range(3):
            lo, hi = block[axis]
            m &= (xs[:, axis] >= lo - depth) & (xs[:, axis] < hi + depth)
        if m.any():
            idx_out.append(np.flatnonzero(m))
            pos_out.append(xs[m])
    if not idx_out:
        return np.empty(0, dtype=int), np.empty((0, 3))
    return np.concatenate(idx_out), np.vstack(pos_out)


def _in_block(pos, block):
    m = np.ones(pos.shape[0], dtype=bool)
    for axis in range(3):
        lo, hi = block[axis]
        m &= (pos[:, axis] >= lo) & (pos[:, axis] < hi)
    return m


def _build_rank_set(rank, source, geometry, depth):
    """Active + passive store of `rank` from a globally complete source."""
    block = geometry.block(rank)
    idx, pos = _halo_members(source, block, depth, geometry.box_length)
    if idx.size == 0:
        return OverloadedSet(rank=rank, store=ParticleStore.empty(0),
                             overload_depth=depth, geometry=geometry)
    active = _in_block(pos, block)
    # canonical order: actives by id, then passives by (id, shifted position)
    key = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], source.ids[idx], ~active))
    idx, pos, active = idx[key], pos[key], active[key]
    sub = source.select(idx)
    sub.set_positions(pos)
    sub.status = np.where(active, ACTIVE, PASSIVE).astype(np.uint8)
    return OverloadedSet(rank=rank, store=sub, overload_depth=depth, geometry=geometry)


def assign_and_overload(particles, geometry, overload_depth):
    """Distribute a global particle set into per-rank overloaded sets."""
    if overload_depth >= geometry.min_block_extent() / 2:
        raise ConfigurationError("overload_depth must be below half the smallest block extent")
    if overload_depth < 0:
        raise ConfigurationError("overload_depth must be non-negative")
    src = particles.copy()
    src.wrap(geometry.box_length)
    return [_build_rank_set(r, src, geometry, overload_depth)
            for r in range(geometry.n_ranks)]


def refresh_overload(sets, geometry, comm=None):
    """Rebuild every rank's passive shell from its neighbors' active sets.

    Bulk-synchronous: each rank wraps its actives, checks none escaped its
    own halo since the last refresh, sends the relevant ones to each peer
    (through `comm` when given), and rebuilds active + passive membership.
    Ownership flips happen here: a particle that drifted across a block
    boundary comes back ACTIVE in its new block and PASSIVE elsewhere.
    """
    depth = sets[0].overload_depth
    box = geometry.box_length
    outgoing = {}
    for s in sets:
        act = s.active()
        act.wrap(box)
        block = geometry.block(s.rank)
        idx, pos = _halo_members(act, block, depth, box)
        covered = np.zeros(len(act), dtype=bool)
        covered[idx] = True
        if not covered.all():
            missing = act.ids[~covered]
            raise OverloadEscapeError(
                f"{missing.size} particle(s) left rank {s.rank}'s halo since the last "
                f"refresh (first id {missing[0]}); refresh cadence is too sparse")
        outgoing[s.rank] = act

    n = geometry.n_ranks
    if comm is not None:
        # send each peer only the actives that fall inside its halo
        for src_rank, act in outgoing.items():
            for dst in range(n):
                if dst == src_rank:
                    continue
                idx, _ = _halo_members(act, geometry.block(dst), depth, box)
                comm.send(src_rank, dst, act.select(np.unique(idx)))
        received = {
            dst: [outgoing[dst]] + [comm.recv(src, dst) for src in range(n) if src != dst]
            for dst in range(n)
        }
    else:
        everyone = list(outgoing.values())
        received = {dst: everyone for dst in range(n)}

    new_sets = []
    for s in sets:
        source = concatenate([r for r in received[s.rank] if len(r)])
        new_sets.append(_build_rank_set(s.rank, source, geometry, depth))
    return new_sets


def gather_active(sets):
    """Global store of every rank's ACTIVE particles, sorted by id."""
    merged = concatenate([s.active() for s in sets])
    order = np.argsort(merged.ids, kind="stable")
    return merged.select(order)
