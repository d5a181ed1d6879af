"""Pencil-decomposed 3-D FFT over logical ranks.

The global grid is tiled over a 2-D grid of logical ranks. A forward
transform runs z-pencil -> 1-D FFTs along z -> transpose within rank-grid
rows -> 1-D FFTs along y -> transpose within rank-grid columns -> 1-D FFTs
along x. Each transpose moves data only between ranks that share a row or
a column of the rank grid, and every exchange is a two-phase (all sends,
then all receives) schedule, so no ordering of rank execution can deadlock.

Transforms are unnormalized: inverse(forward(x)) == N_g * x. The 1-D line
transforms use numpy's FFT; `dft3_direct` is the independent brute-force
oracle (explicit DFT matrices, no fast algorithm).

Logical ranks can execute on real threads; the Communicator is the only
shared structure and delivers messages reliably and in send order per
(source, destination) pair.
"""

import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor

import numpy as np


class ContractError(ValueError):
    """Input violates an interface contract (shape, layout, symmetry)."""


def split_extents(n, parts):
    """Split range(n) into `parts` contiguous near-equal extents."""
    base, extra = divmod(n, parts)
    out, lo = [], 0
    for i in range(parts):
        hi = lo + base + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


class PencilLayout:
    """Ownership map of a distributed 3-D grid.

    axis_owner[d] says which rank-grid coordinate (0 or 1) indexes the
    split of axis d, or None when the axis is kept whole on every rank.
    """

    def __init__(self, global_dims, rank_grid, axis_owner):
        self.global_dims = tuple(int(n) for n in global_dims)
        self.rank_grid = (int(rank_grid[0]), int(rank_grid[1]))
        self.axis_owner = tuple(axis_owner)
        if sorted(o for o in axis_owner if o is not None) != [0, 1]:
            raise ContractError("axis_owner must use each rank-grid coordinate exactly once")
        self._extents = []
        for d, owner in enumerate(self.axis_owner):
            if owner is None:
                self._extents.append([(0, self.global_dims[d])])
            else:
                self._extents.append(split_extents(self.global_dims[d], self.rank_grid[owner]))

    @property
    def n_ranks(self):
        return self.rank_grid[0] * self.rank_grid[1]

    def rank_coords(self, rank):
        return divmod(rank, self.rank_grid[1])

    def owned_extent(self, rank):
        p = self.rank_coords(rank)
        ext = []
        for d, owner in enumerate(self.axis_owner):
            ext.append(self._extents[d][0] if owner is None else self._extents[d][p[owner]])
        return tuple(ext)

    def block_shape(self, rank):
        return tuple(hi - lo for lo, hi in self.owned_extent(rank))

    def scatter(self, grid):
        """Full array -> {rank: owned block copy}."""
        if grid.shape != self.global_dims:
            raise ContractError(f"grid shape {grid.shape} does not match layout {self.global_dims}")
        out = {}
        for r in range(self.n_ranks):
            (x0, x1), (y0, y1), (z0, z1) = self.owned_extent(r)
            out[r] = grid[x0:x1, y0:y1, z0:z1].copy()
        return out

    def gather(self, blocks, dtype=None):
        """{rank: block} -> full array."""
        dtype = dtype or next(iter(blocks.values())).dtype
        grid = np.empty(self.global_dims, dtype=dtype)
        for r in range(self.n_ranks):
            (x0, x1), (y0, y1), (z0, z1) = self.owned_extent(r)
            grid[x0:x1, y0:y1, z0:z1] = blocks[r]
        return grid


def z_pencils(dims, rank_grid):
    return PencilLayout(dims, rank_grid, (0, 1, None))


def y_pencils(dims, rank_grid):
    return PencilLayout(dims, rank_grid, (0, None, 1))


def x_pencils(dims, rank_grid):
    return PencilLayout(dims, rank_grid, (None, 0, 1))


class Communicator:
    """In-memory message layer for logical ranks.

    Per (src, dst) pair, messages arrive in send order and are never
    dropped. Safe for concurrent send/receive from rank threads.
    """

    def __init__(self, n_ranks):
        self.n_ranks = n_ranks
        self._queues = {}
        self._cond = threading.Condition()
        self.sent_messages = 0
        self.sent_bytes = 0

    def send(self, src, dst, payload):
        with self._cond:
            self._queues.setdefault((src, dst), deque()).append(payload)
            self.sent_messages += 1
            if isinstance(payload, np.ndarray):
                self.sent_bytes += payload.nbytes
            self._cond.notify_all()

    def recv(self, src, dst, timeout=60.0):
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._queues.get((src, dst)), timeout=timeout)
            if not ok:
                raise RuntimeError(f"recv timeout waiting for message {src} -> {dst}")
            return self._queues[(src, dst)].popleft()

    def stats(self):
        return {"messages": self.sent_messages, "bytes": self.sent_bytes}


def _intersect(ext_a, ext_b):
    out = []
    for (a0, a1), (b0, b1) in zip(ext_a, ext_b):
        lo, hi = max(a0, b0), min(a1, b1)
        if lo >= hi:
            return None
        out.append((lo, hi))
    return tuple(out)


def _local_slices(region, extent):
    return tuple(slice(lo - e0, hi - e0) for (lo, hi), (e0, _) in zip(region, extent))


def transpose(blocks, from_layout, to_layout, comm, run_phase=None):
    """Redistribute blocks between two layouts of the same global grid.

    Values are preserved exactly; only ownership changes. The exchange is
    two-phase (every rank enqueues all its sends, then every rank drains
    its receives in deterministic source order), which makes the schedule
    acyclic and deadlock-free for any rank execution order.
    """
    if from_layout.global_dims != to_layout.global_dims:
        raise ContractError("layouts cover different global grids")
    n_ranks = from_layout.n_ranks
    run_phase = run_phase or (lambda fn: [fn(r) for r in range(n_ranks)])
    out = {}

    def send_phase(src):
        src_ext = from_layout.owned_extent(src)
        for dst in range(n_ranks):
            region = _intersect(src_ext, to_layout.owned_extent(dst))
            if region is None:
                continue
            piece = blocks[src][_local_slices(region, src_ext)]
            if dst == src:
                continue  # placed locally in the receive phase
            comm.send(src, dst, np.ascontiguousarray(piece))

    def recv_phase(dst):
        dst_ext = to_layout.owned_extent(dst)
        block = np.empty(to_layout.block_shape(dst), dtype=blocks[dst].dtype)
        for src in range(n_ranks):
            region = _intersect(from_layout.owned_extent(src), dst_ext)
            if region is None:
                continue
            if src == dst:
                piece = blocks[src][_local_slices(region, from_layout.owned_extent(src))]
            else:
                piece = comm.recv(src, dst)
            block[_local_slices(region, dst_ext)] = piece
        out[dst] = block

    run_phase(send_phase)
    run_phase(recv_phase)
    return out


class PencilFFT:
    """Real-to-complex / complex-to-real 3-D FFT on a 2-D rank grid."""

    def __init__(self, n_g, rank_grid=(1, 1), comm=None, n_threads=1):
        dims = (n_g, n_g, n_g) if np.isscalar(n_g) else tuple(n_g)
        self.dims = dims
        self.rank_grid = tuple(rank_grid)
        self.n_cells = int(np.prod(dims))
        self.layout_z = z_pencils(dims, self.rank_grid)
        self.layout_y = y_pencils(dims, self.rank_grid)
        self.layout_x = x_pencils(dims, self.rank_grid)
        self.comm = comm or Communicator(self.layout_z.n_ranks)
        self.n_threads = max(1, int(n_threads))
        self._pool = None
        if self.n_threads > 1:
            self._pool = ThreadPoolExecutor(max_workers=self.n_threads)

    def _run_phase(self, fn):
        ranks = range(self.layout_z.n_ranks)
        if self._pool is None:
            for r in ranks:
                fn(r)
        else:
            list(self._pool.map(fn, ranks))

    def _line_ffts(self, blocks, axis, direction):
        def work(rank):
            if direction == "forward":
                blocks[rank] = np.fft.fft(blocks[rank], axis=axis)
            else:
                n = self.dims[axis]
                blocks[rank] = np.fft.ifft(blocks[rank], axis=axis) * n
        self._run_phase(work)

    def _pipeline(self, blocks, direction):
        if direction == "forward":
            self._line_ffts(blocks, 2, "forward")
            blocks = transpose(blocks, self.layout_z, self.layout_y, self.comm, self._run_phase)
            self._line_ffts(blocks, 1, "forward")
            blocks = transpose(blocks, self.layout_y, self.layout_x, self.comm, self._run_phase)
            self._line_ffts(blocks, 0, "forward")
        else:
            self._line_ffts(blocks, 0, "inverse")
            blocks = transpose(blocks, self.layout_x, self.layout_y, self.comm, self._run_phase)
            self._line_ffts(blocks, 1, "inverse")
            blocks = transpose(blocks, self.layout_y, self.layout_z, self.comm, self._run_phase)
            self._line_ffts(blocks, 2, "inverse")
        return blocks

    def forward(self, real_grid):
        """Unnormalized forward DFT of a real grid; returns the full complex cube."""
        real_grid = np.asarray(real_grid)
        if real_grid.shape != self.dims:
            raise ContractError(f"grid shape {real_grid.shape} does not match {self.dims}")
        if not np.all(np.isfinite(real_grid)):
            raise ContractError("grid values must be finite")
        blocks = self.layout_z.scatter(real_grid.astype(np.complex128))
        blocks = self._pipeline(blocks, "forward")
        return self.layout_x.gather(blocks, dtype=np.complex128)

    def inverse(self, spectrum):
        """Unnormalized inverse DFT of a Hermitian spectrum; returns a real grid."""
        spectrum = np.asarray(spectrum, dtype=np.complex128)
        if spectrum.shape != self.dims:
            raise ContractError(f"spectrum shape {spectrum.shape} does not match {self.dims}")
        self._check_hermitian(spectrum)
        blocks = self.layout_x.scatter(spectrum)
        blocks = self._pipeline(blocks, "inverse")
        out = self.layout_z.gather(blocks, dtype=np.complex128)
        return out.real.copy()

    @staticmethod
    def _check_hermitian(spec, tol=1e-8):
        mirrored = np.conj(spec[tuple(np.ix_(*[(-np.arange(n)) % n for n in spec.shape]))])
        scale = np.max(np.abs(spec))
        if scale > 0 and np.max(np.abs(spec - mirrored)) > tol * scale:
            raise ContractError("spectrum is not Hermitian-symmetric")


def dft1_matrix(n, sign):
    j = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(j, j) / n)


def dft3_direct(x, sign=-1):
    """Brute-force separable DFT (explicit matrices, O(n^2) per line)."""
    x = np.asarray(x, dtype=np.complex128)
    for axis, n in enumerate(x.shape):
        m = dft1_matrix(n, sign)
        x = np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)
    return x
