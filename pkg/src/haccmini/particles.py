"""Structure-of-arrays particle storage.

Positions are comoving (Mpc), momenta follow the p = a^2 dx/dt convention
in internal units (H0 = 1). Every per-particle quantity lives in its own
contiguous array so that partitioning, neighbor-list assembly and I/O can
work on flat buffers.
"""

import numpy as np

ACTIVE = np.uint8(1)
PASSIVE = np.uint8(0)


class ParticleStore:
    """SOA container: x, y, z, px, py, pz, mass, ids, status."""

    POS_FIELDS = ("x", "y", "z")
    VEL_FIELDS = ("px", "py", "pz")
    OTHER_FIELDS = ("mass", "ids", "status")
    FIELDS = POS_FIELDS + VEL_FIELDS + OTHER_FIELDS

    def __init__(self, x, y, z, px, py, pz, mass, ids, status=None):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.z = np.asarray(z, dtype=np.float64)
        self.px = np.asarray(px, dtype=np.float64)
        self.py = np.asarray(py, dtype=np.float64)
        self.pz = np.asarray(pz, dtype=np.float64)
        self.mass = np.asarray(mass, dtype=np.float64)
        self.ids = np.asarray(ids, dtype=np.uint64)
        n = self.x.size
        if status is None:
            status = np.full(n, ACTIVE, dtype=np.uint8)
        self.status = np.asarray(status, dtype=np.uint8)
        for name in self.FIELDS:
            if getattr(self, name).shape != (n,):
                raise ValueError(f"field {name!r} is not a flat array of length {n}")

    @classmethod
    def empty(cls, n=0):
        z = np.zeros(n)
        return cls(z, z.copy(), z.copy(), z.copy(), z.copy(), z.copy(),
                   np.ones(n), np.arange(n, dtype=np.uint64))

    def __len__(self):
        return self.x.size

    @property
    def positions(self):
        """(N, 3) view-cost copy of positions."""
        return np.column_stack([self.x, self.y, self.z])

    @property
    def momenta(self):
        return np.column_stack([self.px, self.py, self.pz])

    def set_positions(self, pos):
        self.x[:], self.y[:], self.z[:] = pos[:, 0], pos[:, 1], pos[:, 2]

    def set_momenta(self, mom):
        self.px[:], self.py[:], self.pz[:] = mom[:, 0], mom[:, 1], mom[:, 2]

    @property
    def active_mask(self):
        return self.status == ACTIVE

    def select(self, index):
        """New store holding the rows picked by a mask or index array."""
        return ParticleStore(*[getattr(self, f)[index] for f in self.FIELDS])

    def copy(self):
        return ParticleStore(*[getattr(self, f).copy() for f in self.FIELDS])

    def permute_in_place(self, order):
        """Reorder all arrays by `order`.

        Applied in two passes (position/momentum arrays first, the
        remaining arrays after) so a recorded swap plan touches each
        cache-friendly group of buffers together.
        """
        for f in self.POS_FIELDS + self.VEL_FIELDS:
            getattr(self, f)[:] = getattr(self, f)[order]
        for f in self.OTHER_FIELDS:
            getattr(self, f)[:] = getattr(self, f)[order]

    def wrap(self, box_length):
        """Periodic wrap of positions into [0, box_length)."""
        for f in self.POS_FIELDS:
            arr = getattr(self, f)
            arr %= box_length
            # x % L can return L when x is a tiny negative number
            arr[arr == box_length] = 0.0


def concatenate(stores):
    if not stores:
        return ParticleStore.empty(0)
    return ParticleStore(*[
        np.concatenate([getattr(s, f) for s in stores]) for f in ParticleStore.FIELDS
    ])


def lattice_store(n_per_dim, box_length, mass, offset=0.0):
    """Particles on a cubic lattice (site offset in units of the spacing)."""
    spacing = box_length / n_per_dim
    idx = np.arange(n_per_dim)
    qx, qy, qz = np.meshgrid(idx, idx, idx, indexing="ij")
    x = (qx.ravel() + offset) * spacing
    y = (qy.ravel() + offset) * spacing
    z = (qz.ravel() + offset) * spacing
    n = n_per_dim ** 3
    zeros = np.zeros(n)
    return ParticleStore(x, y, z, zeros, zeros.copy(), zeros.copy(),
                         np.full(n, mass), np.arange(n, dtype=np.uint64))
