"""Long/medium-range force solver on a periodic grid.

Pipeline: cloud-in-cell deposit of active particles -> density contrast ->
one forward FFT -> per-axis multiply by (gradient x filter x influence x
window compensation x Poisson prefactor) -> one inverse FFT per axis ->
trilinear gather back at particle positions. Exactly four FFT invocations
per solve. All spectral work is double precision.

The Poisson prefactor follows from
    nabla^2 phi = 4 pi G a^2 rho_mean_phys(a) delta = (4 pi G rho_mean / a) delta
with rho_mean the comoving mean density of the deposited particles, so the
force grids carry an explicit 1/a at the solve epoch.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fft import ContractError, PencilFFT


@dataclass(frozen=True)
class PMConfig:
    """Grid geometry and spectral-filter parameters."""

    n_g: int
    box_length: float
    sigma: float = 0.8
    n_s: int = 3
    r_cut: float = None  # defaults to 3 grid spacings
    window_power: int = 1

    def __post_init__(self):
        if self.n_g < 8:
            raise ValueError("n_g must be at least 8")
        if self.box_length <= 0:
            raise ValueError("box_length must be positive")
        if self.r_cut is None:
            object.__setattr__(self, "r_cut", 3.0 * self.delta)
        if not 0 < self.r_cut < self.box_length / 4:
            raise ValueError("r_cut must lie in (0, box_length/4)")

    @property
    def delta(self):
        return self.box_length / self.n_g

    @property
    def n_cells(self):
        return self.n_g ** 3


@dataclass
class DensityGrid:
    """Mean-free density contrast delta_m plus the mean it was taken against."""

    contrast: np.ndarray
    rho_mean: float  # comoving mean density of the deposited mass, M_sun/Mpc^3
    config: PMConfig


@dataclass
class ForceGrids:
    """Components of -grad(phi) on the grid, solved at scale factor `a`."""

    fx: np.ndarray
    fy: np.ndarray
    fz: np.ndarray
    a: float

    def component(self, axis):
        return (self.fx, self.fy, self.fz)[axis]


def _cic_indices_weights(x, y, z, n_g, box_length):
    delta = box_length / n_g
    pts = []
    for arr in (x, y, z):
        arr = np.asarray(arr, dtype=np.float64)
        if np.any(~np.isfinite(arr)):
            raise ContractError("particle positions must be finite")
        g = (arr % box_length) / delta
        i0 = np.floor(g).astype(np.int64)
        f = g - i0
        pts.append((i0 % n_g, f))
    return pts


def cic_deposit_mass(x, y, z, mass, n_g, box_length):
    """Raw CIC mass grid: trilinear weights onto the 8 surrounding nodes."""
    (ix, fx), (iy, fy), (iz, fz) = _cic_indices_weights(x, y, z, n_g, box_length)
    mass = np.asarray(mass, dtype=np.float64)
    grid = np.zeros(n_g ** 3)
    for dx, wx in ((0, 1.0 - fx), (1, fx)):
        jx = (ix + dx) % n_g
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            jy = (iy + dy) % n_g
            wxy = wx * wy
            for dz, wz in ((0, 1.0 - fz), (1, fz)):
                jz = (iz + dz) % n_g
                flat = (jx * n_g + jy) * n_g + jz
                grid += np.bincount(flat, weights=mass * wxy * wz, minlength=n_g ** 3)
    return grid.reshape(n_g, n_g, n_g)


def cic_deposit(particles, config):
    """Density contrast of the ACTIVE particles on the PM grid."""
    sel = particles.active_mask
    mass = particles.mass[sel]
    if mass.size == 0:
        raise ContractError("cannot deposit an empty active set")
    grid = cic_deposit_mass(particles.x[sel], particles.y[sel], particles.z[sel],
                            mass, config.n_g, config.box_length)
    mean_cell = mass.sum() / config.n_cells
    contrast = grid / mean_cell - 1.0
    rho_mean = mass.sum() / config.box_length ** 3
    return DensityGrid(contrast=contrast, rho_mean=rho_mean, config=config)


def cic_interpolate(forces, x, y, z, config):
    """Trilinear gather of the force grids; weights identical to the deposit."""
    (ix, fx), (iy, fy), (iz, fz) = _cic_indices_weights(x, y, z, config.n_g, config.box_length)
    n_g = config.n_g
    out = np.zeros((np.size(x), 3))
    comps = (forces.fx, forces.fy, forces.fz)
    for dx, wx in ((0, 1.0 - fx), (1, fx)):
        jx = (ix + dx) % n_g
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            jy = (iy + dy) % n_g
            wxy = wx * wy
            for dz, wz in ((0, 1.0 - fz), (1, fz)):
                jz = (iz + dz) % n_g
                w = wxy * wz
                for c in range(3):
                    out[:, c] += w * comps[c][jx, jy, jz]
    return out


# ---------------------------------------------------------------------------
# spectral kernels

def _axis_sinc_half(k, config):
    """sin(k delta / 2) / (k delta / 2), the per-axis CIC half-window."""
    th = np.asarray(k) * config.delta / 2.0
    out = np.ones_like(th, dtype=np.float64)
    nz = th != 0
    out[nz] = np.sin(th[nz]) / th[nz]
    return out


def filter_kernel(k_axes, config):
    """Isotropizing attenuation: exp(-k^2 sigma^2/4) * prod_axis sinc(k delta/2)^n_s.

    sigma is in grid units; the sinc factor is read as (2/(k delta)) sin(k delta/2)
    so the zero-frequency limit is 1.
    """
    kx, ky, kz = (np.asarray(k) for k in k_axes)
    k2 = kx ** 2 + ky ** 2 + kz ** 2
    att = np.exp(-k2 * (config.sigma * config.delta) ** 2 / 4.0)
    for k in (kx, ky, kz):
        att = att * _axis_sinc_half(k, config) ** config.n_s
    return att


def _ktilde2_axis(k, config):
    """Sixth-order discrete -Laplacian eigenvalue along one axis.

    Truncated arcsin^2 series: (4/delta^2)(u + u^2/3 + 8u^3/45),
    u = sin^2(k delta / 2); equals k^2 + O(k^8 delta^6).
    """
    u = np.sin(np.asarray(k) * config.delta / 2.0) ** 2
    return (4.0 / config.delta ** 2) * (u + u ** 2 / 3.0 + 8.0 * u ** 3 / 45.0)


def influence_function(k_axes, config):
    """Spectral inverse Laplacian -1/ktilde^2; the zero mode maps to 0."""
    k2 = sum(_ktilde2_axis(k, config) for k in k_axes)
    out = np.zeros_like(np.asarray(k2, dtype=np.float64))
    nz = k2 != 0
    out[nz] = -1.0 / k2[nz]
    return out


def gradient_multiplier(k_axes, axis, config):
    """Fourth-order spectral derivative i (8 sin(k d) - sin(2 k d)) / (6 d).

    Zero exactly at the Nyquist angle: sin(pi) in floats is ~1e-16, which
    would leave a spurious imaginary residue on the self-conjugate plane.
    """
    th = np.asarray(k_axes[axis]) * config.delta
    out = 1j * (8.0 * np.sin(th) - np.sin(2.0 * th)) / (6.0 * config.delta)
    return np.where(np.isclose(np.abs(th), np.pi, rtol=0.0, atol=1e-12), 0.0, out)


def wavevectors(config):
    """Per-axis wavevector arrays broadcastable to the full grid."""
    k1 = 2.0 * np.pi * np.fft.fftfreq(config.n_g, d=config.delta)
    kx = k1[:, None, None]
    ky = k1[None, :, None]
    kz = k1[None, None, :]
    return kx, ky, kz


@lru_cache(maxsize=4)
def _static_multipliers(config):
    """Per-axis -grad * filter * influence * window compensation / N_c.

    The CIC deposit and gather each smooth the chain by one sinc^2 per axis;
    compensating `window_power` sinc factors is calibrated so the filtered
    two-particle force meets the softened Newtonian at r_cut (the kernel-fit
    tests pin this). The time-dependent Poisson prefactor is applied
    separately in solve_forces.
    """
    ks = wavevectors(config)
    filt = filter_kernel(ks, config)
    infl = influence_function(ks, config)
    if config.window_power:
        comp = np.ones_like(filt)
        for k in ks:
            comp = comp * _axis_sinc_half(k, config) ** (-config.window_power)
        base = filt * infl * comp
    else:
        base = filt * infl
    base /= config.n_cells
    out = []
    for axis in range(3):
        t = -gradient_multiplier(ks, axis, config) * base
        t[0, 0, 0] = 0.0
        out.append(t)
    return tuple(out)


@lru_cache(maxsize=4)
def _fft_for(config, rank_grid=(1, 1)):
    return PencilFFT(config.n_g, rank_grid=rank_grid)


def poisson_prefactor(rho_mean, a, cosmo):
    """4 pi G a^2 rho_mean_phys(a) = 4 pi G rho_mean / a, internal units."""
    return 4.0 * np.pi * cosmo.G * rho_mean / a


def solve_forces(density, background, cosmo, rank_grid=(1, 1)):
    """Force grids -grad(phi) from a mean-free density contrast.

    One forward FFT of the contrast, then one inverse FFT per axis of the
    multiplied spectrum: exactly four transforms.
    """
    config = density.config
    if abs(density.contrast.mean()) > 1e-8:
        raise ContractError("density contrast must be mean-free")
    fft = _fft_for(config, rank_grid)
    spec = fft.forward(density.contrast)
    spec *= poisson_prefactor(density.rho_mean, background.a, cosmo)
    comps = []
    for t in _static_multipliers(config):
        comps.append(fft.inverse(t * spec))
    return ForceGrids(fx=comps[0], fy=comps[1], fz=comps[2], a=background.a)


def pm_accelerations(particles, config, background, cosmo, rank_grid=(1, 1)):
    """Deposit ACTIVE particles, solve, gather at ALL particles."""
    density = cic_deposit(particles, config)
    grids = solve_forces(density, background, cosmo, rank_grid)
    acc = cic_interpolate(grids, particles.x, particles.y, particles.z, config)
    return acc, grids


def kernel_force_at(offsets, config, cosmo, background, rho_mean=None,
                    sigma=None, n_s=None):
    """Exact spectral evaluation of the solver's force kernel.

    Force at `offsets` from a unit point source at the origin, computed by
    direct summation of the composed multiplier over all modes (no deposit
    and no trilinear gather, so no sub-cell noise). This isolates the
    directional systematics of the spectral chain; sigma / n_s overrides
    allow filter on/off comparisons.
    """
    if sigma is not None or n_s is not None:
        config = PMConfig(n_g=config.n_g, box_length=config.box_length,
                          sigma=config.sigma if sigma is None else sigma,
                          n_s=config.n_s if n_s is None else n_s,
                          r_cut=config.r_cut, window_power=config.window_power)
    rho = rho_mean if rho_mean is not None else 1.0 / config.box_length ** 3
    pref = poisson_prefactor(rho, background.a, cosmo)
    k1 = 2.0 * np.pi * np.fft.fftfreq(config.n_g, d=config.delta)
    mults = _static_multipliers(config)
    offsets = np.atleast_2d(offsets)
    out = np.empty((offsets.shape[0], 3))
    for i, r in enumerate(offsets):
        ex = np.exp(1j * k1 * r[0])
        ey = np.exp(1j * k1 * r[1])
        ez = np.exp(1j * k1 * r[2])
        for c in range(3):
            # unit point source: delta_k = N_c for every mode
            val = np.einsum("ijk,i,j,k->", mults[c], ex, ey, ez)
            out[i, c] = pref * config.n_cells * val.real
    return out
