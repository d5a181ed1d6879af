"""Initial conditions: Gaussian random density field + Zel'dovich displacement.

The field is realized by filtering grid white noise, which keeps Hermitian
symmetry exact and makes the realization a deterministic function of the
seed. Displacements use the same spectral inverse-Laplacian and gradient
multipliers as the PM solver, so the realized field and the force solver
agree about what a given mode means.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import pm as pm_mod
from .core import growth_factor, growth_rate, hubble_rate
from .particles import ParticleStore, lattice_store

POWER_LAW = "power_law"
TABULATED = "tabulated"


@dataclass(frozen=True)
class InputPowerSpectrum:
    """P(k) >= 0, either A * k^n or a log-log interpolated table."""

    form: str
    amplitude: float = 1.0
    index: float = 0.0
    table_k: tuple = ()
    table_p: tuple = ()

    @classmethod
    def power_law(cls, amplitude, index):
        if amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        return cls(form=POWER_LAW, amplitude=amplitude, index=index)

    @classmethod
    def tabulated(cls, k, p):
        k = np.asarray(k, dtype=float)
        p = np.asarray(p, dtype=float)
        if np.any(np.diff(k) <= 0):
            raise ValueError("tabulated k must be strictly increasing")
        if np.any(p < 0) or np.any(k <= 0):
            raise ValueError("tabulated spectrum needs k > 0 and P >= 0")
        return cls(form=TABULATED, table_k=tuple(k), table_p=tuple(p))

    @classmethod
    def from_file(cls, path):
        """Two-column text (k [1/Mpc], P [Mpc^3]); '#' comments."""
        data = np.loadtxt(path, comments="#", ndmin=2)
        return cls.tabulated(data[:, 0], data[:, 1])

    def __call__(self, k):
        k = np.asarray(k, dtype=float)
        if self.form == POWER_LAW:
            out = np.zeros_like(k)
            nz = k > 0
            out[nz] = self.amplitude * k[nz] ** self.index
            return out
        logk = np.log(np.asarray(self.table_k))
        logp = np.log(np.maximum(np.asarray(self.table_p), 1e-300))
        out = np.zeros_like(k)
        nz = k > 0
        out[nz] = np.exp(np.interp(np.log(k[nz]), logk, logp))
        return out


def gaussian_field(spectrum, n_g, box_length, seed):
    """Hermitian delta(k) lattice with <|delta_k|^2> = P(k) * N_c^2 / V.

    Unnormalized-DFT convention (matching the fft module): the continuum
    transform of delta(x) is V_cell * delta_k. Zero mode is zeroed.
    """
    if n_g < 8:
        raise ValueError("n_g must be at least 8")
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((n_g, n_g, n_g))
    # <|wk|^2> = N_c. The FFT of real noise is Hermitian only to roundoff;
    # averaging with its mirrored conjugate makes delta(-k) = conj(delta(k))
    # hold bitwise (complex addition commutes, so both sides round alike).
    wk = np.fft.fftn(white)
    mirror = np.ix_(*[(-np.arange(n_g)) % n_g] * 3)
    wk = 0.5 * (wk + np.conj(wk[mirror]))
    k1 = 2.0 * np.pi * np.fft.fftfreq(n_g, d=box_length / n_g)
    kk = np.sqrt(k1[:, None, None] ** 2 + k1[None, :, None] ** 2 + k1[None, None, :] ** 2)
    n_c = n_g ** 3
    amp = np.sqrt(spectrum(kk) * n_c / box_length ** 3)
    delta_k = wk * amp
    delta_k[0, 0, 0] = 0.0
    return delta_k


def zeldovich_displace(delta_k, a_in, cosmo, n_p, box_length, mass,
                       hard_limit=None):
    """Lattice particles displaced by x = q + D(a_in) psi(q), psi = -grad(laplacian^-1 delta).

    Momenta follow linear growth: p = a^2 dx/dt with dx/dt = a H f D psi.
    delta_k must live on an n_p^3 lattice; displacements are evaluated at
    the lattice sites exactly (no interpolation).
    """
    n_g = delta_k.shape[0]
    if delta_k.shape != (n_p, n_p, n_p) or n_g != n_p:
        raise ValueError("delta_k lattice must match the particle lattice")
    config = pm_mod.PMConfig(n_g=n_p, box_length=box_length,
                             r_cut=min(3.0 * box_length / n_p, 0.2 * box_length))
    ks = pm_mod.wavevectors(config)
    infl = pm_mod.influence_function(ks, config)
    psi = []
    for axis in range(3):
        grad = pm_mod.gradient_multiplier(ks, axis, config)
        psi_k = -grad * infl * delta_k
        psi.append(np.fft.ifftn(psi_k).real)  # normalized inverse: psi in x-space

    store = lattice_store(n_p, box_length, mass)
    d_in = growth_factor(a_in, cosmo)
    f_in = growth_rate(a_in, cosmo)
    h_in = hubble_rate(a_in, cosmo)
    vel_factor = a_in ** 2 * h_in * f_in * d_in  # p = a^2 xdot = a^3 H D' psi

    disp = np.stack([d_in * p.ravel() for p in psi], axis=1)
    max_disp = np.max(np.abs(disp)) if disp.size else 0.0
    spacing = box_length / n_p
    if hard_limit is not None and max_disp > hard_limit:
        raise ValueError(
            f"max displacement {max_disp:.4g} exceeds the hard limit {hard_limit:.4g}")
    if max_disp > spacing / 2:
        warnings.warn("Zel'dovich displacements exceed half the lattice spacing; "
                      "the realization is past its validity range", stacklevel=2)

    pos = store.positions + disp
    store.set_positions(pos)
    store.wrap(box_length)
    mom = (vel_factor / d_in) * disp
    store.set_momenta(mom)
    return store
