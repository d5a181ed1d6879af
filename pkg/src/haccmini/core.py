"""Cosmological background: expansion rate, growth factor, kick/drift factors.

Internal units: lengths in Mpc, masses in M_sun, and time measured in units
of 1/H0 so that H0 == 1. With the momentum convention p = a^2 dx/dt, the
equations of motion in scale-factor time are

    dx = p * da / (a^3 H(a))        (drift)
    dp = F * da / (a   H(a))        (kick)

which is where the drift/kick integral factors below come from.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad, solve_ivp

# critical density today, M_sun / Mpc^3, divided by h^2
RHO_CRIT_OVER_H2 = 2.775e11


class NumericError(RuntimeError):
    """An iterative numeric procedure failed to converge."""


@dataclass(frozen=True)
class CosmologyParams:
    """Flat-universe matter + cosmological-constant background."""

    omega_m: float
    omega_lambda: float
    h: float = 0.71

    def __post_init__(self):
        if self.omega_m <= 0:
            raise ValueError("omega_m must be positive")
        if abs(self.omega_m + self.omega_lambda - 1.0) > 1e-10:
            raise ValueError("flat universe required: omega_m + omega_lambda must be 1")

    @property
    def rho_crit(self):
        """Critical density today, M_sun / Mpc^3."""
        return RHO_CRIT_OVER_H2 * self.h ** 2

    @property
    def G(self):
        """Newton's constant in internal units (rho_crit = 3 H0^2 / 8 pi G, H0 = 1)."""
        return 3.0 / (8.0 * math.pi * self.rho_crit)


@dataclass(frozen=True)
class Background:
    """Scale factor snapshot of the expansion."""

    a: float

    def __post_init__(self):
        if not 0 < self.a <= 1:
            raise ValueError(f"scale factor must lie in (0, 1], got {self.a}")

    @property
    def z(self):
        return 1.0 / self.a - 1.0

    @classmethod
    def from_redshift(cls, z):
        return cls(a=1.0 / (1.0 + z))


@dataclass(frozen=True)
class UnitSystem:
    """Conversions between internal units and (Mpc, M_sun, km/s).

    One internal velocity unit is Mpc per 1/H0, i.e. 100*h km/s.
    """

    h: float = 0.71

    @property
    def velocity_km_s(self):
        return 100.0 * self.h

    @property
    def time_gyr(self):
        # 1/H0 in Gyr: (Mpc/(km/s)) = 977.79 Gyr
        return 977.79222 / (100.0 * self.h)

    def velocity_to_internal(self, v_km_s):
        return np.asarray(v_km_s) / self.velocity_km_s

    def velocity_from_internal(self, v):
        return np.asarray(v) * self.velocity_km_s


def hubble_rate(a, cosmo):
    """H(a) in internal units (H0 = 1): sqrt(omega_m a^-3 + omega_lambda)."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a <= 0):
        raise ValueError("scale factor must be positive")
    return np.sqrt(cosmo.omega_m * a ** -3 + cosmo.omega_lambda)


def particle_mass(cosmo, box_length, n_particles):
    """Tracer mass m_p = rho_crit * omega_m * L^3 / N_p, in M_sun."""
    if box_length <= 0 or n_particles <= 0:
        raise ValueError("box_length and n_particles must be positive")
    return cosmo.rho_crit * cosmo.omega_m * box_length ** 3 / n_particles


@lru_cache(maxsize=32)
def _growth_solution(omega_m, omega_lambda):
    """Dense solution of the linear growth ODE, normalized to D(1) = 1.

    In scale-factor form:
        D'' + (3/a + E'/E) D' = 1.5 omega_m D / (a^5 E^2)
    started deep in matter domination where D = a.
    """
    a0 = 1e-4

    def rhs(a, y):
        d, dp = y
        e2 = omega_m * a ** -3 + omega_lambda
        ep_over_e = -1.5 * omega_m * a ** -4 / e2
        return [dp, -(3.0 / a + ep_over_e) * dp + 1.5 * omega_m * d / (a ** 5 * e2)]

    sol = solve_ivp(rhs, (a0, 1.0), [a0, 1.0], method="DOP853",
                    rtol=1e-11, atol=1e-14, dense_output=True)
    if not sol.success:
        raise NumericError(f"growth ODE integration failed: {sol.message}")
    d1 = sol.sol(1.0)[0]
    return sol.sol, d1


def growth_factor(a, cosmo):
    """Linear growth factor D(a), normalized so D(1) = 1."""
    arr = np.asarray(a, dtype=np.float64)
    if np.any(arr <= 0) or np.any(arr > 1):
        raise ValueError("scale factor must lie in (0, 1]")
    sol, d1 = _growth_solution(cosmo.omega_m, cosmo.omega_lambda)
    return sol(arr)[0] / d1


def growth_rate(a, cosmo):
    """Logarithmic growth rate f = dlnD/dlna."""
    arr = np.asarray(a, dtype=np.float64)
    if np.any(arr <= 0) or np.any(arr > 1):
        raise ValueError("scale factor must lie in (0, 1]")
    sol, _ = _growth_solution(cosmo.omega_m, cosmo.omega_lambda)
    d, dp = sol(arr)
    return arr * dp / d


def growth_factor_quadrature(a, cosmo):
    """Independent integral-form oracle: D(a) proportional to H(a) * int da' / (a' H(a'))^3."""
    def one(av):
        e = lambda x: math.sqrt(cosmo.omega_m * x ** -3 + cosmo.omega_lambda)
        integ = lambda x: (x * e(x)) ** -3
        val, _ = quad(integ, 0.0, av, epsabs=1e-14, epsrel=1e-12, limit=200)
        ref, _ = quad(integ, 0.0, 1.0, epsabs=1e-14, epsrel=1e-12, limit=200)
        return e(av) * val / ref
    if np.ndim(a) == 0:
        return one(float(a))
    return np.array([one(float(v)) for v in np.asarray(a)])


def _interval_integral(a0, a1, weight, cosmo):
    if not 0 < a0 <= a1 <= 1 + 1e-15:
        raise ValueError(f"need 0 < a0 <= a1 <= 1, got ({a0}, {a1})")
    if a0 == a1:
        return 0.0
    om, ol = cosmo.omega_m, cosmo.omega_lambda
    f = lambda a: weight(a) / math.sqrt(om * a ** -3 + ol)
    val, err = quad(f, a0, a1, epsabs=1e-14, epsrel=1e-12, limit=200)
    if not math.isfinite(val):
        raise NumericError("interval quadrature did not converge")
    return val


def drift_factor(a0, a1, cosmo):
    """int_{a0}^{a1} da / (a^3 H(a)); multiplies momenta in the stream map."""
    return _interval_integral(a0, a1, lambda a: a ** -3, cosmo)


def kick_factor(a0, a1, cosmo):
    """int_{a0}^{a1} da / (a H(a)); the elapsed-time weight of a kick."""
    return _interval_integral(a0, a1, lambda a: a ** -1, cosmo)


def accel_kick_weight(a0, a1, cosmo):
    """int_{a0}^{a1} da / (a^2 H(a)).

    Kick weight for forces stored without their 1/a prefactor: with
    F = K/a and dt = da/(aH), the momentum change of a frozen force is
    K * int da/(a^2 H) exactly.
    """
    return _interval_integral(a0, a1, lambda a: a ** -2, cosmo)
