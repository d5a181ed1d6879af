"""Sub-cycled split-operator time evolution in scale-factor time.

One full step over [a0, a1] is

    half long-range kick . (stream-kick-stream)^n_c . half long-range kick

with the grid force frozen across the sub-cycles: the opening kick uses a
deposit at the step-start positions, the closing kick a deposit at the
step-end positions (required for a second-order map). Streams are exact
for frozen momenta (drift_factor); kicks weight the frozen force with the
(1/a)-refined kick integral.

All ranks' particles (active and passive alike) are moved; only actives
deposit. The overload shells are refreshed once per full step.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import domain as domain_mod
from . import pm as pm_mod
from . import shortrange as sr_mod
from .core import Background, accel_kick_weight, drift_factor
from .timers import null_timers


@dataclass(frozen=True)
class StepperConfig:
    n_c: int = 5                 # short-range sub-cycles per long-range step
    a_in: float = 1.0 / 26.0
    a_final: float = 1.0
    n_steps: int = 30

    def __post_init__(self):
        if not 1 <= self.n_c <= 32:
            raise ValueError("n_c must lie in [1, 32]")
        if not 0 < self.a_in < self.a_final <= 1.0:
            raise ValueError("need 0 < a_in < a_final <= 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")

    def step_edges(self):
        return np.linspace(self.a_in, self.a_final, self.n_steps + 1)


def long_range_kick(store, acc, a_solved, a0, a1, cosmo):
    """p += (a_solved * acc) * int da/(a^2 H): exact for a frozen grid force.

    `acc` carries the 1/a_solved prefactor baked in at the solve epoch;
    multiplying by a_solved recovers the scale-factor-free kernel force so
    the kick integral can apply the 1/a weighting exactly.
    """
    if a1 == a0:
        return
    w = a_solved * accel_kick_weight(a0, a1, cosmo)
    store.px += acc[:, 0] * w
    store.py += acc[:, 1] * w
    store.pz += acc[:, 2] * w


def _stream(store, a0, a1, cosmo):
    w = drift_factor(a0, a1, cosmo)
    store.x += store.px * w
    store.y += store.py * w
    store.z += store.pz * w


def sub_cycle(store, kernel, a0, a1, cosmo, mode=sr_mod.TREE, box_length=None,
              leaf_capacity=200, n_threads=1, timers=None):
    """Symmetric stream-kick-stream map over one sub-interval.

    The two stream halves split the drift integral itself (not the scale
    factor interval), so the composition is palindromic: negating momenta
    and reapplying the map walks the trajectory back exactly. Short-range
    forces are evaluated at the mid-stream positions; the long-range force
    is untouched here (frozen during sub-cycling).
    """
    half_drift = 0.5 * drift_factor(a0, a1, cosmo)

    def stream_half():
        store.x += store.px * half_drift
        store.y += store.py * half_drift
        store.z += store.pz * half_drift

    stream_half()
    raw = sr_mod.short_range_forces(store, kernel, mode=mode, box_length=box_length,
                                    leaf_capacity=leaf_capacity,
                                    n_threads=n_threads, timers=timers)
    w = cosmo.G * accel_kick_weight(a0, a1, cosmo)
    store.px += raw[:, 0] * w
    store.py += raw[:, 1] * w
    store.pz += raw[:, 2] * w
    stream_half()


@dataclass
class StepReport:
    a_start: float
    a_end: float
    n_substeps: int
    n_particles: int
    wall_seconds: float
    phase_seconds: dict


def full_step(sets, geometry, pm_config, kernel, cosmo, a0, a1, stepper_config,
              mode=sr_mod.TREE, leaf_capacity=200, n_threads=1, timers=None,
              comm=None):
    """Advance every rank's particles from a0 to a1 and refresh overloads.

    Deposit of the combined actives happens once, at the pre-kick positions;
    both half kicks reuse the interpolated grid force with per-interval
    scalar weights.
    """
    timers = timers or null_timers()
    t0 = time.perf_counter()

    def grid_accelerations(a_solve):
        with timers.phase("other"):
            global_active = domain_mod.gather_active(sets)
            density = pm_mod.cic_deposit(global_active, pm_config)
        with timers.phase("fft"):
            grids = pm_mod.solve_forces(density, Background(a=a_solve), cosmo)
        with timers.phase("other"):
            accs = [
                pm_mod.cic_interpolate(grids, s.store.x, s.store.y, s.store.z, pm_config)
                for s in sets
            ]
        return len(global_active), accs

    a_mid = 0.5 * (a0 + a1)
    n_particles, accs = grid_accelerations(a0)
    for s, acc in zip(sets, accs):
        long_range_kick(s.store, acc, a0, a0, a_mid, cosmo)

    edges = np.linspace(a0, a1, stepper_config.n_c + 1)
    for k in range(stepper_config.n_c):
        for s in sets:
            sub_cycle(s.store, kernel, edges[k], edges[k + 1], cosmo, mode=mode,
                      box_length=None, leaf_capacity=leaf_capacity,
                      n_threads=n_threads, timers=timers)

    # second half kick uses a fresh deposit at the post-subcycle positions:
    # reusing the opening deposit here drops the map to first order
    _, accs = grid_accelerations(a1)
    for s, acc in zip(sets, accs):
        long_range_kick(s.store, acc, a1, a_mid, a1, cosmo)

    with timers.phase("other"):
        sets = domain_mod.refresh_overload(sets, geometry, comm=comm)

    report = StepReport(a_start=a0, a_end=a1, n_substeps=stepper_config.n_c,
                        n_particles=n_particles,
                        wall_seconds=time.perf_counter() - t0,
                        phase_seconds=timers.snapshot())
    return sets, report
