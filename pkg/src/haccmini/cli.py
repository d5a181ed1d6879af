"""Driver: config parsing, run orchestration, snapshot I/O, self-tests.

This is the only module that touches the filesystem. A run produces
snapshots at the configured cadence, a pk_<step>.csv per snapshot,
metrics.csv, and manifest.txt (config echo plus content hashes of the
deterministic artifacts; timing files are listed but not hashed).

Exit codes: 0 success, 2 config error, 3 numeric error, 4 I/O error.
"""

import argparse
import hashlib
import os
import struct
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, domain, ic, pm, shortrange, stepper
from .core import Background, CosmologyParams, NumericError, particle_mass
from .fft import ContractError, PencilFFT, dft3_direct
from .particles import ParticleStore

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

SNAPSHOT_MAGIC = b"HACCMINI"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<8sIIQdddddQQ")  # magic, version, pad, N_p, L, a, om, ol, h, seed, reserved
HEADER_BYTES = _HEADER.size


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    box_length: float = 100.0
    n_particles: int = 32          # per dimension
    n_g: int = 64
    rank_dims: tuple = (1, 1, 1)
    overload_depth: float = None   # default 2 * r_cut
    sigma: float = 0.8
    n_s: int = 3
    r_cut: float = None            # default 3 * box/n_g
    epsilon: float = None          # default (0.1 * box/n_g)^2
    leaf_capacity: int = 200
    n_c: int = 5
    a_in: float = 1.0 / 26.0
    a_final: float = 1.0
    n_steps: int = 30
    seed: int = 12345
    mode: str = shortrange.TREE
    threads: int = 1
    output_dir: str = "out"
    snapshot_every: int = 10
    snapshot_stride: int = 1
    omega_m: float = 0.265
    omega_lambda: float = 0.735
    h: float = 0.71
    spectrum: str = "power_law"    # or a path to a two-column table
    spectrum_amplitude: float = 200.0
    spectrum_index: float = -2.0

    _INT_FIELDS = {"n_particles", "n_g", "leaf_capacity", "n_c", "n_steps",
                   "seed", "threads", "snapshot_every", "snapshot_stride"}
    _FLOAT_FIELDS = {"box_length", "overload_depth", "sigma", "r_cut", "epsilon",
                     "a_in", "a_final", "omega_m", "omega_lambda", "h",
                     "spectrum_amplitude", "spectrum_index"}

    @property
    def delta(self):
        return self.box_length / self.n_g

    def resolved(self):
        """Fill derived defaults (r_cut, epsilon, overload_depth)."""
        out = replace(self)
        if out.r_cut is None:
            out.r_cut = 3.0 * out.delta
        if out.epsilon is None:
            out.epsilon = (0.1 * out.delta) ** 2
        if out.overload_depth is None:
            out.overload_depth = 2.0 * out.r_cut
        return out

    def validate(self):
        """All module preconditions, reported as one aggregated error."""
        cfg = self.resolved()
        problems = []
        if cfg.box_length <= 0:
            problems.append("box_length must be positive")
        if cfg.n_particles < 2:
            problems.append("n_particles (per dimension) must be at least 2")
        if cfg.n_g < 8:
            problems.append("n_g must be at least 8")
        if not 0 < cfg.r_cut < cfg.box_length / 4:
            problems.append("r_cut must lie in (0, box_length/4)")
        if len(cfg.rank_dims) != 3 or any(d < 1 for d in cfg.rank_dims):
            problems.append("rank_dims must be three positive integers")
        else:
            min_block = min(cfg.box_length / d for d in cfg.rank_dims)
            if cfg.overload_depth < cfg.r_cut:
                problems.append("overload_depth must be at least r_cut")
            if cfg.overload_depth >= min_block / 2:
                problems.append("overload_depth must be below half the smallest block extent")
        if not 1 <= cfg.n_c <= 32:
            problems.append("n_c must lie in [1, 32]")
        if not 0 < cfg.a_in < cfg.a_final <= 1:
            problems.append("need 0 < a_in < a_final <= 1")
        if cfg.n_steps < 1:
            problems.append("n_steps must be positive")
        if cfg.mode not in (shortrange.TREE, shortrange.P3M_DIRECT):
            problems.append(f"mode must be {shortrange.TREE} or {shortrange.P3M_DIRECT}")
        if cfg.threads < 1:
            problems.append("threads must be positive")
        if abs(cfg.omega_m + cfg.omega_lambda - 1.0) > 1e-10 or cfg.omega_m <= 0:
            problems.append("flat universe required: omega_m > 0, omega_m + omega_lambda = 1")
        if cfg.snapshot_every < 1 or cfg.snapshot_stride < 1:
            problems.append("snapshot_every and snapshot_stride must be positive")
        if problems:
            raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(problems))
        return cfg

    def echo_lines(self):
        out = []
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name} = {v}")
        return out


def parse_config_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        values[key] = val
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig) if not f.name.startswith("_")}
    problems = []
    for key, val in values.items():
        if key == "z_in":
            cfg.a_in = 1.0 / (1.0 + float(val))
            continue
        if key not in known:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            if key == "rank_dims":
                cfg.rank_dims = tuple(int(p) for p in val.split(","))
            elif key in RunConfig._INT_FIELDS:
                setattr(cfg, key, int(val))
            elif key in RunConfig._FLOAT_FIELDS:
                setattr(cfg, key, float(val))
            else:
                setattr(cfg, key, val)
        except ValueError:
            problems.append(f"could not parse {key} = {val!r}")
    if problems:
        raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(problems))
    return cfg


def load_config(path):
    return parse_config_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# snapshot I/O

def write_snapshot(path, store, box_length, a, cosmo, seed, stride=1):
    """Little-endian SOA snapshot; positions/momenta as float32, ids uint64."""
    sel = slice(None, None, stride)
    x = store.x[sel].astype("<f4")
    n_p = x.size
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, 0, n_p,
                          box_length, a, cosmo.omega_m, cosmo.omega_lambda,
                          cosmo.h, seed, 0)
    payload = [header, x.tobytes()]
    for name in ("y", "z", "px", "py", "pz"):
        payload.append(getattr(store, name)[sel].astype("<f4").tobytes())
    payload.append(store.ids[sel].astype("<u8").tobytes())
    Path(path).write_bytes(b"".join(payload))


@dataclass
class Snapshot:
    n_p: int
    box_length: float
    a: float
    omega_m: float
    omega_lambda: float
    h: float
    seed: int
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    px: np.ndarray
    py: np.ndarray
    pz: np.ndarray
    ids: np.ndarray


def read_snapshot(path):
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_BYTES:
        raise IOError(f"truncated snapshot: expected at least {HEADER_BYTES} header "
                      f"bytes, found {len(blob)}")
    magic, version, _, n_p, box, a, om, ol, h, seed, _ = _HEADER.unpack_from(blob)
    if magic != SNAPSHOT_MAGIC:
        raise IOError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise IOError(f"unsupported snapshot version {version} (expected {SNAPSHOT_VERSION})")
    expected = HEADER_BYTES + n_p * (6 * 4 + 8)
    if len(blob) != expected:
        raise IOError(f"truncated snapshot: expected {expected} bytes, found {len(blob)}")
    off = HEADER_BYTES
    arrays = []
    for _ in range(6):
        arrays.append(np.frombuffer(blob, dtype="<f4", count=n_p, offset=off))
        off += 4 * n_p
    ids = np.frombuffer(blob, dtype="<u8", count=n_p, offset=off)
    return Snapshot(n_p=n_p, box_length=box, a=a, omega_m=om, omega_lambda=ol,
                    h=h, seed=seed, x=arrays[0], y=arrays[1], z=arrays[2],
                    px=arrays[3], py=arrays[4], pz=arrays[5], ids=ids)


# ---------------------------------------------------------------------------
# run orchestration

_kernel_cache = {}


def fitted_kernel(pm_config, cosmo, epsilon=None):
    key = (pm_config, cosmo.omega_m, cosmo.h, epsilon)
    if key not in _kernel_cache:
        _kernel_cache[key] = shortrange.fit_grid_force(pm_config, cosmo, epsilon=epsilon)
    return _kernel_cache[key]


def build_initial_state(cfg, cosmo):
    """IC spectrum -> Gaussian field -> Zel'dovich particles at a_in."""
    if cfg.spectrum == "power_law":
        spec = ic.InputPowerSpectrum.power_law(cfg.spectrum_amplitude, cfg.spectrum_index)
    else:
        spec = ic.InputPowerSpectrum.from_file(cfg.spectrum)
    delta_k = ic.gaussian_field(spec, cfg.n_particles, cfg.box_length, cfg.seed)
    m_p = particle_mass(cosmo, cfg.box_length, cfg.n_particles ** 3)
    store = ic.zeldovich_displace(delta_k, cfg.a_in, cosmo, cfg.n_particles,
                                  cfg.box_length, m_p,
                                  hard_limit=cfg.overload_depth / 2)
    return store


def run(cfg, log=print):
    """Full simulation: IC, stepping, snapshots, spectra, metrics, manifest."""
    cfg = cfg.validate()
    cosmo = CosmologyParams(omega_m=cfg.omega_m, omega_lambda=cfg.omega_lambda, h=cfg.h)
    pm_config = pm.PMConfig(n_g=cfg.n_g, box_length=cfg.box_length, sigma=cfg.sigma,
                            n_s=cfg.n_s, r_cut=cfg.r_cut)
    step_config = stepper.StepperConfig(n_c=cfg.n_c, a_in=cfg.a_in,
                                        a_final=cfg.a_final, n_steps=cfg.n_steps)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    log(f"[fit] fitting short-range kernel on {cfg.n_g}^3 grid")
    kernel = fitted_kernel(pm_config, cosmo, epsilon=cfg.epsilon)

    log(f"[ic] generating {cfg.n_particles}^3 particles at a={cfg.a_in:.5f}")
    store = build_initial_state(cfg, cosmo)
    geometry = domain.decompose(cfg.box_length, cfg.rank_dims)
    sets = domain.assign_and_overload(store, geometry, cfg.overload_depth)

    reports = []
    artifacts = []

    def save_outputs(step_idx, a_now):
        current = domain.gather_active(sets)
        snap_path = out_dir / f"snapshot_{step_idx:04d}.bin"
        write_snapshot(snap_path, current, cfg.box_length, a_now, cosmo, cfg.seed,
                       stride=cfg.snapshot_stride)
        artifacts.append(snap_path)
        pk = analysis.power_spectrum(current, cfg.n_g, cfg.box_length, a=a_now)
        pk_path = out_dir / f"pk_{step_idx:04d}.csv"
        pk_path.write_text(pk.to_csv())
        artifacts.append(pk_path)
        log(f"[out] wrote {snap_path.name}, {pk_path.name}")

    edges = step_config.step_edges()
    save_outputs(0, edges[0])
    timers = analysis.Timers()
    for i in range(cfg.n_steps):
        sets, rep = stepper.full_step(
            sets, geometry, pm_config, kernel, cosmo, edges[i], edges[i + 1],
            step_config, mode=cfg.mode, leaf_capacity=cfg.leaf_capacity,
            n_threads=cfg.threads, timers=timers)
        reports.append(rep)
        log(f"[step {i + 1}/{cfg.n_steps}] a={edges[i + 1]:.5f} "
            f"wall={rep.wall_seconds:.2f}s")
        if (i + 1) % cfg.snapshot_every == 0 or i + 1 == cfg.n_steps:
            save_outputs(i + 1, edges[i + 1])

    records = analysis.record_metrics(reports, n_threads=cfg.threads)
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(analysis.metrics_csv(records))

    manifest_path = out_dir / "manifest.txt"
    manifest_path.write_text(make_manifest(cfg, artifacts, unhashed=[metrics_path]))
    log(f"[done] manifest at {manifest_path}")
    return out_dir


def make_manifest(cfg, artifacts, unhashed=()):
    """Config echo + content hashes of the deterministic artifacts.

    Timing artifacts are listed but not hashed, so two runs with the same
    seed and thread count produce bitwise-identical manifests.
    """
    lines = ["# haccmini run manifest", "[config]"]
    lines += cfg.echo_lines()
    lines.append("[artifacts]")
    whole = hashlib.sha256()
    for path in sorted(artifacts, key=lambda p: p.name):
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        whole.update(digest.encode())
        lines.append(f"{Path(path).name} sha256={digest}")
    for path in unhashed:
        lines.append(f"{Path(path).name} unhashed=timing-artifact")
    lines.append(f"[content-hash] {whole.hexdigest()}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# self-test suites

def _report(rows, log):
    ok = True
    log(f"{'check':<46} {'measured':>12} {'tolerance':>12} result")
    for name, measured, tol, passed in rows:
        ok &= passed
        log(f"{name:<46} {measured:>12.3e} {tol:>12.3e} {'PASS' if passed else 'FAIL'}")
    return ok


def selftest_unit(log=print):
    from .core import drift_factor, growth_factor
    cosmo = CosmologyParams(omega_m=1.0, omega_lambda=0.0)
    config = pm.PMConfig(n_g=16, box_length=16.0)
    zero = (np.zeros(1), np.zeros(1), np.zeros(1))
    rows = []
    v = abs(float(pm.filter_kernel(zero, config)[0]) - 1.0)
    rows.append(("filter at k=0 equals 1", v, 1e-14, v <= 1e-14))
    v = abs(float(pm.influence_function(zero, config)[0]))
    rows.append(("influence at k=0 equals 0", v, 1e-14, v <= 1e-14))
    v = abs(pm.gradient_multiplier((np.array([np.pi / config.delta]),) * 3, 0, config)[0])
    rows.append(("gradient vanishes at Nyquist", v, 1e-14, v <= 1e-14))
    k = shortrange.ShortRangeKernel(epsilon=0.0, r_cut=2.0, poly=(0.0,) * 6)
    v = float(shortrange.eval_f_sr(np.array([4.0, 5.0]), k).max())
    rows.append(("f_SR zero beyond cutoff", v, 0.0, v == 0.0))
    v = abs(float(shortrange.eval_f_sr(np.array([1.0]), k)[0]) - 1.0)
    rows.append(("f_SR pure power law at s=1", v, 1e-14, v <= 1e-14))
    v = abs(drift_factor(0.25, 0.25, cosmo))
    rows.append(("drift of empty interval is 0", v, 0.0, v == 0.0))
    v = abs(float(growth_factor(0.5, cosmo)) - 0.5)
    rows.append(("EdS growth D(a) = a", v, 1e-8, v <= 1e-8))
    return _report(rows, log)


def selftest_oracle(log=print):
    from scipy.integrate import simpson

    from .core import drift_factor, growth_factor, growth_factor_quadrature
    rng = np.random.default_rng(3)
    rows = []

    for n in (8, 12):
        g = rng.normal(size=(n, n, n))
        err = np.max(np.abs(PencilFFT(n, rank_grid=(2, 2)).forward(g) - dft3_direct(g)))
        tol = 1e-10 * np.linalg.norm(g)
        rows.append((f"pencil FFT vs direct DFT ({n}^3)", err, tol, err <= tol))

    store, kernel, box = analysis.fixed_force_workload(n_particles=2000)
    tree = shortrange.short_range_forces(store, kernel, mode=shortrange.TREE, box_length=box)
    brute = shortrange.brute_force_short_range(store, kernel, box_length=box)
    scale = np.max(np.linalg.norm(brute, axis=1))
    err = np.max(np.linalg.norm(tree - brute, axis=1)) / scale
    rows.append(("tree forces vs O(N^2) direct sum", err, 1e-5, err <= 1e-5))

    eds = CosmologyParams(omega_m=1.0, omega_lambda=0.0)
    a0, a1 = 0.04, 0.64
    closed = 2.0 * (a0 ** -0.5 - a1 ** -0.5)
    err = abs(drift_factor(a0, a1, eds) - closed) / closed
    rows.append(("EdS drift factor vs closed form", err, 1e-12, err <= 1e-12))
    lcdm = CosmologyParams(omega_m=0.25, omega_lambda=0.75)
    a = np.linspace(0.2, 0.9, 4001)
    simp = simpson(a ** -3 / np.sqrt(lcdm.omega_m * a ** -3 + lcdm.omega_lambda), x=a)
    err = abs(drift_factor(0.2, 0.9, lcdm) - simp) / simp
    rows.append(("LCDM drift factor vs Simpson oracle", err, 1e-10, err <= 1e-10))

    err = max(abs(float(growth_factor(av, lcdm)) - growth_factor_quadrature(av, lcdm))
              / growth_factor_quadrature(av, lcdm) for av in (0.2, 0.5, 0.8))
    rows.append(("growth ODE vs quadrature oracle", err, 1e-6, err <= 1e-6))
    return _report(rows, log)


def selftest_force(log=print, out_dir=None):
    cosmo = CosmologyParams(omega_m=0.265, omega_lambda=0.735, h=0.71)
    config = pm.PMConfig(n_g=64, box_length=64.0)
    kernel = fitted_kernel(config, cosmo)
    result = analysis.pair_force_test(config, cosmo, kernel, n_samples=6000)
    aniso_on = analysis.kernel_anisotropy(config, cosmo)
    aniso_off = analysis.kernel_anisotropy(config, cosmo, sigma=0.0, n_s=0)
    ratio = aniso_off / aniso_on
    rows = [
        ("combined force profile RMS vs Newtonian", result.rms_profile_error,
         5e-3, result.rms_profile_error <= 5e-3),
        ("short-range force beyond r_cut", result.short_range_beyond_cut, 0.0,
         result.short_range_beyond_cut == 0.0),
        ("filter anisotropy improvement (x)", ratio, 10.0, ratio >= 10.0),
    ]
    if out_dir is not None:
        path = Path(out_dir) / "forces.csv"
        path.write_text(result.to_csv())
        log(f"[force] wrote {path}")
    return _report(rows, log)


def selftest_scaling(log=print, out_dir=None):
    rows = analysis.thread_sweep()
    log("threads sweep (fixed force workload):")
    for r in rows:
        log(f"  threads={r['threads']}: kernel {r['kernel_seconds']:.3f}s "
            f"speedup {r['speedup']:.2f}x")
    eff = analysis.kernel_efficiency_sweep()
    log("kernel efficiency vs neighbor-list size:")
    for r in eff:
        log(f"  list={r['list_size']:>5}: {r['ns_per_interaction']:.1f} ns/interaction")
    if out_dir is not None:
        path = Path(out_dir) / "metrics.csv"
        path.write_text(analysis.thread_sweep_csv(rows))
        log(f"[scaling] wrote {path}")
    n_cores = os.cpu_count() or 1
    at_cores = next((r for r in rows if r["threads"] == n_cores), rows[-1])
    passed = at_cores["speedup"] >= 0.5 * at_cores["threads"]
    return _report([("thread speedup vs 0.5 x ideal at core count",
                     at_cores["speedup"], 0.5 * at_cores["threads"], passed)], log)


SUITES = {
    "UNIT": selftest_unit,
    "ORACLE": selftest_oracle,
    "FORCE": selftest_force,
    "SCALING": selftest_scaling,
}


def selftest(suite, log=print, out_dir=None):
    suite = suite.upper()
    if suite not in SUITES:
        raise ConfigError(f"unknown selftest suite {suite!r}; choose from {sorted(SUITES)}")
    fn = SUITES[suite]
    if suite in ("FORCE", "SCALING"):
        return fn(log=log, out_dir=out_dir)
    return fn(log=log)


# ---------------------------------------------------------------------------
# entry point

def main(argv=None):
    parser = argparse.ArgumentParser(prog="haccmini",
                                     description="desk-scale hybrid PM/tree cosmology code")
    parser.add_argument("--config", help="key=value run configuration file")
    parser.add_argument("--selftest", help="run a suite: UNIT, ORACLE, FORCE, SCALING")
    parser.add_argument("--mode", help="override short-range mode (tree, p3m_direct)")
    parser.add_argument("--threads", type=int, help="override worker thread count")
    parser.add_argument("--output-dir", help="override output directory")
    parser.add_argument("--seed", type=int, help="override random seed")
    args = parser.parse_args(argv)

    try:
        if args.selftest:
            out_dir = args.output_dir or "."
            ok = selftest(args.selftest, out_dir=out_dir)
            return EXIT_OK if ok else EXIT_NUMERIC
        if not args.config:
            parser.error("--config or --selftest is required")
        cfg = load_config(args.config)
        for key in ("mode", "threads", "seed"):
            if getattr(args, key) is not None:
                setattr(cfg, key, getattr(args, key))
        if args.output_dir is not None:
            cfg.output_dir = args.output_dir
        run(cfg)
        return EXIT_OK
    except ConfigError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ContractError, shortrange.ConfigurationError,
            domain.ConfigurationError, domain.OverloadEscapeError, ValueError) as exc:
        print(f"[numeric] {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"[io] {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
