"""
Experiment Service - Run operations behind the command line
Builds GP problems from a RunConfig, trains them, back-transforms the learned
parameters to raw units and writes reports, posterior grids and manifests.
"""

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import database
from services.config_service import RunConfig
from services.errors import ConfigurationError, DataError
from services.kernels import KernelBlockKind, QuadratureSettings, RuleSet, kernel_block_1d, kernel_block_2d
from services.likelihood import Framework, GpProblem, posterior_predict, train_problem
from services.operators import (
    Evolution,
    MultiplierTerm,
    OperatorSpec,
    StableDiffusionSpec,
    TermKind,
    stable_multiplier,
)
from services.optimize import LbfgsOptions, TrainResult, TransformEntry, TransformKind, TransformTable
from services.quadrature import REFERENCE_NODES, angular_grid
from services.sampling_service import SynthResult, run_recipe
from services.spectral import NU_MAX, NU_MIN, KernelFamily, SpectralDensity, kernel_real_space, matern_closed_form
from services.stable import (
    DEFAULT_BINS,
    EmpiricalDensity,
    StableParams,
    default_range,
    empirical_density,
    increments,
    rescale_series,
    truncated_paths,
)

logger = logging.getLogger(__name__)

# Defaults for config keys that may be omitted
NOISE_FLOOR = 1e-8
NOISE_INIT_FRACTION = 1e-2
DENSITY_NOISE_FRACTION = 1e-1
EDGE_MARGIN = 1e-3
POSTERIOR_GRID_1D = 101
POSTERIOR_GRID_2D = 41
DEFAULT_LAGS = (3, 4)
BACKTEST_PATHS = 100
BACKTEST_STEPS = 125
BENCH_NODES = (8, 16, 32, 64)
BENCH_THETA_SQ = (0.1, 1.0, 10.0)
BENCH_ALPHA = 0.5
BENCH_ANGULAR = 64


@dataclass(frozen=True)
class Scaling:
    """Affine map raw -> training units: sites (x - center)/s_x, values v/s."""
    center: np.ndarray
    s_x: float = 1.0
    s_a: float = 1.0
    s_b: float = 1.0

    def sites_to_training(self, sites) -> np.ndarray:
        return (np.asarray(sites, dtype=float) - self.center) / self.s_x


@dataclass
class RunReport:
    mode: str
    config_digest: str
    seed: int
    output_dir: str
    train: Optional[TrainResult] = None
    params: Dict[str, float] = field(default_factory=dict)
    raw_params: Dict[str, float] = field(default_factory=dict)
    derived: Dict[str, float] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    wall_time: float = 0.0
    evaluations: int = 0

    def to_dict(self) -> Dict:
        """Deterministic content of report.json (timings go to the manifest)."""
        payload = {
            "mode": self.mode,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "params": self.params,
            "raw_params": self.raw_params,
            "derived": self.derived,
            "outputs": self.outputs,
            "evaluations": self.evaluations,
        }
        if self.train is not None:
            payload["train"] = {
                "nlml": self.train.nlml,
                "iterations": self.train.iterations,
                "evaluations": self.train.evaluations,
                "grad_norm": self.train.grad_norm,
                "termination": self.train.termination,
                "jitter_max": self.train.jitter_max,
                "jitter_count": self.train.jitter_count,
                "failed_evaluations": self.train.failed_evaluations,
            }
        return payload


# --------------------------
# Model setup from config sections
# --------------------------

def _interior(name: str, value: float, lo: float, hi: float) -> float:
    margin = EDGE_MARGIN * (hi - lo)
    if lo + margin <= value <= hi - margin:
        return value
    clipped = min(max(value, lo + margin), hi - margin)
    logger.warning("%s=%g starts on the edge of (%g, %g); starting from %g instead", name, value, lo, hi, clipped)
    return clipped


def build_kernel(section: Dict, dim: int) -> Tuple[SpectralDensity, List[TransformEntry]]:
    family = KernelFamily(section["family"])
    theta = [float(t) for t in section.get("theta", [1.0] * dim)]
    if len(theta) != dim:
        raise ConfigurationError(f"kernel.theta needs {dim} value(s), got {len(theta)}.")
    nu: List[float] = []
    if family == KernelFamily.MATERN:
        nu = [float(v) for v in section.get("nu", [2.5] * dim)]
        if len(nu) != dim:
            raise ConfigurationError(f"kernel.nu needs {dim} value(s), got {len(nu)}.")
    sd = SpectralDensity(family=family, sigma=float(section.get("sigma", 1.0)), theta=tuple(theta),
                         nu=tuple(nu), dim=dim)
    entries = [TransformEntry("sigma", TransformKind.LOG, sd.sigma, section.get("train_sigma", True))]
    entries += [TransformEntry(f"theta_{i + 1}", TransformKind.LOG, t, section.get("train_theta", True))
                for i, t in enumerate(theta)]
    train_nu = section.get("train_nu", False)
    for i, v in enumerate(nu):
        initial = _interior(f"nu_{i + 1}", v, NU_MIN, NU_MAX) if train_nu else v
        entries.append(TransformEntry(f"nu_{i + 1}", TransformKind.LOG_SIGMOID, initial, train_nu,
                                      lo=NU_MIN, hi=NU_MAX))
    return sd, entries


def build_operator(section: Dict, dim: int,
                   evolution: Optional[Evolution] = None) -> Tuple[OperatorSpec, List[TransformEntry]]:
    terms = tuple(MultiplierTerm(TermKind(t["kind"]), float(t["alpha"]), float(t["coeff"]))
                  for t in section["terms"])
    op = OperatorSpec(terms=terms, evolution=evolution, dim=dim)
    coeff_kind = TransformKind.LOG if section.get("positive_coeff", False) else TransformKind.IDENTITY
    entries = []
    for j, (raw, term) in enumerate(zip(section["terms"], terms), start=1):
        train_alpha = raw.get("train_alpha", True)
        alpha = _interior(f"alpha_{j}", term.order_alpha, 0.0, 2.0) if train_alpha else term.order_alpha
        entries.append(TransformEntry(f"C_{j}", coeff_kind, term.coeff, raw.get("train_coeff", True)))
        entries.append(TransformEntry(f"alpha_{j}", TransformKind.SIGMOID, alpha, train_alpha, lo=0.0, hi=2.0))
    return op, entries


def build_stable(section: Dict, evolution: Evolution) -> Tuple[OperatorSpec, List[TransformEntry]]:
    spec = StableDiffusionSpec(alpha=float(section["alpha"]), p=float(section["p"]), gamma=float(section["gamma"]))
    op = replace(stable_multiplier(spec), evolution=evolution)
    entries = [
        TransformEntry("alpha", TransformKind.SIGMOID, _interior("alpha", spec.alpha, 0.0, 2.0), lo=0.0, hi=2.0),
        TransformEntry("p", TransformKind.SIGMOID, _interior("p", spec.p, 0.0, 1.0), lo=0.0, hi=1.0),
        TransformEntry("gamma", TransformKind.LOG, spec.gamma),
    ]
    return op, entries


def build_noise(section: Dict, groups: Sequence[Tuple[str, np.ndarray, float]],
                fraction: float = NOISE_INIT_FRACTION) -> List[TransformEntry]:
    """
    One entry per (name, training values, value scale). Configured initial values
    are raw units; the default is fraction times each group's standard deviation.
    """
    train = section.get("train", True)
    floor = float(section.get("floor", NOISE_FLOOR))
    initial = section.get("initial")
    if isinstance(initial, list) and len(initial) != len(groups):
        raise ConfigurationError(f"noise.initial needs {len(groups)} value(s), got {len(initial)}.")
    entries = []
    for index, (name, values, scale) in enumerate(groups):
        if initial is None:
            value = max(fraction * float(np.std(values)), 10.0 * floor)
        else:
            value = float(initial[index] if isinstance(initial, list) else initial) / scale
        entries.append(TransformEntry(name, TransformKind.LOG, value, train, floor=floor))
    return entries


def build_options(section: Dict) -> LbfgsOptions:
    known = ("memory", "max_iter", "grad_tol", "f_tol", "restarts", "restart_scale")
    return LbfgsOptions(**{key: section[key] for key in known if key in section})


def build_quadrature(section: Dict) -> QuadratureSettings:
    defaults = QuadratureSettings()
    return QuadratureSettings(
        nodes_1d=int(section.get("nodes_1d", defaults.nodes_1d)),
        radial=int(section.get("radial", defaults.radial)),
        angular=int(section.get("angular", defaults.angular)),
    )


# --------------------------
# Standardization
# --------------------------

def _safe_std(values) -> float:
    s = float(np.std(values))
    return s if s > 0 and math.isfinite(s) else 1.0


def standardization(sites_a, values_a, sites_b, values_b, framework: Framework) -> Scaling:
    """
    Center and isotropically scale positions; scale (never center) values.
    Both snapshots of the evolution framework share one value scale.
    """
    sites = np.concatenate([np.asarray(sites_a, dtype=float), np.asarray(sites_b, dtype=float)])
    center = np.mean(sites, axis=0)
    s_x = _safe_std(sites - center)
    if framework == Framework.EVOLUTION:
        s_a = s_b = _safe_std(np.concatenate([values_a, values_b]))
    else:
        s_a, s_b = _safe_std(values_a), _safe_std(values_b)
    return Scaling(center=np.asarray(center), s_x=s_x, s_a=s_a, s_b=s_b)


def identity_scaling(dim: int) -> Scaling:
    return Scaling(center=np.zeros(dim) if dim > 1 else np.zeros(()))


def raw_parameters(params: Dict[str, float], scaling: Scaling, framework: Framework) -> Dict[str, float]:
    """Learned parameters in the units of the data as supplied."""
    raw = {}
    for name, value in params.items():
        kind, _, index = name.partition("_")
        if name == "sigma":
            raw[name] = value * scaling.s_a
        elif kind == "theta":
            raw[name] = value * scaling.s_x
        elif kind == "C":
            order = params[f"alpha_{index}"]
            ratio = 1.0 if framework == Framework.EVOLUTION else scaling.s_b / scaling.s_a
            raw[name] = value * scaling.s_x ** order * ratio
        elif name in ("noise", "noise_a"):
            raw[name] = value * scaling.s_a
        elif name == "noise_b":
            raw[name] = value * scaling.s_b
        else:
            raw[name] = value
    return raw


# --------------------------
# Data
# --------------------------

def _dimension(config: RunConfig) -> int:
    synth = config.section("data").get("synth", {})
    dim = 2 if synth.get("recipe") == "fracpoisson-2d" else len(config.section("kernel").get("theta", [1.0]))
    if dim not in (1, 2):
        raise ConfigurationError(f"Only one and two space dimensions are supported, got {dim}.")
    return dim


def _write_synth(result: SynthResult, out_dir: Path, prefix: str = "") -> List[str]:
    written = []
    for label, group in result.groups.items():
        path = database.insert_site_values(out_dir / f"{prefix}{label}.csv", group.sites, group.values)
        written.append(path.name)
    if result.series is not None:
        path = database.insert_series(out_dir / f"{prefix}series.csv", *result.series)
        written.append(path.name)
    return written


def load_groups(config: RunConfig, dim: int, out_dir: Path, labels: Tuple[str, str]):
    """(sites_a, values_a, sites_b, values_b, dt, files written) from CSVs or a synth recipe."""
    data = config.section("data")
    if "synth" in data:
        result = run_recipe(data["synth"], config.seed)
        if set(result.groups) != set(labels):
            raise ConfigurationError(
                f"Recipe {result.recipe} produces {', '.join(result.groups)} data, not {', '.join(labels)}.")
        a, b = result.groups[labels[0]], result.groups[labels[1]]
        written = _write_synth(result, out_dir, prefix="data_")
        return a.sites, a.values, b.sites, b.values, result.dt, written
    sites_a, values_a = database.get_site_values(config.resolve(data["csv_a"]), dim)
    sites_b, values_b = database.get_site_values(config.resolve(data["csv_b"]), dim)
    return sites_a, values_a, sites_b, values_b, data.get("dt"), []


# --------------------------
# Posterior grids
# --------------------------

def posterior_grid(sites, dim: int, section: Dict) -> np.ndarray:
    """Equispaced grid over posterior.domain, or the bounding box of the sites."""
    if "domain" in section:
        bounds = np.asarray(section["domain"], dtype=float).reshape(dim, 2)
    else:
        sites = np.asarray(sites, dtype=float).reshape(-1, dim)
        bounds = np.stack([sites.min(axis=0), sites.max(axis=0)], axis=1)
    count = int(section.get("grid", POSTERIOR_GRID_1D if dim == 1 else POSTERIOR_GRID_2D))
    axes = [np.linspace(lo, hi, count) for lo, hi in bounds]
    if dim == 1:
        return axes[0]
    grid_x, grid_y = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([grid_x.ravel(), grid_y.ravel()])


def write_posterior(problem: GpProblem, params: Dict[str, float], raw: Dict[str, float], scaling: Scaling,
                    grid: np.ndarray, out_dir: Path, names: Dict[str, str],
                    site_map: Callable[[np.ndarray], np.ndarray] = None) -> List[str]:
    """
    Posterior mean/std of both functions on the grid, in raw units, with the
    noise band 2 std + 2 sigma_n. site_map sends raw grid points to raw model sites.
    """
    model_sites = grid if site_map is None else site_map(grid)
    query = scaling.sites_to_training(model_sites)
    written = []
    for which, scale in (("a", scaling.s_a), ("b", scaling.s_b)):
        mean, std = posterior_predict(problem, params, query, which)
        noise_name = "noise" if problem.is_evolution else f"noise_{which}"
        band = 2.0 * std * scale + 2.0 * raw.get(noise_name, 0.0)
        path = database.insert_posterior(out_dir / f"posterior_{names[which]}.csv", grid, mean * scale,
                                         std * scale, band)
        written.append(path.name)
    return written


# --------------------------
# Shared training step
# --------------------------

def _train(problem: GpProblem, config: RunConfig) -> TrainResult:
    options = build_options(config.section("optimizer"))
    return train_problem(problem, options, seed=config.seed, config_digest=config.digest)


def _finish(report: RunReport, config: RunConfig, out_dir: Path, started: float,
            train: Optional[TrainResult] = None) -> RunReport:
    if train is not None and config.section("optimizer").get("trace", False):
        rows = [{"iter": e["iter"], "nlml": e["nlml"], "grad_norm": e["grad_norm"]} for e in train.trace]
        report.outputs.append(database.insert_table(out_dir / "trace.csv", rows).name)
    report.wall_time = time.perf_counter() - started
    report.outputs.append("report.json")
    database.insert_json(out_dir / "report.json", report.to_dict())
    database.insert_manifest(out_dir, config.digest, config.seed, config.mode, config.raw,
                             extra={"wall_time": round(report.wall_time, 3)})
    logger.info("%s finished in %.1f s; results in %s", config.mode, report.wall_time, out_dir)
    return report


def _check_mode(config: RunConfig, mode: str):
    if config.mode != mode:
        raise ConfigurationError(f"Config mode is {config.mode!r}, expected {mode!r}.")


# --------------------------
# Run operations
# --------------------------

def run_discover(config: RunConfig) -> RunReport:
    """Learn C and alpha of C (-Delta)^{alpha/2} u = f (or RL terms in 1D) from u and f samples."""
    _check_mode(config, "discover")
    started = time.perf_counter()
    out_dir = database.get_output_dir(config.output_dir)
    dim = _dimension(config)
    sites_a, values_a, sites_b, values_b, _, written = load_groups(config, dim, out_dir, ("u", "f"))
    framework = Framework.TIME_INDEPENDENT

    scaling = (standardization(sites_a, values_a, sites_b, values_b, framework)
               if config.raw.get("standardize", False) else identity_scaling(dim))
    train_a, train_b = values_a / scaling.s_a, values_b / scaling.s_b
    sd, kernel_entries = build_kernel(config.section("kernel"), dim)
    op, op_entries = build_operator(config.section("operator"), dim)
    noise_entries = build_noise(config.section("noise"),
                                [("noise_a", train_a, scaling.s_a), ("noise_b", train_b, scaling.s_b)])
    problem = GpProblem(
        framework=framework,
        sites_a=scaling.sites_to_training(sites_a), values_a=train_a,
        sites_b=scaling.sites_to_training(sites_b), values_b=train_b,
        sd=sd, op=op, transforms=TransformTable(tuple(kernel_entries + op_entries + noise_entries)),
        quadrature=build_quadrature(config.section("quadrature")), threads=config.threads,
    )
    logger.info("discover: %d u-sites, %d f-sites, dim %d", len(values_a), len(values_b), dim)
    train = _train(problem, config)
    raw = raw_parameters(train.params, scaling, framework)

    grid = posterior_grid(np.concatenate([np.asarray(sites_a), np.asarray(sites_b)]), dim,
                          config.section("posterior"))
    written += write_posterior(problem, train.params, raw, scaling, grid, out_dir, {"a": "u", "b": "f"})
    report = RunReport(mode=config.mode, config_digest=config.digest, seed=config.seed, output_dir=str(out_dir),
                       train=train, params=train.params, raw_params=raw, outputs=written,
                       evaluations=train.evaluations,
                       derived={"s_x": scaling.s_x, "s_a": scaling.s_a, "s_b": scaling.s_b})
    return _finish(report, config, out_dir, started, train)


def run_discover_evolution(config: RunConfig) -> RunReport:
    """Learn the terms of u_t = sum_j C_j D^{alpha_j} u from two snapshots dt apart."""
    _check_mode(config, "discover-evolution")
    started = time.perf_counter()
    out_dir = database.get_output_dir(config.output_dir)
    dim = _dimension(config)
    sites_n, values_n, sites_prev, values_prev, dt, written = load_groups(config, dim, out_dir, ("n", "nm1"))
    if dt is None or not dt > 0:
        raise ConfigurationError("Snapshot spacing dt must be positive.")
    framework = Framework.EVOLUTION
    operator_section = config.section("operator")
    evolution = Evolution(dt=float(dt), generator=operator_section.get("generator", True))

    scaling = (standardization(sites_n, values_n, sites_prev, values_prev, framework)
               if config.raw.get("standardize", False) else identity_scaling(dim))
    train_n, train_prev = values_n / scaling.s_a, values_prev / scaling.s_b
    sd, kernel_entries = build_kernel(config.section("kernel"), dim)
    op, op_entries = build_operator(operator_section, dim, evolution)
    noise_entries = build_noise(config.section("noise"),
                                [("noise", np.concatenate([train_n, train_prev]), scaling.s_a)])
    problem = GpProblem(
        framework=framework,
        sites_a=scaling.sites_to_training(sites_n), values_a=train_n,
        sites_b=scaling.sites_to_training(sites_prev), values_b=train_prev,
        sd=sd, op=op, transforms=TransformTable(tuple(kernel_entries + op_entries + noise_entries)),
        dt=evolution.dt, quadrature=build_quadrature(config.section("quadrature")), threads=config.threads,
    )
    logger.info("discover-evolution: %d + %d snapshot sites, dt=%g, %d term(s)",
                len(values_n), len(values_prev), dt, len(op.terms))
    train = _train(problem, config)
    raw = raw_parameters(train.params, scaling, framework)

    grid = posterior_grid(np.concatenate([np.asarray(sites_n), np.asarray(sites_prev)]), dim,
                          config.section("posterior"))
    written += write_posterior(problem, train.params, raw, scaling, grid, out_dir, {"a": "n", "b": "nm1"})
    report = RunReport(mode=config.mode, config_digest=config.digest, seed=config.seed, output_dir=str(out_dir),
                       train=train, params=train.params, raw_params=raw, outputs=written,
                       evaluations=train.evaluations, derived={"dt": float(dt), "s_x": scaling.s_x})
    return _finish(report, config, out_dir, started, train)


def series_factor(scale, length: int) -> float:
    """'none' -> 1, 'sqrt_length' -> sqrt(n), or an explicit positive factor."""
    if scale in (None, "none"):
        return 1.0
    if scale == "sqrt_length":
        return math.sqrt(length)
    if isinstance(scale, str):
        raise ConfigurationError(f"series.scale must be 'none', 'sqrt_length' or a number, got {scale!r}.")
    return float(scale)


def _load_series(config: RunConfig, out_dir: Path) -> Tuple[np.ndarray, np.ndarray, float, List[str]]:
    section = config.section("series")
    if "synth" in section:
        result = run_recipe(section["synth"], config.seed)
        if result.series is None:
            raise ConfigurationError(f"Recipe {result.recipe} does not produce a time series.")
        t, values = result.series
        written = _write_synth(result, out_dir, prefix="data_")
        dt = float(section.get("dt", result.dt))
    else:
        t, values = database.get_series(config.resolve(section["csv"]))
        written = []
        dt = float(section["dt"]) if "dt" in section else (float(t[1] - t[0]) if len(t) > 1 else 1.0)
    if not dt > 0:
        raise DataError(f"Series time step must be positive, got {dt}.")
    return t, values, dt, written


def calibration_densities(scaled: np.ndarray, lags: Sequence[int], bins: int, value_range, dt: float,
                          allow_sparse: bool) -> Tuple[EmpiricalDensity, EmpiricalDensity]:
    """Histograms of the shorter and longer lag on one shared range."""
    if len(lags) != 2 or not 0 < lags[0] < lags[1]:
        raise ConfigurationError(f"series.lags needs two increasing positive lags, got {list(lags)}.")
    if value_range is None:
        value_range = default_range(increments(scaled, lags[1]))
    short = empirical_density(scaled, lags[0], bins, value_range, dt)
    long = empirical_density(scaled, lags[1], bins, value_range, dt)
    for density in (short, long):
        if density.sparse and not allow_sparse:
            raise DataError(
                f"Lag-{density.lag} histogram has {density.sample_count} increments for {bins} bins "
                f"(need at least {10 * bins}); set series.allow_sparse to proceed.")
    return short, long


def run_calibrate_stable(config: RunConfig) -> RunReport:
    """
    Fit the stable-diffusion generator to empirical increment densities at two lags,
    report (alpha, p, gamma), beta = 2p - 1 and raw-unit gamma, optionally backtest.
    """
    _check_mode(config, "calibrate-stable")
    started = time.perf_counter()
    out_dir = database.get_output_dir(config.output_dir)
    section = config.section("series")
    t, values, dt_series, written = _load_series(config, out_dir)
    factor = series_factor(section.get("scale", "none"), len(values))
    scaled, scaling = rescale_series(values, factor)
    lags = [int(n) for n in section.get("lags", DEFAULT_LAGS)]
    short, long = calibration_densities(scaled, lags, int(section.get("bins", DEFAULT_BINS)),
                                        section.get("range"), dt_series, section.get("allow_sparse", False))
    for density in (short, long):
        written.append(database.insert_density(out_dir / f"density_lag{density.lag}.csv",
                                               density.centers, density.density).name)

    evolution = Evolution(dt=(lags[1] - lags[0]) * dt_series, generator=True)
    op, op_entries = build_stable(config.section("stable"), evolution)
    sd, kernel_entries = build_kernel(config.section("kernel"), 1)
    density_values = np.concatenate([long.density, short.density])
    noise_entries = build_noise(config.section("noise"), [("noise", density_values, 1.0)],
                                fraction=DENSITY_NOISE_FRACTION)
    # densities are fitted in the reflected coordinate of the Fourier convention
    problem = GpProblem(
        framework=Framework.EVOLUTION,
        sites_a=-long.centers, values_a=long.density,
        sites_b=-short.centers, values_b=short.density,
        sd=sd, op=op, transforms=TransformTable(tuple(kernel_entries + op_entries + noise_entries)),
        dt=evolution.dt, quadrature=build_quadrature(config.section("quadrature")), threads=config.threads,
    )
    logger.info("calibrate-stable: %d steps, lags %s, factor %.6g", len(values), lags, factor)
    train = _train(problem, config)
    params = train.params
    gamma_raw = scaling.unscale_gamma(params["gamma"])
    raw = dict(params, gamma=gamma_raw)
    derived = {
        "beta": 2.0 * params["p"] - 1.0,
        "gamma_raw": gamma_raw,
        "gamma_step": gamma_raw * dt_series ** (1.0 / params["alpha"]),
        "factor": factor,
        "dt": dt_series,
        "range_lo": short.range[0],
        "range_hi": short.range[1],
    }

    grid_size = int(config.section("posterior").get("grid", POSTERIOR_GRID_1D))
    grid = np.linspace(short.range[0], short.range[1], grid_size)
    names = {"a": f"lag{lags[1]}", "b": f"lag{lags[0]}"}
    written += write_posterior(problem, params, raw, identity_scaling(1), grid, out_dir, names,
                               site_map=np.negative)

    backtest = config.section("backtest")
    if backtest.get("enabled", False):
        written += run_backtest(params, derived, lags[1], values[-1], backtest, config.seed, out_dir)

    report = RunReport(mode=config.mode, config_digest=config.digest, seed=config.seed, output_dir=str(out_dir),
                       train=train, params=params, raw_params=raw, derived=derived, outputs=written,
                       evaluations=train.evaluations)
    return _finish(report, config, out_dir, started, train)


def backtest_bound(range_hi: float, factor: float, longest_lag: int, alpha: float) -> float:
    """One-step truncation bound matching the histogram window of the longest lag."""
    return range_hi / (factor * longest_lag ** (1.0 / alpha))


def run_backtest(params: Dict[str, float], derived: Dict[str, float], longest_lag: int, start: float,
                 section: Dict, seed: int, out_dir: Path) -> List[str]:
    """Truncated-stable paths from the last observation, with mean and 5-95% envelope."""
    alpha = params["alpha"]
    step_law = StableParams(alpha=alpha, beta=derived["beta"], gamma=derived["gamma_step"])
    bound = backtest_bound(derived["range_hi"], derived["factor"], longest_lag, alpha)
    count = int(section.get("paths", BACKTEST_PATHS))
    steps = int(section.get("steps", BACKTEST_STEPS))
    paths = truncated_paths(step_law, bound, count, steps, start=float(start), seed=seed)
    derived["backtest_bound"] = bound
    summary = [{"step": i, "mean": float(np.mean(paths[:, i])), "q05": float(np.quantile(paths[:, i], 0.05)),
                "q95": float(np.quantile(paths[:, i], 0.95))} for i in range(paths.shape[1])]
    logger.info("Backtest: %d paths x %d steps, bound %.6g", count, steps, bound)
    return [database.insert_paths(out_dir / "backtest_paths.csv", paths).name,
            database.insert_table(out_dir / "backtest_summary.csv", summary).name]


# --------------------------
# Quadrature benchmark
# --------------------------

_BENCH_FUNCTIONS = (
    (KernelBlockKind.UU, "k"),
    (KernelBlockKind.FU, "L_x k"),
    (KernelBlockKind.FF, "L_x L_y k"),
)


def bench_rows_1d(settings: Dict) -> List[Dict]:
    """Sup-errors on [-1, 1] for M_{5/2} and a right Riemann-Liouville operator."""
    alpha = float(settings.get("alpha", BENCH_ALPHA))
    op = OperatorSpec(terms=(MultiplierTerm(TermKind.RIEMANN_LIOUVILLE_RIGHT, alpha, 1.0),))
    lags = np.linspace(-1.0, 1.0, int(settings.get("lag_points_1d", 101)))
    reference_nodes = int(settings.get("reference_nodes", REFERENCE_NODES))
    rows = []
    for theta_sq in settings.get("theta_sq", BENCH_THETA_SQ):
        theta = math.sqrt(theta_sq)
        sd = SpectralDensity(KernelFamily.MATERN, 1.0, (theta,), (2.5,))
        for kind, label in _BENCH_FUNCTIONS:
            if kind == KernelBlockKind.UU:
                reference = matern_closed_form(2.5, 1.0, theta, lags)
            else:
                reference = kernel_block_1d(kind, lags, op, sd, RuleSet(reference_nodes))
            for nodes in settings.get("nodes", BENCH_NODES):
                approx = kernel_block_1d(kind, lags, op, sd, RuleSet(int(nodes)))
                rows.append({"dim": 1, "function": label, "block": kind.value, "theta_sq": theta_sq,
                             "nodes": int(nodes), "sup_error": float(np.max(np.abs(approx - reference)))})
    return rows


def bench_rows_2d(settings: Dict) -> List[Dict]:
    """Sup-errors on [-1, 1]^2 for M_{5/2} x M_{7/2} and a fractional Laplacian, 64 angular nodes."""
    alpha = float(settings.get("alpha", BENCH_ALPHA))
    op = OperatorSpec(terms=(MultiplierTerm(TermKind.FRACTIONAL_LAPLACIAN, alpha, 1.0),), dim=2)
    axis = np.linspace(-1.0, 1.0, int(settings.get("lag_points_2d", 21)))
    grid_x, grid_y = np.meshgrid(axis, axis, indexing="ij")
    lags = np.column_stack([grid_x.ravel(), grid_y.ravel()])
    angular = angular_grid(BENCH_ANGULAR)
    reference_nodes = int(settings.get("reference_nodes", REFERENCE_NODES))
    rows = []
    for theta_sq in settings.get("theta_sq", BENCH_THETA_SQ):
        theta = math.sqrt(theta_sq)
        sd = SpectralDensity(KernelFamily.MATERN, 1.0, (theta, theta), (2.5, 3.5), dim=2)
        for kind, label in _BENCH_FUNCTIONS:
            if kind == KernelBlockKind.UU:
                reference = kernel_real_space(sd, lags)
            else:
                reference = kernel_block_2d(kind, lags, op, sd, RuleSet(reference_nodes), angular)
            for nodes in settings.get("nodes", BENCH_NODES):
                approx = kernel_block_2d(kind, lags, op, sd, RuleSet(int(nodes)), angular)
                rows.append({"dim": 2, "function": label, "block": kind.value, "theta_sq": theta_sq,
                             "nodes": int(nodes), "sup_error": float(np.max(np.abs(approx - reference)))})
    return rows


def run_bench_quadrature(config: RunConfig) -> RunReport:
    """Convergence tables of the quadrature-based kernel blocks against reference values."""
    _check_mode(config, "bench-quadrature")
    started = time.perf_counter()
    out_dir = database.get_output_dir(config.output_dir)
    settings = config.section("bench")
    written = []
    for dim in settings.get("dims", [1, 2]):
        if dim == 1:
            rows = bench_rows_1d(settings)
        elif dim == 2:
            rows = bench_rows_2d(settings)
        else:
            raise ConfigurationError(f"bench.dims entries must be 1 or 2, got {dim}.")
        written.append(database.insert_table(out_dir / f"bench_{dim}d.csv", rows).name)
    report = RunReport(mode=config.mode, config_digest=config.digest, seed=config.seed,
                       output_dir=str(out_dir), outputs=written)
    return _finish(report, config, out_dir, started)


# --------------------------
# Synthetic data
# --------------------------

def series_digest(values) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype=float).tobytes()).hexdigest()


def run_synth(config: RunConfig) -> RunReport:
    """Write the data of one synth recipe to CSV."""
    _check_mode(config, "synth")
    started = time.perf_counter()
    out_dir = database.get_output_dir(config.output_dir)
    result = run_recipe(config.section("synth"), config.seed)
    written = _write_synth(result, out_dir)
    derived = dict(result.truth)
    if result.dt is not None:
        derived["dt"] = result.dt
    if result.series is not None:
        derived["series_digest"] = series_digest(result.series[1])
    report = RunReport(mode=config.mode, config_digest=config.digest, seed=config.seed,
                       output_dir=str(out_dir), derived=derived, outputs=written)
    return _finish(report, config, out_dir, started)


RUNNERS: Dict[str, Callable[[RunConfig], RunReport]] = {
    "discover": run_discover,
    "discover-evolution": run_discover_evolution,
    "calibrate-stable": run_calibrate_stable,
    "bench-quadrature": run_bench_quadrature,
    "synth": run_synth,
}


def run(config: RunConfig) -> RunReport:
    """Dispatch on config.mode."""
    return RUNNERS[config.mode](config)
