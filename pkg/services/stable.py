"""
Stable Module - alpha-stable paths, densities and empirical increment histograms
Parameterization S_alpha(beta, gamma, delta) is the one generated by the stable
diffusion operator: the characteristic function is exp(t m(xi)) with m from
stable_multiplier, which is the usual S1 form
exp(-gamma^alpha |xi|^alpha (1 - i beta sgn(xi) tan(pi alpha/2)) + i delta xi).
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.integrate import quad

from services.errors import DataError, NumericError, ParameterError
from services.operators import StableDiffusionSpec, multiplier_eval, stable_multiplier

logger = logging.getLogger(__name__)

DEFAULT_BINS = 40
CENTRAL_MASS = 0.99
MIN_ACCEPTANCE = 1e-3
DENSITY_ABS_TOL = 1e-8
# Oscillations integrated directly before switching to the Fourier-weighted tail
_DIRECT_PERIODS = 10
_QUAD_LIMIT = 400


@dataclass(frozen=True)
class StableParams:
    alpha: float
    beta: float
    gamma: float
    delta: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.alpha) or not (0.0 < self.alpha <= 2.0):
            raise ParameterError(f"Stable alpha must lie in (0, 2], got {self.alpha}.")
        if not math.isfinite(self.beta) or not (-1.0 <= self.beta <= 1.0):
            raise ParameterError(f"Stable beta must lie in [-1, 1], got {self.beta}.")
        if not math.isfinite(self.gamma) or self.gamma <= 0.0:
            raise ParameterError(f"Stable gamma must be positive, got {self.gamma}.")
        if not math.isfinite(self.delta):
            raise ParameterError(f"Stable delta must be finite, got {self.delta}.")

    @classmethod
    def from_diffusion(cls, spec: StableDiffusionSpec, t: float = 1.0) -> "StableParams":
        """Transition law at time t: S_alpha(2p - 1, gamma t^(1/alpha), 0)."""
        return cls(alpha=spec.alpha, beta=2.0 * spec.p - 1.0, gamma=spec.gamma * t ** (1.0 / spec.alpha))

    def scaled(self, dt: float) -> "StableParams":
        """Law of an increment over time dt."""
        return StableParams(self.alpha, self.beta, self.gamma * dt ** (1.0 / self.alpha), self.delta * dt)


@dataclass(frozen=True, eq=False)
class EmpiricalDensity:
    t: float
    lag: int
    centers: np.ndarray
    density: np.ndarray
    bin_width: float
    sample_count: int
    dropped: int
    range: Tuple[float, float]
    sparse: bool = False


# --------------------------
# Sampling
# --------------------------

def _cms_draws(params: StableParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Chambers-Mallows-Stuck draws in the S1 parameterization."""
    alpha, beta, gamma, delta = params.alpha, params.beta, params.gamma, params.delta
    u = np.pi * (rng.random(size) - 0.5)
    w = -np.log(rng.random(size))
    if alpha == 1.0:
        t1 = (0.5 * np.pi + beta * u) * np.tan(u)
        t2 = beta * np.log((0.5 * np.pi * w * np.cos(u)) / (0.5 * np.pi + beta * u))
        x = (2.0 / np.pi) * (t1 - t2)
        return gamma * x + delta + beta * (2.0 / np.pi) * gamma * math.log(gamma)
    shift = math.atan(beta * math.tan(0.5 * np.pi * alpha)) / alpha
    t1 = np.sin(alpha * (u + shift)) / (math.cos(alpha * shift) * np.cos(u)) ** (1.0 / alpha)
    t2 = (np.cos(alpha * shift + (alpha - 1.0) * u) / w) ** ((1.0 - alpha) / alpha)
    return gamma * t1 * t2 + delta


def sample_stable(params: StableParams, n: int, seed=None) -> np.ndarray:
    """n independent draws from S_alpha(beta, gamma, delta)."""
    return _cms_draws(params, int(n), np.random.default_rng(seed))


def sample_stable_path(params: StableParams, steps: int, dt: float, seed=None) -> np.ndarray:
    """Cumulative sum of steps i.i.d. increments from S_alpha(beta, gamma dt^(1/alpha), delta dt)."""
    if steps < 1:
        raise ParameterError(f"A path needs at least one step, got {steps}.")
    if not dt > 0:
        raise ParameterError(f"Time step must be positive, got {dt}.")
    increments = _cms_draws(params.scaled(dt), int(steps), np.random.default_rng(seed))
    return np.cumsum(increments)


def spawn_seeds(seed, count: int):
    """Independent child seeds for concurrent paths (SeedSequence spawning)."""
    return np.random.SeedSequence(seed).spawn(count)


# --------------------------
# Density and distribution function
# --------------------------

def _log_characteristic(params: StableParams):
    """Function xi -> log phi(xi) for xi > 0."""
    alpha, beta, gamma, delta = params.alpha, params.beta, params.gamma, params.delta
    if abs(alpha - 1.0) <= 1e-12:
        return lambda xi: -gamma * xi * (1.0 + 1j * beta * (2.0 / np.pi) * np.log(xi)) + 1j * delta * xi
    op = stable_multiplier(StableDiffusionSpec(alpha=alpha, p=0.5 * (1.0 + beta), gamma=gamma))
    # below alpha = 1 the generator carries the opposite sign
    sign = -math.copysign(1.0, math.cos(0.5 * math.pi * alpha))
    return lambda xi: sign * multiplier_eval(op, xi) + 1j * delta * xi


def _decay_cutoff(params: StableParams) -> float:
    """Frequency beyond which |phi| < 1e-16."""
    return 37.0 ** (1.0 / params.alpha) / params.gamma


def _fourier_halfline(f_cos, f_sin, x: float, cutoff: float) -> Tuple[float, float]:
    """
    int_0^inf f_cos(xi) cos(x xi) + f_sin(xi) sin(x xi) d xi and its error estimate:
    plain adaptive quadrature over the first few periods, Fourier-weighted tail after.
    """
    integrand = lambda xi: f_cos(xi) * math.cos(x * xi) + f_sin(xi) * math.sin(x * xi)
    if x == 0.0:
        return quad(f_cos, 0.0, np.inf, limit=_QUAD_LIMIT, epsabs=1e-12)
    omega = abs(x)
    sign = 1.0 if x > 0 else -1.0
    split = min(cutoff, 2.0 * np.pi * _DIRECT_PERIODS / omega)
    head, head_err = quad(integrand, 0.0, split, limit=_QUAD_LIMIT, epsabs=1e-12)
    if split >= cutoff:
        return head, head_err
    tail_cos, err_cos = quad(f_cos, split, np.inf, weight="cos", wvar=omega, limlst=200)
    tail_sin, err_sin = quad(f_sin, split, np.inf, weight="sin", wvar=omega, limlst=200)
    return head + tail_cos + sign * tail_sin, head_err + err_cos + err_sin


def stable_pdf(params: StableParams, x) -> np.ndarray:
    """
    Density (1/pi) int_0^inf Re[e^{-i xi x} phi(xi)] d xi by half-line quadrature.
    Raises NumericError when the error estimate exceeds 1e-8.
    """
    log_phi = _log_characteristic(params)
    cutoff = _decay_cutoff(params)

    def f_cos(xi):
        value = np.exp(log_phi(xi))
        return float(np.real(value))

    def f_sin(xi):
        value = np.exp(log_phi(xi))
        return float(np.imag(value))

    points = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty(points.shape)
    for index, point in enumerate(points):
        value, error = _fourier_halfline(f_cos, f_sin, float(point), cutoff)
        if error > DENSITY_ABS_TOL:
            raise NumericError(
                f"Density quadrature did not converge at x={point:.6g} (error {error:.2e}); "
                "raise the subdivision limit.")
        out[index] = max(value / np.pi, 0.0)
    return out if np.ndim(x) else out[0]


def stable_cdf(params: StableParams, x) -> np.ndarray:
    """Distribution function by Gil-Pelaez inversion, 1/2 - (1/pi) int_0^inf Im[e^{-i xi x} phi(xi)]/xi d xi."""
    log_phi = _log_characteristic(params)
    cutoff = _decay_cutoff(params)

    def f_cos(xi):
        return float(np.imag(np.exp(log_phi(xi)))) / xi

    def f_sin(xi):
        return -float(np.real(np.exp(log_phi(xi)))) / xi

    points = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty(points.shape)
    for index, point in enumerate(points):
        if math.isinf(point):
            out[index] = 1.0 if point > 0 else 0.0
            continue
        value, error = _fourier_halfline(f_cos, f_sin, float(point), cutoff)
        if error > 10 * DENSITY_ABS_TOL:
            raise NumericError(f"Distribution-function quadrature did not converge at x={point:.6g}.")
        out[index] = min(max(0.5 - value / np.pi, 0.0), 1.0)
    return out if np.ndim(x) else out[0]


# --------------------------
# Empirical densities
# --------------------------

def increments(series, lag: int) -> np.ndarray:
    """All overlapping lag-n increments X[i+n] - X[i]."""
    series = np.asarray(series, dtype=float)
    if lag < 1 or len(series) <= lag:
        raise DataError(f"Series of length {len(series)} is too short for lag {lag}.")
    return series[lag:] - series[:-lag]


def default_range(values: np.ndarray) -> Tuple[float, float]:
    """Symmetric interval covering the central 99% of the values; (-1, 1) if degenerate."""
    tail = 0.5 * (1.0 - CENTRAL_MASS)
    lo, hi = np.quantile(values, [tail, 1.0 - tail])
    half = max(abs(lo), abs(hi))
    if not half > 0:
        return -1.0, 1.0
    return -half, half


def empirical_density(series, lag_n: int, bins: int = DEFAULT_BINS,
                      value_range: Optional[Tuple[float, float]] = None, dt: float = 1.0) -> EmpiricalDensity:
    """
    Normalized histogram of the lag-n increments. Increments outside the range
    are dropped and counted; fewer than 10 retained increments per bin flags the result as sparse.
    """
    if bins < 5:
        raise ParameterError(f"Histograms need at least 5 bins, got {bins}.")
    values = increments(series, lag_n)
    lo, hi = default_range(values) if value_range is None else (float(value_range[0]), float(value_range[1]))
    if not lo < hi:
        raise ParameterError(f"Histogram range needs lo < hi, got ({lo}, {hi}).")
    keep = (values >= lo) & (values <= hi)
    kept = values[keep]
    if kept.size == 0:
        raise DataError(f"No lag-{lag_n} increments fall inside ({lo}, {hi}).")
    counts, edges = np.histogram(kept, bins=bins, range=(lo, hi))
    width = (hi - lo) / bins
    density = counts / (kept.size * width)
    sparse = kept.size < 10 * bins
    if sparse:
        logger.warning("Lag-%d histogram is sparse: %d increments for %d bins", lag_n, kept.size, bins)
    return EmpiricalDensity(
        t=lag_n * dt,
        lag=lag_n,
        centers=0.5 * (edges[:-1] + edges[1:]),
        density=density,
        bin_width=width,
        sample_count=int(kept.size),
        dropped=int(values.size - kept.size),
        range=(lo, hi),
        sparse=sparse,
    )


# --------------------------
# Truncated sampling and scaling
# --------------------------

def sample_truncated_stable(params: StableParams, bound: float, n: int, seed=None) -> np.ndarray:
    """Rejection sampling of S_alpha(beta, gamma, delta) restricted to [-bound, bound]."""
    if not bound > 0:
        raise ParameterError(f"Truncation bound must be positive, got {bound}.")
    acceptance = float(stable_cdf(params, bound) - stable_cdf(params, -bound))
    if acceptance < MIN_ACCEPTANCE:
        raise ParameterError(
            f"Acceptance probability {acceptance:.2e} for bound {bound} is below {MIN_ACCEPTANCE}; use a larger bound.")
    rng = np.random.default_rng(seed)
    accepted = []
    remaining = int(n)
    while remaining > 0:
        batch = int(math.ceil(1.2 * remaining / acceptance)) + 16
        draws = _cms_draws(params, batch, rng)
        draws = draws[np.abs(draws) <= bound][:remaining]
        accepted.append(draws)
        remaining -= draws.size
    return np.concatenate(accepted) if accepted else np.empty(0)


def truncated_paths(params: StableParams, bound: float, paths: int, steps: int,
                    start: float = 0.0, seed=None) -> np.ndarray:
    """paths x (steps + 1) array of truncated-stable walks starting at start."""
    out = np.empty((paths, steps + 1))
    out[:, 0] = start
    for index, child in enumerate(spawn_seeds(seed, paths)):
        out[index, 1:] = start + np.cumsum(sample_truncated_stable(params, bound, steps, child))
    return out


@dataclass(frozen=True)
class SeriesScaling:
    """Bookkeeping for a series multiplied by factor before calibration."""
    factor: float

    def unscale_series(self, series) -> np.ndarray:
        return np.asarray(series, dtype=float) / self.factor

    def unscale_gamma(self, gamma_scaled: float) -> float:
        return gamma_scaled / self.factor


def rescale_series(series, factor: float) -> Tuple[np.ndarray, SeriesScaling]:
    """Multiply the series by factor and keep what is needed to report raw-unit gamma."""
    if not math.isfinite(factor) or factor <= 0:
        raise ParameterError(f"Scaling factor must be positive, got {factor}.")
    return np.asarray(series, dtype=float) * factor, SeriesScaling(float(factor))
