"""
Sampling Service - Experimental designs and synthetic data recipes
Latin-hypercube site selection and the closed-form or reference-quadrature
data behind the shipped experiments.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import j0

from services.errors import ConfigurationError, ParameterError
from services.quadrature import REFERENCE_NODES, cached_rule
from services.stable import StableParams, sample_stable_path

logger = logging.getLogger(__name__)

LHS_CANDIDATES = 100
DEFAULT_DOMAIN_1D = ((-2.0, 2.0),)
DEFAULT_DOMAIN_2D = ((-2.0, 2.0), (-2.0, 2.0))
DEFAULT_EVOLUTION_DOMAIN = ((0.0, 2.0 * math.pi),)


@dataclass
class SiteValueSet:
    """Sites (n,) or (n, 2) with their values."""
    sites: np.ndarray
    values: np.ndarray


@dataclass
class SynthResult:
    recipe: str
    groups: Dict[str, SiteValueSet] = field(default_factory=dict)
    series: Optional[Tuple[np.ndarray, np.ndarray]] = None
    dt: Optional[float] = None
    truth: Dict[str, float] = field(default_factory=dict)


# --------------------------
# Latin hypercube
# --------------------------

def _check_bounds(bounds) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or not np.all(bounds[:, 0] < bounds[:, 1]):
        raise ParameterError(f"Domain must be a list of [lo, hi] pairs with lo < hi, got {bounds.tolist()}.")
    return bounds


def latin_hypercube(n: int, bounds, seed=None, candidates: int = LHS_CANDIDATES) -> np.ndarray:
    """
    n points in the box, one per stratum along every axis.
    Among `candidates` random designs the one with the largest minimum pairwise distance is kept.
    """
    bounds = _check_bounds(bounds)
    if n < 1:
        raise ParameterError(f"Need at least one sample, got {n}.")
    dim = bounds.shape[0]
    rng = np.random.default_rng(seed)
    best, best_score = None, -math.inf
    for _ in range(max(1, candidates)):
        strata = np.stack([rng.permutation(n) for _ in range(dim)], axis=1)
        unit = (strata + rng.random((n, dim))) / n
        score = float(np.min(pdist(unit))) if n > 1 else 0.0
        if score > best_score:
            best, best_score = unit, score
    points = bounds[:, 0] + best * (bounds[:, 1] - bounds[:, 0])
    return points[:, 0] if dim == 1 else points


# --------------------------
# Fractional Poisson data, u = exp(-|x|^2)
# --------------------------

def fracpoisson_u(sites) -> np.ndarray:
    sites = np.asarray(sites, dtype=float)
    if sites.ndim == 1:
        return np.exp(-sites ** 2)
    return np.exp(-np.sum(sites ** 2, axis=1))


def fracpoisson_f_1d(sites, alpha: float, coeff: float, nodes: int = REFERENCE_NODES) -> np.ndarray:
    """C (-Delta)^{alpha/2} exp(-x^2) by a reference Gauss-Laguerre rule with weight xi^alpha e^-xi."""
    rule = cached_rule(nodes, alpha)
    xi = rule.nodes
    # e^{xi} e^{-xi^2/4} / sqrt(2) on top of the rule weight
    log_amp = rule.log_weights + xi - 0.25 * xi ** 2
    amp = np.exp(log_amp) / math.sqrt(2.0)
    x = np.asarray(sites, dtype=float).reshape(-1)
    return coeff * (2.0 / math.sqrt(2.0 * math.pi)) * (np.cos(np.outer(x, xi)) @ amp)


def fracpoisson_f_2d(sites, alpha: float, coeff: float, nodes: int = REFERENCE_NODES) -> np.ndarray:
    """C (-Delta)^{alpha/2} exp(-|x|^2) in the plane as a Hankel transform."""
    rule = cached_rule(nodes, alpha + 1.0)
    r = rule.nodes
    amp = np.exp(rule.log_weights + r - 0.25 * r ** 2)
    radius = np.hypot(*np.asarray(sites, dtype=float).reshape(-1, 2).T)
    return 0.5 * coeff * (j0(np.outer(radius, r)) @ amp)


def _noisy(values: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    if std < 0:
        raise ParameterError(f"Noise standard deviation must be non-negative, got {std}.")
    return values + std * rng.standard_normal(values.shape) if std > 0 else values


def _noise_pair(settings: dict) -> Tuple[float, float]:
    noise = settings.get("noise", [0.0, 0.0])
    if len(noise) != 2:
        raise ConfigurationError("synth.noise needs two standard deviations (group a, group b).")
    return float(noise[0]), float(noise[1])


def synth_fracpoisson(settings: dict, seed: int, dim: int) -> SynthResult:
    alpha = float(settings.get("alpha", math.sqrt(2.0) if dim == 1 else math.sqrt(3.0)))
    coeff = float(settings.get("coeff", 1.25 if dim == 1 else 1.0))
    domain = settings.get("domain", DEFAULT_DOMAIN_1D if dim == 1 else DEFAULT_DOMAIN_2D)
    if len(domain) != dim:
        raise ConfigurationError(f"synth.domain needs {dim} interval(s).")
    n_a = int(settings.get("n_a", 7 if dim == 1 else 40))
    n_b = int(settings.get("n_b", 11 if dim == 1 else 40))
    nodes = int(settings.get("reference_nodes", REFERENCE_NODES))
    noise_a, noise_b = _noise_pair(settings)

    sites_a = latin_hypercube(n_a, domain, seed)
    sites_b = latin_hypercube(n_b, domain, seed + 1)
    rng = np.random.default_rng(seed + 2)
    f_eval = fracpoisson_f_1d if dim == 1 else fracpoisson_f_2d
    values_a = _noisy(fracpoisson_u(sites_a), noise_a, rng)
    values_b = _noisy(f_eval(sites_b, alpha, coeff, nodes), noise_b, rng)
    logger.info("fracpoisson-%dd: %d u-sites, %d f-sites, alpha=%.6g C=%.6g", dim, n_a, n_b, alpha, coeff)
    return SynthResult(
        recipe=f"fracpoisson-{dim}d",
        groups={"u": SiteValueSet(sites_a, values_a), "f": SiteValueSet(sites_b, values_b)},
        truth={"alpha": alpha, "C": coeff, "noise_a": noise_a, "noise_b": noise_b},
    )


# --------------------------
# Integer-order evolution data
# --------------------------

def evolution_solution(case: str, x, t: float) -> np.ndarray:
    """Closed-form solutions started from sin(x)."""
    x = np.asarray(x, dtype=float)
    if case == "advection":
        return np.sin(x - t)
    if case == "diffusion":
        return np.exp(-t) * np.sin(x)
    if case == "advection_diffusion":
        return np.exp(-t) * np.sin(x - t)
    raise ConfigurationError(f"Unknown evolution case {case!r}.")


def synth_evolution(settings: dict, seed: int) -> SynthResult:
    case = settings.get("case", "advection")
    times: Sequence[float] = settings.get("times", [0.2, 0.3])
    if len(times) != 2 or not times[1] > times[0]:
        raise ConfigurationError("synth.times needs two increasing snapshot times.")
    points = int(settings.get("points", 30))
    domain = settings.get("domain", DEFAULT_EVOLUTION_DOMAIN)
    noise_next, noise_prev = _noise_pair(settings)
    rng = np.random.default_rng(seed + 2)

    sites_next = latin_hypercube(points, domain, seed)
    sites_prev = latin_hypercube(points, domain, seed + 1)
    values_next = _noisy(evolution_solution(case, sites_next, times[1]), noise_next, rng)
    values_prev = _noisy(evolution_solution(case, sites_prev, times[0]), noise_prev, rng)
    return SynthResult(
        recipe="evolution-sine",
        groups={"n": SiteValueSet(sites_next, values_next), "nm1": SiteValueSet(sites_prev, values_prev)},
        dt=float(times[1] - times[0]),
    )


# --------------------------
# Stable paths
# --------------------------

def synth_stable_path(settings: dict, seed: int) -> SynthResult:
    alpha = float(settings.get("alpha", math.sqrt(2.0)))
    p = float(settings.get("p", 0.8))
    gamma = float(settings.get("gamma", 1.0))
    dt = float(settings.get("dt", 0.01))
    steps = int(settings.get("steps", 1200))
    params = StableParams(alpha=alpha, beta=2.0 * p - 1.0, gamma=gamma)
    path = sample_stable_path(params, steps, dt, seed)
    t = dt * np.arange(1, steps + 1)
    return SynthResult(recipe="stable-path", series=(t, path), dt=dt,
                       truth={"alpha": alpha, "p": p, "gamma": gamma, "beta": 2.0 * p - 1.0})


def run_recipe(settings: dict, seed: int) -> SynthResult:
    """Dispatch on settings['recipe']."""
    recipe = settings.get("recipe")
    if recipe == "fracpoisson-1d":
        return synth_fracpoisson(settings, seed, dim=1)
    if recipe == "fracpoisson-2d":
        return synth_fracpoisson(settings, seed, dim=2)
    if recipe == "evolution-sine":
        return synth_evolution(settings, seed)
    if recipe == "stable-path":
        return synth_stable_path(settings, seed)
    raise ConfigurationError(f"Unknown synth recipe {recipe!r}.")

