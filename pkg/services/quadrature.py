"""
Quadrature Module - Generalized Gauss-Laguerre rules and angular trapezoid grids
Used for every half-line Fourier integral behind the kernel blocks.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from scipy.linalg import LinAlgError, eigh_tridiagonal
from scipy.special import gammaln

from services.errors import NumericError, ParameterError

logger = logging.getLogger(__name__)

# Rule sizes
DEFAULT_NODES_1D = 64
DEFAULT_RADIAL_NODES = 64
DEFAULT_ANGULAR_NODES = 64
REFERENCE_NODES = 512

NEWTON_STEPS = 2
_RESCALE_LIMIT = 1e150


@dataclass(frozen=True, eq=False)
class GaussLaguerreRule:
    """
    Nodes and weights for the weight function x^alpha_ggl e^{-x} on (0, inf).

    scaled_weights are w_i e^{x_i} x_i^{-alpha_ggl}, the factors applied to
    an integrand that has not been divided by the weight function.
    """
    order_n: int
    alpha_ggl: float
    nodes: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray
    scaled_weights: np.ndarray


@dataclass(frozen=True, eq=False)
class AngularGrid:
    """Equispaced periodic trapezoid grid on [0, 2pi)."""
    count: int
    nodes: np.ndarray
    weight: float


def _laguerre_pair(n: int, alpha: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Evaluate L_n and L_{n-1} of the generalized Laguerre family at x.

    Uses the upward recurrence (k+1) L_{k+1} = (2k+1+alpha-x) L_k - (k+alpha) L_{k-1}
    with per-point rescaling. Returns (L_n, L_{n-1}, log_scale) where the true
    values are the returned ones times exp(log_scale).
    """
    x = np.asarray(x, dtype=float)
    prev = np.zeros_like(x)
    cur = np.ones_like(x)
    log_scale = np.zeros_like(x)
    for k in range(n):
        nxt = ((2 * k + 1 + alpha - x) * cur - (k + alpha) * prev) / (k + 1)
        prev, cur = cur, nxt
        big = np.abs(cur) > _RESCALE_LIMIT
        if np.any(big):
            factor = np.abs(cur[big])
            cur[big] /= factor
            prev[big] /= factor
            log_scale[big] += np.log(factor)
    return cur, prev, log_scale


def _polish_nodes(n: int, alpha: float, nodes: np.ndarray) -> np.ndarray:
    """Newton steps on L_n using x L_n' = n L_n - (n+alpha) L_{n-1}."""
    for _ in range(NEWTON_STEPS):
        ln, lnm1, _ = _laguerre_pair(n, alpha, nodes)
        deriv = (n * ln - (n + alpha) * lnm1) / nodes
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(deriv != 0.0, ln / deriv, 0.0)
        candidate = nodes - step
        ok = np.isfinite(candidate) & (candidate > 0.0) & (np.abs(step) < 1e-6 * np.maximum(nodes, 1.0))
        nodes = np.where(ok, candidate, nodes)
    return nodes


def gauss_laguerre_rule(n: int, alpha_ggl: float) -> GaussLaguerreRule:
    """
    Build the n-point generalized Gauss-Laguerre rule for x^alpha_ggl e^{-x}.

    Nodes are the eigenvalues of the symmetric Jacobi matrix of the Laguerre
    recurrence; weights come from evaluating L_{n+1} at the nodes,
    w_i = Gamma(n+alpha+1) x_i / (n! (n+1)^2 L_{n+1}(x_i)^2), in log space.
    """
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise ParameterError(f"Rule order must be a positive integer, got {n!r}.")
    if not math.isfinite(alpha_ggl) or alpha_ggl <= -1.0:
        raise ParameterError(f"alpha_ggl must be a finite real > -1, got {alpha_ggl!r}.")
    n = int(n)
    alpha = float(alpha_ggl)

    k = np.arange(n, dtype=float)
    diagonal = 2.0 * k + alpha + 1.0
    off_diagonal = np.sqrt(k[1:] * (k[1:] + alpha))
    if n == 1:
        nodes = diagonal.copy()
    else:
        try:
            nodes = eigh_tridiagonal(diagonal, off_diagonal, eigvals_only=True)
        except (LinAlgError, ValueError) as exc:
            raise NumericError(f"Eigen-solve failed for n={n}, alpha_ggl={alpha}: {exc}") from exc
    if not np.all(np.isfinite(nodes)) or nodes[0] <= 0.0:
        raise NumericError(f"Eigen-solve produced invalid nodes for n={n}, alpha_ggl={alpha}.")

    nodes = np.sort(_polish_nodes(n, alpha, np.sort(nodes)))
    if np.any(np.diff(nodes) <= 0.0):
        raise NumericError(f"Nodes not strictly increasing for n={n}, alpha_ggl={alpha}.")

    lnp1, _, log_scale = _laguerre_pair(n + 1, alpha, nodes)
    log_weights = (
        gammaln(n + alpha + 1.0) - gammaln(n + 1.0) + np.log(nodes)
        - 2.0 * math.log(n + 1.0) - 2.0 * (np.log(np.abs(lnp1)) + log_scale)
    )
    weights = np.exp(log_weights)
    scaled_weights = np.exp(log_weights + nodes - alpha * np.log(nodes))

    for array in (nodes, weights, log_weights, scaled_weights):
        array.setflags(write=False)
    logger.debug("Built Gauss-Laguerre rule n=%d alpha_ggl=%.6g", n, alpha)
    return GaussLaguerreRule(
        order_n=n,
        alpha_ggl=alpha,
        nodes=nodes,
        weights=weights,
        log_weights=log_weights,
        scaled_weights=scaled_weights,
    )


@lru_cache(maxsize=256)
def _cached_rule(n: int, alpha_key: float) -> GaussLaguerreRule:
    return gauss_laguerre_rule(n, alpha_key)


def cached_rule(n: int, alpha_ggl: float) -> GaussLaguerreRule:
    """Rule shared per (n, alpha_ggl rounded at 1e-12)."""
    return _cached_rule(int(n), round(float(alpha_ggl), 12))


def integrate_halfline(rule: GaussLaguerreRule, f: Callable[[np.ndarray], np.ndarray]):
    """Sum_i w_i e^{x_i} x_i^{-alpha_ggl} f(x_i)."""
    values = np.asarray(f(rule.nodes))
    bad = ~np.isfinite(values)
    if np.any(bad):
        node = rule.nodes[np.argmax(bad)]
        raise NumericError(f"Integrand is not finite at node {node:.6g}.")
    return np.sum(rule.scaled_weights * values)


def angular_grid(count: int) -> AngularGrid:
    """Equispaced nodes 2*pi*j/count with weight 2*pi/count."""
    if isinstance(count, bool) or not isinstance(count, (int, np.integer)) or count < 4:
        raise ParameterError(f"Angular grid needs at least 4 nodes, got {count!r}.")
    nodes = 2.0 * np.pi * np.arange(count) / count
    nodes.setflags(write=False)
    return AngularGrid(count=int(count), nodes=nodes, weight=2.0 * np.pi / count)


def integrate_angular(grid: AngularGrid, f: Callable[[np.ndarray], np.ndarray]):
    """Periodic trapezoid rule over the grid."""
    values = np.asarray(f(grid.nodes))
    if not np.all(np.isfinite(values)):
        raise NumericError("Angular integrand is not finite.")
    return grid.weight * np.sum(values)
