"""
Likelihood Module - Negative log marginal likelihood, gradient and GP posterior
for the joint (u, f) framework and the two-snapshot evolution framework.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf

from services.errors import ConfigurationError, DataError, FactorizationError, NumericError, ParameterError
from services.kernels import QuadratureSettings, assemble_covariance, cross_covariance
from services.operators import OperatorSpec
from services.optimize import (
    LbfgsOptions,
    TrainResult,
    TransformTable,
    lbfgs_multistart,
    transform_derivative,
)
from services.spectral import SpectralDensity

logger = logging.getLogger(__name__)

# Jitter ladder, relative to the mean diagonal
JITTER_START = 1e-10
JITTER_MAX = 1e-6
# Noise is raised by this factor when the starting covariance cannot be factored
NOISE_RAISE_FACTOR = 10.0
START_RETRIES = 3


class Framework(str, Enum):
    TIME_INDEPENDENT = "time_independent"
    EVOLUTION = "evolution"


@dataclass(frozen=True, eq=False)
class GpProblem:
    """
    Data and model for one training problem.
    Group a holds u (or the snapshot at step n), group b holds f (or step n-1).
    """
    framework: Framework
    sites_a: np.ndarray
    values_a: np.ndarray
    sites_b: np.ndarray
    values_b: np.ndarray
    sd: SpectralDensity
    op: OperatorSpec
    transforms: TransformTable
    dt: Optional[float] = None
    quadrature: QuadratureSettings = QuadratureSettings()
    threads: int = 1

    def __post_init__(self):
        for label, sites, values in (("a", self.sites_a, self.values_a), ("b", self.sites_b, self.values_b)):
            if len(sites) != len(values):
                raise DataError(f"Group {label}: {len(sites)} sites but {len(values)} values.")
            if not (np.all(np.isfinite(sites)) and np.all(np.isfinite(values))):
                raise DataError(f"Group {label} contains non-finite sites or values.")
            expected_ndim = 1 if self.sd.dim == 1 else 2
            if np.ndim(sites) != expected_ndim:
                raise DataError(f"Group {label} sites do not match dimension {self.sd.dim}.")
        if self.is_evolution:
            if self.dt is None or self.op.evolution is None or self.op.evolution.dt != self.dt:
                raise ConfigurationError("Evolution problems need dt on both the problem and the operator.")
        elif self.dt is not None or self.op.evolution is not None:
            raise ConfigurationError("dt is only meaningful for the evolution framework.")

    @property
    def is_evolution(self) -> bool:
        return self.framework == Framework.EVOLUTION

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.values_a, self.values_b])

    @property
    def size(self) -> int:
        return len(self.values_a) + len(self.values_b)


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    lower: np.ndarray
    jitter_applied: float
    log_det: float


@dataclass
class NlmlEvaluation:
    value: float
    gradient: np.ndarray
    jitter: float = 0.0
    failure: Optional[str] = None
    params: Dict[str, float] = field(default_factory=dict)


def cholesky_with_jitter(K: np.ndarray) -> CholeskyFactor:
    """Lower Cholesky factor, adding jitter 1e-10..1e-6 times the mean diagonal if needed."""
    K = np.asarray(K, dtype=float)
    if not np.all(np.isfinite(K)):
        raise FactorizationError("Matrix contains non-finite entries.")
    mean_diag = float(np.mean(np.diag(K))) if K.size else 0.0
    scale = mean_diag if mean_diag > 0 else 1.0
    ladder = [0.0]
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        ladder.append(jitter * scale)
        jitter *= 10.0
    info = 0
    for amount in ladder:
        shifted = K + amount * np.eye(K.shape[0]) if amount else K
        lower, info = dpotrf(shifted, lower=1, clean=1)
        if info == 0:
            if amount:
                logger.warning("Cholesky needed jitter %.3g (%.1e of mean diagonal)", amount, amount / scale)
            log_det = 2.0 * float(np.sum(np.log(np.diag(lower))))
            return CholeskyFactor(lower=lower, jitter_applied=amount, log_det=log_det)
    raise FactorizationError(
        f"Matrix is not positive definite at jitter {ladder[-1]:.3g}; leading minor {info} fails.",
        minor_index=int(info))


def _evaluate(problem: GpProblem, unconstrained, with_gradient: bool = True) -> NlmlEvaluation:
    table = problem.transforms
    u = np.asarray(unconstrained, dtype=float)
    nan_gradient = np.full(u.shape, np.nan)
    params = table.constrained_map(u)
    targets = table.trainable_names if with_gradient else ()
    try:
        assembly = assemble_covariance(problem, params, targets)
        factor = cholesky_with_jitter(assembly.matrix)
    except (NumericError, ParameterError) as exc:
        logger.warning("Objective set to +inf: %s", exc)
        return NlmlEvaluation(math.inf, nan_gradient, failure=str(exc), params=params)

    y = problem.values
    alpha = cho_solve((factor.lower, True), y)
    n = len(y)
    value = 0.5 * float(y.dot(alpha)) + 0.5 * factor.log_det + 0.5 * n * math.log(2.0 * math.pi)
    logger.debug("nlml %.10g jitter %.3g", value, factor.jitter_applied)
    if not with_gradient:
        return NlmlEvaluation(value, nan_gradient, factor.jitter_applied, params=params)

    weight = cho_solve((factor.lower, True), np.eye(n)) - np.outer(alpha, alpha)
    constrained_grad = np.array([0.5 * float(np.sum(weight * assembly.gradients[name]))
                                 for name in table.trainable_names])
    gradient = constrained_grad * transform_derivative(table, u)
    return NlmlEvaluation(value, gradient, factor.jitter_applied, params=params)


def nlml(problem: GpProblem, unconstrained_params) -> float:
    """1/2 y^T K^-1 y + 1/2 log|K| + N/2 log 2 pi; +inf when K cannot be factored."""
    return _evaluate(problem, unconstrained_params, with_gradient=False).value


def nlml_grad(problem: GpProblem, unconstrained_params) -> np.ndarray:
    """Gradient of nlml in unconstrained coordinates (trace identity plus chain rule)."""
    return _evaluate(problem, unconstrained_params).gradient


class ObjectiveCache:
    """Evaluates value and gradient together and reuses them for the same point."""

    def __init__(self, problem: GpProblem):
        self.problem = problem
        self._last_x: Optional[np.ndarray] = None
        self._last: Optional[NlmlEvaluation] = None
        self.jitters = []
        self.failures = 0

    def _at(self, x) -> NlmlEvaluation:
        x = np.asarray(x, dtype=float)
        if self._last_x is None or not np.array_equal(x, self._last_x):
            self._last = _evaluate(self.problem, x)
            self._last_x = x.copy()
            if self._last.failure is not None:
                self.failures += 1
            else:
                self.jitters.append(self._last.jitter)
        return self._last

    def value(self, x) -> float:
        return self._at(x).value

    def gradient(self, x) -> np.ndarray:
        return self._at(x).gradient


def feasible_start(problem: GpProblem, cache: ObjectiveCache) -> GpProblem:
    """
    Raise the trainable noise levels until the NLML is finite at the initial point,
    at most START_RETRIES times. Returns the (possibly updated) problem.
    """
    for _ in range(START_RETRIES):
        if math.isfinite(cache.value(problem.transforms.initial_unconstrained())):
            return problem
        raised = {e.name: e.initial * NOISE_RAISE_FACTOR
                  for e in problem.transforms.trainable if e.name.startswith("noise")}
        if not raised:
            return problem
        logger.warning("NLML is infinite at the initial point; raising noise to %s",
                       ", ".join(f"{name}={value:.3g}" for name, value in raised.items()))
        problem = replace(problem, transforms=problem.transforms.with_initial(raised))
        cache.problem = problem
    return problem


def train_problem(problem: GpProblem, options: LbfgsOptions = LbfgsOptions(),
                  seed: Optional[int] = None, config_digest: str = "") -> TrainResult:
    """Minimize the NLML over the trainable parameters of the problem's transform table."""
    cache = ObjectiveCache(problem)
    problem = feasible_start(problem, cache)
    x0 = problem.transforms.initial_unconstrained()
    logger.info("Training %d parameters: %s", len(x0), ", ".join(problem.transforms.trainable_names))
    result = lbfgs_multistart(cache.value, cache.gradient, x0, options, seed=seed)
    jitters = [j for j in cache.jitters if j > 0]
    return replace(
        result,
        params=problem.transforms.constrained_map(result.x),
        jitter_max=max(jitters, default=0.0),
        jitter_count=len(jitters),
        failed_evaluations=cache.failures,
        seed=seed,
        config_digest=config_digest,
    )


def posterior_predict(problem: GpProblem, trained_params: Dict[str, float], query_sites,
                      which: str = "a") -> Tuple[np.ndarray, np.ndarray]:
    """GP conditional mean and standard deviation of the a- or b-function at query sites."""
    assembly = assemble_covariance(problem, trained_params)
    factor = cholesky_with_jitter(assembly.matrix)
    k_star, prior = cross_covariance(problem, trained_params, query_sites, which)
    alpha = cho_solve((factor.lower, True), problem.values)
    mean = k_star @ alpha
    v = solve_triangular(factor.lower, k_star.T, lower=True)
    variance = np.clip(prior - np.sum(v * v, axis=0), 0.0, None)
    return mean, np.sqrt(variance)
