"""
Optimize Module - Parameter transforms and limited-memory BFGS
Training runs in an unconstrained space; each parameter maps to its
admissible range through an identity, log or sigmoid transform.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logit

from services.errors import NumericError, OptimizerError, ParameterError

logger = logging.getLogger(__name__)

# L-BFGS defaults
DEFAULT_MEMORY = 10
DEFAULT_MAX_ITER = 2000
DEFAULT_GRAD_TOL = 1e-6
DEFAULT_F_TOL = 1e-10
WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9
CURVATURE_TOL = 1e-10


class TransformKind(str, Enum):
    IDENTITY = "identity"
    LOG = "log"
    SIGMOID = "sigmoid"
    LOG_SIGMOID = "log_sigmoid"


@dataclass(frozen=True)
class TransformEntry:
    name: str
    kind: TransformKind
    initial: float
    trainable: bool = True
    lo: float = 0.0
    hi: float = 1.0
    floor: float = 0.0


@dataclass(frozen=True)
class TransformTable:
    entries: Tuple[TransformEntry, ...]

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    @property
    def trainable(self) -> List[TransformEntry]:
        return [e for e in self.entries if e.trainable]

    @property
    def trainable_names(self) -> List[str]:
        return [e.name for e in self.trainable]

    def entry(self, name: str) -> TransformEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise ParameterError(f"No transform entry named {name!r}.")

    def initial_unconstrained(self) -> np.ndarray:
        return transform_inverse(self, [e.initial for e in self.trainable])

    def constrained_map(self, unconstrained) -> Dict[str, float]:
        """Full parameter map: trainable entries from unconstrained values, fixed ones at their initial value."""
        values = {e.name: float(e.initial) for e in self.entries}
        for e, c in zip(self.trainable, transform_forward(self, unconstrained)):
            values[e.name] = float(c)
        return values

    def with_initial(self, values: Dict[str, float]) -> "TransformTable":
        return TransformTable(tuple(
            replace(e, initial=float(values.get(e.name, e.initial))) for e in self.entries))


def _forward_one(e: TransformEntry, u: float) -> float:
    if e.kind == TransformKind.IDENTITY:
        return u
    if e.kind == TransformKind.LOG:
        return e.floor + math.exp(u)
    if e.kind == TransformKind.SIGMOID:
        return e.lo + (e.hi - e.lo) * float(expit(u))
    log_lo, log_hi = math.log(e.lo), math.log(e.hi)
    return math.exp(log_lo + (log_hi - log_lo) * float(expit(u)))


def _inverse_one(e: TransformEntry, c: float) -> float:
    if not math.isfinite(c):
        raise ParameterError(f"{e.name}: value {c} is not finite.")
    if e.kind == TransformKind.IDENTITY:
        return c
    if e.kind == TransformKind.LOG:
        if c <= e.floor:
            raise ParameterError(f"{e.name}: value {c} must exceed {e.floor}.")
        return math.log(c - e.floor)
    if not (e.lo < c < e.hi):
        raise ParameterError(f"{e.name}: value {c} must lie strictly inside ({e.lo}, {e.hi}).")
    if e.kind == TransformKind.SIGMOID:
        return float(logit((c - e.lo) / (e.hi - e.lo)))
    log_lo, log_hi = math.log(e.lo), math.log(e.hi)
    return float(logit((math.log(c) - log_lo) / (log_hi - log_lo)))


def _derivative_one(e: TransformEntry, u: float) -> float:
    if e.kind == TransformKind.IDENTITY:
        return 1.0
    if e.kind == TransformKind.LOG:
        return math.exp(u)
    s = float(expit(u))
    if e.kind == TransformKind.SIGMOID:
        return (e.hi - e.lo) * s * (1.0 - s)
    log_lo, log_hi = math.log(e.lo), math.log(e.hi)
    return _forward_one(e, u) * (log_hi - log_lo) * s * (1.0 - s)


def transform_forward(table: TransformTable, values) -> np.ndarray:
    """Unconstrained values of the trainable entries to constrained values."""
    return np.array([_forward_one(e, float(u)) for e, u in zip(table.trainable, values)])


def transform_inverse(table: TransformTable, values) -> np.ndarray:
    """Constrained values of the trainable entries to unconstrained values."""
    return np.array([_inverse_one(e, float(c)) for e, c in zip(table.trainable, values)])


def transform_derivative(table: TransformTable, values) -> np.ndarray:
    """d constrained / d unconstrained for the trainable entries."""
    return np.array([_derivative_one(e, float(u)) for e, u in zip(table.trainable, values)])


# --------------------------
# L-BFGS
# --------------------------

@dataclass(frozen=True)
class LbfgsOptions:
    memory: int = DEFAULT_MEMORY
    max_iter: int = DEFAULT_MAX_ITER
    grad_tol: float = DEFAULT_GRAD_TOL
    f_tol: float = DEFAULT_F_TOL
    max_line_search: int = 40
    restarts: int = 0
    restart_scale: float = 0.5


@dataclass
class TrainResult:
    x: np.ndarray
    nlml: float
    iterations: int
    evaluations: int
    grad_norm: float
    termination: str
    params: Dict[str, float] = field(default_factory=dict)
    jitter_max: float = 0.0
    jitter_count: int = 0
    failed_evaluations: int = 0
    seed: Optional[int] = None
    config_digest: str = ""
    trace: List[dict] = field(default_factory=list)


Objective = Callable[[np.ndarray], float]
Gradient = Callable[[np.ndarray], np.ndarray]


def _two_loop(g: np.ndarray, pairs: Deque[Tuple[np.ndarray, np.ndarray, float]]) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * s.dot(q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return q


class _LineFunction:
    """phi(a) = f(x + a d) with evaluation counting and a gradient check."""

    def __init__(self, objective, gradient, x, d):
        self.objective, self.gradient, self.x, self.d = objective, gradient, x, d
        self.evaluations = 0

    def __call__(self, a: float):
        point = self.x + a * self.d
        self.evaluations += 1
        f = float(self.objective(point))
        if not math.isfinite(f):
            return f, None, None
        g = np.asarray(self.gradient(point), dtype=float)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"Non-finite gradient at finite objective; parameters {point.tolist()}.")
        return f, g, float(g.dot(self.d))


def _strong_wolfe(phi: _LineFunction, f0: float, dphi0: float, a1: float, c1: float, c2: float,
                  max_evals: int):
    """Bracketing then zoom; infinite objective values halve the trial step."""
    a_prev, f_prev, g_prev, dphi_prev = 0.0, f0, None, dphi0
    a = a1
    best = None
    lo = hi = None
    while phi.evaluations < max_evals:
        f_a, g_a, dphi_a = phi(a)
        if g_a is None:
            logger.debug("Objective not finite at step %.3g; halving", a)
            a = a_prev + 0.5 * (a - a_prev)
            continue
        if f_a <= f0 + c1 * a * dphi0 and (best is None or f_a < best[1]):
            best = (a, f_a, g_a)
        if f_a > f0 + c1 * a * dphi0 or (a_prev > 0.0 and f_a >= f_prev):
            lo, hi = (a_prev, f_prev, g_prev, dphi_prev), (a, f_a, g_a, dphi_a)
            break
        if abs(dphi_a) <= -c2 * dphi0:
            return a, f_a, g_a
        if dphi_a >= 0.0:
            lo, hi = (a, f_a, g_a, dphi_a), (a_prev, f_prev, g_prev, dphi_prev)
            break
        a_prev, f_prev, g_prev, dphi_prev = a, f_a, g_a, dphi_a
        a = 2.0 * a
    else:
        return best

    if lo is None:
        return best
    while phi.evaluations < max_evals:
        a_lo, f_lo, g_lo, dphi_lo = lo
        a_hi = hi[0]
        a = 0.5 * (a_lo + a_hi)
        if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
            break
        f_a, g_a, dphi_a = phi(a)
        if g_a is None or f_a > f0 + c1 * a * dphi0 or f_a >= f_lo:
            hi = (a, f_a, g_a, dphi_a)
            continue
        if best is None or f_a < best[1]:
            best = (a, f_a, g_a)
        if abs(dphi_a) <= -c2 * dphi0:
            return a, f_a, g_a
        if dphi_a * (a_hi - a_lo) >= 0.0:
            hi = lo
        lo = (a, f_a, g_a, dphi_a)
    return best


def lbfgs_minimize(objective: Objective, gradient: Gradient, x0, options: LbfgsOptions = LbfgsOptions(),
                   callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """
    Minimize objective with the two-loop L-BFGS recursion and a strong-Wolfe line search.
    Terminates on gradient norm, relative decrease, iteration count or a failed line search.
    """
    x = np.asarray(x0, dtype=float).copy()
    f = float(objective(x))
    if not math.isfinite(f):
        raise OptimizerError(f"Objective is not finite at the starting point {x.tolist()}.")
    g = np.asarray(gradient(x), dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"Non-finite gradient at the starting point {x.tolist()}.")
    evaluations = 1
    pairs: Deque[Tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=options.memory)
    trace = [{"iter": 0, "nlml": f, "grad_norm": float(np.max(np.abs(g), initial=0.0)), "x": x.tolist()}]
    termination = "max_iter"
    iteration = 0

    for iteration in range(1, options.max_iter + 1):
        if np.max(np.abs(g), initial=0.0) <= options.grad_tol:
            termination = "gradient"
            iteration -= 1
            break
        d = -_two_loop(g, pairs)
        dphi0 = float(g.dot(d))
        if not dphi0 < 0.0:
            pairs.clear()
            d = -g
            dphi0 = float(g.dot(d))
        a1 = 1.0 if pairs else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        phi = _LineFunction(objective, gradient, x, d)
        found = _strong_wolfe(phi, f, dphi0, a1, WOLFE_C1, WOLFE_C2, options.max_line_search)
        evaluations += phi.evaluations
        if found is None and pairs:
            # stale curvature pairs; retry once along steepest descent
            logger.info("Line search failed at iteration %d, dropping %d curvature pairs", iteration, len(pairs))
            pairs.clear()
            d = -g
            dphi0 = float(g.dot(d))
            phi = _LineFunction(objective, gradient, x, d)
            a1 = min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
            found = _strong_wolfe(phi, f, dphi0, a1, WOLFE_C1, WOLFE_C2, options.max_line_search)
            evaluations += phi.evaluations
        if found is None:
            termination = "line_search"
            logger.info("Line search made no progress at iteration %d", iteration)
            iteration -= 1
            break
        a, f_new, g_new = found
        s = a * d
        y = g_new - g
        sy = float(s.dot(y))
        if sy > CURVATURE_TOL * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        decrease = (f - f_new) / max(abs(f), abs(f_new), 1.0)
        x, f, g = x + s, f_new, g_new
        entry = {"iter": iteration, "nlml": f, "grad_norm": float(np.max(np.abs(g))), "x": x.tolist()}
        trace.append(entry)
        if callback is not None:
            callback(entry)
        logger.debug("iter %d nlml %.10g |g| %.3g step %.3g", iteration, f, entry["grad_norm"], a)
        if decrease <= options.f_tol:
            termination = "f_tol"
            break

    grad_norm = float(np.max(np.abs(g), initial=0.0))
    if termination == "max_iter" and grad_norm <= options.grad_tol:
        termination = "gradient"
    logger.info("L-BFGS finished: %s after %d iterations, f=%.10g, |g|=%.3g",
                termination, iteration, f, grad_norm)
    return TrainResult(x=x, nlml=f, iterations=iteration, evaluations=evaluations,
                       grad_norm=grad_norm, termination=termination, trace=trace)


def lbfgs_multistart(objective: Objective, gradient: Gradient, x0, options: LbfgsOptions = LbfgsOptions(),
                     seed: Optional[int] = None) -> TrainResult:
    """Best of one run from x0 and options.restarts runs from Gaussian-jittered starts."""
    x0 = np.asarray(x0, dtype=float)
    best = lbfgs_minimize(objective, gradient, x0, options)
    rng = np.random.default_rng(seed)
    for restart in range(options.restarts):
        start = x0 + rng.normal(0.0, options.restart_scale, size=x0.shape)
        try:
            result = lbfgs_minimize(objective, gradient, start, options)
        except OptimizerError as exc:
            logger.warning("Restart %d skipped: %s", restart + 1, exc)
            continue
        logger.info("Restart %d reached f=%.10g", restart + 1, result.nlml)
        if result.nlml < best.nlml:
            best = result
    return best
