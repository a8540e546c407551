"""
Operators Module - Linear space-fractional operators as Fourier multipliers
Fractional Laplacian and left/right Riemann-Liouville terms, the backward-Euler
wrapper, and the alpha-stable diffusion generator.

Convention: an operator acts on e^{i x xi} as multiplication by m(xi), so the
left Riemann-Liouville symbol is (-i xi)^alpha = |xi|^alpha e^{-i alpha pi/2 sgn(xi)}.
With alpha = 1 it is the multiplier of -d/dx, with alpha = 2 that of d^2/dx^2.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from services.errors import ParameterError, UnsupportedConfigurationError

logger = logging.getLogger(__name__)

# Half-width of the excluded band around alpha = 1 for the stable generator
STABLE_GUARD_BAND = 1e-3
ORDER_MAX = 2.0


class TermKind(str, Enum):
    FRACTIONAL_LAPLACIAN = "fractional_laplacian"
    RIEMANN_LIOUVILLE_LEFT = "riemann_liouville_left"
    RIEMANN_LIOUVILLE_RIGHT = "riemann_liouville_right"


# Phase direction k in |xi|^alpha e^{i k alpha pi/2 sgn(xi)}
_PHASE_DIRECTION = {
    TermKind.FRACTIONAL_LAPLACIAN: 0,
    TermKind.RIEMANN_LIOUVILLE_LEFT: -1,
    TermKind.RIEMANN_LIOUVILLE_RIGHT: 1,
}


@dataclass(frozen=True)
class MultiplierTerm:
    """C times the symbol of one fractional derivative of order alpha."""
    kind: TermKind
    order_alpha: float
    coeff: float

    def __post_init__(self):
        if not (0.0 < self.order_alpha <= ORDER_MAX) or not math.isfinite(self.order_alpha):
            raise ParameterError(f"Operator order must lie in (0, 2], got {self.order_alpha}.")
        if not math.isfinite(self.coeff):
            raise ParameterError(f"Operator coefficient must be finite, got {self.coeff}.")


@dataclass(frozen=True)
class Evolution:
    """
    Backward-Euler wrapper. With generator=False the terms give L in u_t + L u = 0
    and the symbol is 1 + dt m; with generator=True they give A in u_t = A u and
    the symbol is 1 - dt m.
    """
    dt: float
    generator: bool = False

    def __post_init__(self):
        if not (self.dt >= 0.0) or not math.isfinite(self.dt):
            raise ParameterError(f"Time step must be a finite non-negative real, got {self.dt}.")

    @property
    def scale(self) -> float:
        return -self.dt if self.generator else self.dt


@dataclass(frozen=True)
class StableDiffusionSpec:
    """Generator gamma^alpha/|cos(pi alpha/2)| [p D_left^alpha + (1-p) D_right^alpha]."""
    alpha: float
    p: float
    gamma: float


@dataclass(frozen=True)
class OperatorSpec:
    terms: Tuple[MultiplierTerm, ...]
    evolution: Optional[Evolution] = None
    stable: Optional[StableDiffusionSpec] = None
    dim: int = 1

    def __post_init__(self):
        if not self.terms:
            raise ParameterError("An operator needs at least one term.")
        if self.dim not in (1, 2):
            raise ParameterError(f"Operator dimension must be 1 or 2, got {self.dim}.")
        if self.dim == 2 and any(t.kind != TermKind.FRACTIONAL_LAPLACIAN for t in self.terms):
            raise UnsupportedConfigurationError(
                "Only fractional Laplacian terms are supported in two dimensions.")


@dataclass(frozen=True)
class MonomialPiece:
    """coeff * xi^exponent * (log xi)^log_power on xi > 0."""
    exponent: float
    coeff: complex
    log_power: int = 0


# --------------------------
# Parameters
# --------------------------

def parameter_names(spec: OperatorSpec) -> List[str]:
    """Trainable operator parameters in report order."""
    if spec.stable is not None:
        return ["alpha", "p", "gamma"]
    names = []
    for j in range(len(spec.terms)):
        names += [f"C_{j + 1}", f"alpha_{j + 1}"]
    return names


def parameter_values(spec: OperatorSpec) -> Dict[str, float]:
    if spec.stable is not None:
        return {"alpha": spec.stable.alpha, "p": spec.stable.p, "gamma": spec.stable.gamma}
    values = {}
    for j, term in enumerate(spec.terms):
        values[f"C_{j + 1}"] = term.coeff
        values[f"alpha_{j + 1}"] = term.order_alpha
    return values


def with_parameters(spec: OperatorSpec, values: Dict[str, float]) -> OperatorSpec:
    """Copy of spec with the named parameters replaced."""
    if spec.stable is not None:
        stable = StableDiffusionSpec(
            alpha=float(values.get("alpha", spec.stable.alpha)),
            p=float(values.get("p", spec.stable.p)),
            gamma=float(values.get("gamma", spec.stable.gamma)),
        )
        return replace(stable_multiplier(stable), evolution=spec.evolution)
    terms = tuple(
        MultiplierTerm(
            kind=term.kind,
            order_alpha=float(values.get(f"alpha_{j + 1}", term.order_alpha)),
            coeff=float(values.get(f"C_{j + 1}", term.coeff)),
        )
        for j, term in enumerate(spec.terms)
    )
    return replace(spec, terms=terms)


def _stable_prefactor(stable: StableDiffusionSpec) -> float:
    return stable.gamma ** stable.alpha / abs(math.cos(math.pi * stable.alpha / 2.0))


def _term_partials(spec: OperatorSpec, param: str) -> List[Tuple[float, float]]:
    """(d coeff_j, d alpha_j) of every term with respect to one parameter."""
    if spec.stable is not None:
        s = spec.stable
        prefactor = _stable_prefactor(s)
        if param == "alpha":
            log_rate = math.log(s.gamma) + 0.5 * math.pi * math.tan(0.5 * math.pi * s.alpha)
            return [(term.coeff * log_rate, 1.0) for term in spec.terms]
        if param == "p":
            return [(prefactor, 0.0), (-prefactor, 0.0)]
        if param == "gamma":
            return [(term.coeff * s.alpha / s.gamma, 0.0) for term in spec.terms]
        raise ParameterError(f"Unknown stable parameter {param!r}.")
    partials = [(0.0, 0.0)] * len(spec.terms)
    try:
        kind, index = param.split("_")
        j = int(index) - 1
    except ValueError:
        raise ParameterError(f"Unknown operator parameter {param!r}.") from None
    if not 0 <= j < len(spec.terms) or kind not in ("C", "alpha"):
        raise ParameterError(f"Unknown operator parameter {param!r}.")
    partials[j] = (1.0, 0.0) if kind == "C" else (0.0, 1.0)
    return partials


# --------------------------
# Pointwise evaluation
# --------------------------

def _frequency_magnitude(spec: OperatorSpec, xi) -> Tuple[np.ndarray, np.ndarray]:
    xi = np.asarray(xi, dtype=float)
    if spec.dim == 2:
        return np.hypot(xi[..., 0], xi[..., 1]), np.ones(xi.shape[:-1])
    return np.abs(xi), np.sign(xi)


def _term_symbols(spec: OperatorSpec, xi) -> Tuple[List[np.ndarray], np.ndarray, np.ndarray]:
    """Unit-coefficient symbols |xi|^alpha e^{i k alpha pi/2 sgn xi} per term."""
    magnitude, sign = _frequency_magnitude(spec, xi)
    symbols = []
    for term in spec.terms:
        k = _PHASE_DIRECTION[term.kind]
        power = magnitude ** term.order_alpha
        phase = np.exp(1j * k * term.order_alpha * 0.5 * np.pi * sign)
        symbols.append(power * phase)
    return symbols, magnitude, sign


def _evolution_scale(spec: OperatorSpec) -> float:
    """dt factor of the backward-Euler symbol."""
    scale = spec.evolution.scale
    if spec.stable is not None and spec.evolution.generator and spec.stable.alpha < 1.0:
        # the stable generator changes sign below alpha = 1
        scale = -scale
    return scale


def _wrap(spec: OperatorSpec, value):
    if spec.evolution is None:
        return value
    return 1.0 + _evolution_scale(spec) * value


def multiplier_eval(spec: OperatorSpec, xi) -> np.ndarray:
    """Symbol of the operator at xi; 1 +/- dt m in evolution mode."""
    symbols, _, _ = _term_symbols(spec, xi)
    total = sum(term.coeff * symbol for term, symbol in zip(spec.terms, symbols))
    return _wrap(spec, total)


def multiplier_pair_eval(spec: OperatorSpec, xi) -> np.ndarray:
    """m(xi) m(-xi)."""
    xi = np.asarray(xi, dtype=float)
    return multiplier_eval(spec, xi) * multiplier_eval(spec, -xi)


def multiplier_grad(spec: OperatorSpec, xi, param: str) -> np.ndarray:
    """
    Exact derivative of multiplier_eval with respect to a named parameter.
    The alpha derivative of (-/+ i xi)^alpha multiplies it by log|xi| -/+ i pi/2 sgn(xi);
    every derivative is 0 at xi = 0.
    """
    symbols, magnitude, sign = _term_symbols(spec, xi)
    log_magnitude = np.log(np.where(magnitude > 0.0, magnitude, 1.0))
    total = 0.0
    for term, symbol, (dcoeff, dalpha) in zip(spec.terms, symbols, _term_partials(spec, param)):
        k = _PHASE_DIRECTION[term.kind]
        rate = log_magnitude + 1j * k * 0.5 * np.pi * sign
        total = total + dcoeff * symbol + term.coeff * dalpha * symbol * rate
    if spec.evolution is not None:
        total = _evolution_scale(spec) * total
    return total


def stable_multiplier(spec: StableDiffusionSpec) -> OperatorSpec:
    """Two-term left/right Riemann-Liouville operator generating the alpha-stable diffusion."""
    alpha, p, gamma = spec.alpha, spec.p, spec.gamma
    if not math.isfinite(alpha) or not (0.0 < alpha <= ORDER_MAX):
        raise ParameterError(f"Stable alpha must lie in (0, 2], got {alpha}.")
    if abs(alpha - 1.0) <= STABLE_GUARD_BAND:
        raise ParameterError(
            f"Stable alpha={alpha} is inside the guard band around 1 where |cos(pi alpha/2)| vanishes.")
    if not math.isfinite(p) or not (0.0 <= p <= 1.0):
        raise ParameterError(f"Stable p must lie in the closed interval [0, 1], got {p}.")
    if not math.isfinite(gamma) or gamma <= 0.0:
        raise ParameterError(f"Stable gamma must be positive, got {gamma}.")
    prefactor = _stable_prefactor(spec)
    terms = (
        MultiplierTerm(TermKind.RIEMANN_LIOUVILLE_LEFT, alpha, prefactor * p),
        MultiplierTerm(TermKind.RIEMANN_LIOUVILLE_RIGHT, alpha, prefactor * (1.0 - p)),
    )
    return OperatorSpec(terms=terms, stable=spec)


# --------------------------
# Monomial pieces on xi > 0
# --------------------------

def _term_phase(term: MultiplierTerm, reflected: bool) -> Tuple[complex, int]:
    k = _PHASE_DIRECTION[term.kind] * (-1 if reflected else 1)
    return complex(np.exp(1j * k * term.order_alpha * 0.5 * np.pi)), k


def merge_pieces(pieces: List[MonomialPiece]) -> List[MonomialPiece]:
    """Sum pieces with equal exponent (within 1e-12) and log power; drop zeros."""
    merged: List[MonomialPiece] = []
    for piece in sorted(pieces, key=lambda q: (q.log_power, q.exponent)):
        if merged and merged[-1].log_power == piece.log_power and abs(merged[-1].exponent - piece.exponent) <= 1e-12:
            last = merged[-1]
            merged[-1] = MonomialPiece(last.exponent, last.coeff + piece.coeff, last.log_power)
        else:
            merged.append(piece)
    return [piece for piece in merged if piece.coeff != 0]


def multiply_pieces(left: List[MonomialPiece], right: List[MonomialPiece]) -> List[MonomialPiece]:
    return merge_pieces([
        MonomialPiece(a.exponent + b.exponent, a.coeff * b.coeff, a.log_power + b.log_power)
        for a in left for b in right
    ])


def symbol_pieces(spec: OperatorSpec, reflected: bool = False) -> List[MonomialPiece]:
    """The symbol at xi (or -xi when reflected) for xi > 0, wrapper included."""
    pieces = []
    for term in spec.terms:
        phase, _ = _term_phase(term, reflected)
        pieces.append(MonomialPiece(term.order_alpha, term.coeff * phase))
    if spec.evolution is None:
        return merge_pieces(pieces)
    scale = _evolution_scale(spec)
    return merge_pieces([MonomialPiece(0.0, 1.0 + 0j)] + [
        MonomialPiece(q.exponent, scale * q.coeff) for q in pieces
    ])


def symbol_grad_pieces(spec: OperatorSpec, param: str, reflected: bool = False) -> List[MonomialPiece]:
    """Pieces of the parameter derivative of symbol_pieces."""
    pieces = []
    for term, (dcoeff, dalpha) in zip(spec.terms, _term_partials(spec, param)):
        phase, k = _term_phase(term, reflected)
        rate = dcoeff + term.coeff * dalpha * 1j * k * 0.5 * np.pi
        pieces.append(MonomialPiece(term.order_alpha, rate * phase))
        if dalpha != 0.0:
            pieces.append(MonomialPiece(term.order_alpha, term.coeff * dalpha * phase, 1))
    if spec.evolution is not None:
        pieces = [MonomialPiece(q.exponent, _evolution_scale(spec) * q.coeff, q.log_power) for q in pieces]
    return merge_pieces(pieces)
