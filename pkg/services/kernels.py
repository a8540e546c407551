"""
Kernels Module - Physics-informed covariance blocks by Fourier quadrature
Every block is (2 pi)^{-d/2} times the integral of e^{i<x-y, xi>} Phi(xi) K_hat(xi),
with Phi built from the operator symbol, evaluated with generalized
Gauss-Laguerre rules matched to the monomial exponents of Phi.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.errors import ConfigurationError, NumericError, UnsupportedConfigurationError
from services.operators import (
    MonomialPiece,
    OperatorSpec,
    merge_pieces,
    multiply_pieces,
    parameter_names,
    symbol_grad_pieces,
    symbol_pieces,
    with_parameters,
)
from services.quadrature import (
    DEFAULT_ANGULAR_NODES,
    DEFAULT_NODES_1D,
    DEFAULT_RADIAL_NODES,
    AngularGrid,
    GaussLaguerreRule,
    angular_grid,
    cached_rule,
)
from services.spectral import (
    HyperParamTag,
    SpectralDensity,
    hyperparameter_tags,
    spectral_log_eval,
    spectral_log_grad,
)

if TYPE_CHECKING:
    from services.likelihood import GpProblem

logger = logging.getLogger(__name__)

LAG_DECIMALS = 14
LAG_CHUNK = 256
FRACTION_TOL = 1e-12


class KernelBlockKind(str, Enum):
    UU = "uu"
    UF = "uf"
    FU = "fu"
    FF = "ff"
    NN = "nn"
    N_NM1 = "n_nm1"
    NM1_N = "nm1_n"
    NM1_NM1 = "nm1_nm1"


EVOLUTION_KINDS = {KernelBlockKind.NN, KernelBlockKind.N_NM1, KernelBlockKind.NM1_N, KernelBlockKind.NM1_NM1}

# Which symbol the block integrand carries
_PATTERN = {
    KernelBlockKind.UU: "plain",
    KernelBlockKind.NN: "plain",
    KernelBlockKind.UF: "reflected",
    KernelBlockKind.N_NM1: "reflected",
    KernelBlockKind.FU: "direct",
    KernelBlockKind.NM1_N: "direct",
    KernelBlockKind.FF: "pair",
    KernelBlockKind.NM1_NM1: "pair",
}


@dataclass(frozen=True)
class RuleSet:
    """Builds (and caches) the rule each exponent group needs."""
    order_n: int = DEFAULT_NODES_1D

    def rule_for(self, alpha_ggl: float) -> GaussLaguerreRule:
        return cached_rule(self.order_n, alpha_ggl)


RuleSource = Union[GaussLaguerreRule, RuleSet]


@dataclass(frozen=True)
class QuadratureSettings:
    nodes_1d: int = DEFAULT_NODES_1D
    radial: int = DEFAULT_RADIAL_NODES
    angular: int = DEFAULT_ANGULAR_NODES


@dataclass
class CovarianceAssembly:
    matrix: np.ndarray
    block_layout: Tuple[slice, slice]
    jitter_used: float = 0.0
    gradients: Dict[str, np.ndarray] = field(default_factory=dict)


# --------------------------
# Integrand pieces per block
# --------------------------

def block_pieces(kind: KernelBlockKind, op: OperatorSpec) -> List[MonomialPiece]:
    """Phi on xi > 0 as monomial pieces: 1, m(-xi), m(xi) or m(xi) m(-xi)."""
    _check_kind(kind, op)
    pattern = _PATTERN[kind]
    if pattern == "plain":
        return [MonomialPiece(0.0, 1.0 + 0j)]
    if pattern == "reflected":
        return symbol_pieces(op, reflected=True)
    if pattern == "direct":
        return symbol_pieces(op, reflected=False)
    return multiply_pieces(symbol_pieces(op, False), symbol_pieces(op, True))


def block_grad_pieces(kind: KernelBlockKind, op: OperatorSpec, param: str) -> List[MonomialPiece]:
    """Pieces of the derivative of Phi with respect to an operator parameter."""
    _check_kind(kind, op)
    pattern = _PATTERN[kind]
    if pattern == "plain":
        return []
    if pattern == "reflected":
        return symbol_grad_pieces(op, param, reflected=True)
    if pattern == "direct":
        return symbol_grad_pieces(op, param, reflected=False)
    return merge_pieces(
        multiply_pieces(symbol_grad_pieces(op, param, False), symbol_pieces(op, True))
        + multiply_pieces(symbol_pieces(op, False), symbol_grad_pieces(op, param, True))
    )


def _check_kind(kind: KernelBlockKind, op: OperatorSpec):
    if (kind in EVOLUTION_KINDS) != (op.evolution is not None):
        raise ConfigurationError(
            f"Block {kind.value} does not match the operator's framework "
            f"({'evolution' if op.evolution is not None else 'time-independent'}).")


def _fractional_part(value: float) -> float:
    frac = value - math.floor(value)
    if frac > 1.0 - FRACTION_TOL:
        frac = 0.0
    return round(frac, 12)


def _required_alpha(exponent: float, dim: int) -> float:
    """Rule exponent for a piece: frac(e) in 1D, e + 1 (radial Jacobian) in 2D."""
    if dim == 1:
        return _fractional_part(exponent)
    return round(exponent + 1.0, 12)


def _resolve_rule(rules: RuleSource, required: float) -> GaussLaguerreRule:
    if isinstance(rules, GaussLaguerreRule):
        if abs(_fractional_part(rules.alpha_ggl) - _fractional_part(required)) > FRACTION_TOL:
            raise ConfigurationError(
                f"Rule alpha_ggl={rules.alpha_ggl} does not match the integrand exponent "
                f"{required} (fractional parts differ).")
        return rules
    return rules.rule_for(required)


def _group_pieces(pieces: Sequence[MonomialPiece], dim: int) -> Dict[float, List[MonomialPiece]]:
    groups: Dict[float, List[MonomialPiece]] = {}
    for piece in pieces:
        groups.setdefault(_required_alpha(piece.exponent, dim), []).append(piece)
    return groups


def _piece_profile(pieces: Sequence[MonomialPiece], nodes: np.ndarray, rule_alpha: float, dim: int) -> np.ndarray:
    """Sum of coeff * xi^(e + dim - 1 - rule_alpha) * (log xi)^k at the nodes."""
    log_nodes = np.log(nodes)
    profile = np.zeros(nodes.shape, dtype=complex)
    for piece in pieces:
        power = np.exp((piece.exponent + dim - 1 - rule_alpha) * log_nodes)
        profile += piece.coeff * power * log_nodes ** piece.log_power
    return profile


# --------------------------
# Quadrature evaluation
# --------------------------

@dataclass(frozen=True)
class _Target:
    """One quantity to integrate: value or a derivative."""
    name: str
    pieces: Tuple[MonomialPiece, ...]
    tag: Optional[HyperParamTag] = None


def _targets_for(kind: KernelBlockKind, op: OperatorSpec, sd: SpectralDensity,
                 names: Sequence[Optional[str]]) -> List[_Target]:
    value_pieces = tuple(block_pieces(kind, op))
    spectral_tags = dict(hyperparameter_tags(sd))
    operator_names = set(parameter_names(op))
    targets = []
    for name in names:
        if name is None:
            targets.append(_Target("value", value_pieces))
        elif name in spectral_tags:
            targets.append(_Target(name, value_pieces, spectral_tags[name]))
        elif name in operator_names:
            targets.append(_Target(name, tuple(block_grad_pieces(kind, op, name))))
        else:
            raise ConfigurationError(f"Unknown kernel-block parameter {name!r}.")
    return targets


def _evaluate_1d_chunk(lags: np.ndarray, targets: List[_Target], sd: SpectralDensity,
                       rules: RuleSource) -> np.ndarray:
    out = np.zeros((len(targets), lags.size))
    alphas = sorted({a for t in targets for a in _group_pieces(t.pieces, 1)})
    for rule_alpha in alphas:
        rule = _resolve_rule(rules, rule_alpha)
        nodes = rule.nodes
        base = np.exp(rule.log_weights + nodes + spectral_log_eval(sd, nodes))
        phase = np.outer(lags, nodes)
        cos_m, sin_m = np.cos(phase), np.sin(phase)
        for index, target in enumerate(targets):
            group = _group_pieces(target.pieces, 1).get(rule_alpha)
            if not group:
                continue
            amplitude = base * _piece_profile(group, nodes, rule.alpha_ggl, 1)
            if target.tag is not None:
                amplitude = amplitude * spectral_log_grad(sd, nodes, target.tag)
            out[index] += cos_m @ amplitude.real - sin_m @ amplitude.imag
    return out * (2.0 / math.sqrt(2.0 * math.pi))


def _evaluate_2d_chunk(lags: np.ndarray, targets: List[_Target], sd: SpectralDensity,
                       rules: RuleSource, angular: AngularGrid) -> np.ndarray:
    out = np.zeros((len(targets), lags.shape[0]))
    alphas = sorted({a for t in targets for a in _group_pieces(t.pieces, 2)})
    cos_t, sin_t = np.cos(angular.nodes), np.sin(angular.nodes)
    # projection of each lag on each direction: (L, M)
    projection = np.outer(lags[:, 0], cos_t) + np.outer(lags[:, 1], sin_t)
    for rule_alpha in alphas:
        rule = _resolve_rule(rules, rule_alpha)
        r = rule.nodes
        xi = np.stack([np.outer(r, cos_t), np.outer(r, sin_t)], axis=-1)  # (n, M, 2)
        base = np.exp(rule.log_weights[:, None] + r[:, None] + spectral_log_eval(sd, xi))
        phase = projection[:, None, :] * r[None, :, None]  # (L, n, M)
        cos_m, sin_m = np.cos(phase), np.sin(phase)
        for index, target in enumerate(targets):
            group = _group_pieces(target.pieces, 2).get(rule_alpha)
            if not group:
                continue
            amplitude = base * _piece_profile(group, r, rule.alpha_ggl, 2)[:, None]
            if target.tag is not None:
                amplitude = amplitude * spectral_log_grad(sd, xi, target.tag)
            out[index] += np.einsum("lnm,nm->l", cos_m, amplitude.real) - np.einsum("lnm,nm->l", sin_m, amplitude.imag)
    return out * angular.weight / (2.0 * math.pi)


def _evaluate(kind, lags, op, sd, rules, names, angular=None, threads: int = 1) -> np.ndarray:
    """Rows of block values for each requested target at each (deduplicated) lag."""
    dim = sd.dim
    lags = np.asarray(lags, dtype=float)
    if dim == 2:
        if op.dim != 2:
            raise UnsupportedConfigurationError("Two-dimensional blocks need a two-dimensional operator.")
        lags = lags.reshape(-1, 2)
        if angular is None:
            angular = angular_grid(DEFAULT_ANGULAR_NODES)
        unique, inverse = np.unique(np.round(lags, LAG_DECIMALS), axis=0, return_inverse=True)
    else:
        lags = lags.reshape(-1)
        unique, inverse = np.unique(np.round(lags, LAG_DECIMALS), return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    targets = _targets_for(kind, op, sd, names)

    chunks = [unique[start:start + LAG_CHUNK] for start in range(0, len(unique), LAG_CHUNK)]
    if dim == 1:
        work = lambda chunk: _evaluate_1d_chunk(chunk, targets, sd, rules)
    else:
        work = lambda chunk: _evaluate_2d_chunk(chunk, targets, sd, rules, angular)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(chunk) for chunk in chunks]
    values = np.concatenate(parts, axis=1) if parts else np.zeros((len(targets), 0))

    bad = ~np.isfinite(values)
    if np.any(bad):
        row, col = np.argwhere(bad)[0]
        raise NumericError(f"Non-finite {kind.value} block value ({targets[row].name}) at lag {unique[col]}.")
    return values[:, inverse]


def kernel_block_1d(kind: KernelBlockKind, lags, op: OperatorSpec, sd: SpectralDensity,
                    rule: RuleSource, threads: int = 1) -> np.ndarray:
    """
    (2/sqrt(2 pi)) int_0^inf Re[e^{i r xi} Phi(xi) K_hat(xi)] d xi at every lag r.
    A single explicit rule must match the fractional part of every exponent in Phi.
    """
    if sd.dim != 1:
        raise ConfigurationError("kernel_block_1d needs a one-dimensional spectral density.")
    return _evaluate(kind, lags, op, sd, rule, [None], threads=threads)[0]


def kernel_block_2d(kind: KernelBlockKind, lag_pairs, op: OperatorSpec, sd: SpectralDensity,
                    radial: RuleSource, angular: AngularGrid, threads: int = 1) -> np.ndarray:
    """Polar-coordinate block: (1/2 pi) sum over angles and radii, radial Jacobian in the rule."""
    if sd.dim != 2:
        raise ConfigurationError("kernel_block_2d needs a two-dimensional spectral density.")
    return _evaluate(kind, lag_pairs, op, sd, radial, [None], angular=angular, threads=threads)[0]


def kernel_block_grad(kind: KernelBlockKind, lags, op: OperatorSpec, sd: SpectralDensity,
                      rules: RuleSource, param: str, angular: Optional[AngularGrid] = None,
                      threads: int = 1) -> np.ndarray:
    """Derivative of a block with respect to a kernel or operator parameter."""
    return _evaluate(kind, lags, op, sd, rules, [param], angular=angular, threads=threads)[0]


# --------------------------
# Assembly
# --------------------------

def problem_components(problem: "GpProblem", params: Dict[str, float]):
    """SpectralDensity, OperatorSpec and noise standard deviations for a parameter map."""
    sd = problem.sd
    sd = sd.with_values(
        sigma=params.get("sigma", sd.sigma),
        theta=[params.get(f"theta_{i + 1}", sd.theta[i]) for i in range(sd.dim)],
        nu=[params.get(f"nu_{i + 1}", v) for i, v in enumerate(sd.nu)] if sd.nu else None,
    )
    op = with_parameters(problem.op, params)
    if problem.is_evolution:
        noise = params.get("noise", 0.0)
        return sd, op, noise, noise
    return sd, op, params.get("noise_a", 0.0), params.get("noise_b", 0.0)


def _rules_for(problem: "GpProblem") -> Tuple[RuleSource, Optional[AngularGrid]]:
    settings = problem.quadrature
    if problem.sd.dim == 1:
        return RuleSet(settings.nodes_1d), None
    return RuleSet(settings.radial), angular_grid(settings.angular)


def _kinds(problem: "GpProblem"):
    if problem.is_evolution:
        return KernelBlockKind.NN, KernelBlockKind.N_NM1, KernelBlockKind.NM1_N, KernelBlockKind.NM1_NM1
    return KernelBlockKind.UU, KernelBlockKind.UF, KernelBlockKind.FU, KernelBlockKind.FF


def _pair_lags(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """All differences x_i - y_j, shape (len(x), len(y)[, d])."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        return x[:, None] - y[None, :]
    return x[:, None, :] - y[None, :, :]


def _block_matrices(kind, x, y, op, sd, rules, angular, names, threads) -> np.ndarray:
    lags = _pair_lags(x, y)
    shape = (len(x), len(y))
    if len(x) == 0 or len(y) == 0:
        return np.zeros((len(names),) + shape)
    values = _evaluate(kind, lags, op, sd, rules, names, angular=angular, threads=threads)
    return values.reshape((len(names),) + shape)


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return np.triu(matrix) + np.triu(matrix, 1).T


def assemble_covariance(problem: "GpProblem", params: Dict[str, float],
                        targets: Sequence[str] = ()) -> CovarianceAssembly:
    """
    Joint covariance of the two data groups with noise on the diagonal, plus
    dK/d(param) for every name in targets (kernel, operator or noise parameters).
    """
    sd, op, noise_a, noise_b = problem_components(problem, params)
    rules, angular = _rules_for(problem)
    kind_aa, kind_ab, _, kind_bb = _kinds(problem)
    xa, xb = problem.sites_a, problem.sites_b
    na, nb = len(xa), len(xb)
    noise_names = ("noise",) if problem.is_evolution else ("noise_a", "noise_b")
    block_targets = [name for name in targets if name not in noise_names]
    names = [None] + block_targets
    threads = problem.threads

    aa = _block_matrices(kind_aa, xa, xa, op, sd, rules, angular, names, threads)
    ab = _block_matrices(kind_ab, xa, xb, op, sd, rules, angular, names, threads)
    bb = _block_matrices(kind_bb, xb, xb, op, sd, rules, angular, names, threads)

    def full(index: int) -> np.ndarray:
        matrix = np.zeros((na + nb, na + nb))
        matrix[:na, :na] = aa[index]
        matrix[:na, na:] = ab[index]
        matrix[na:, na:] = bb[index]
        matrix = _symmetrize(matrix)
        return matrix

    matrix = full(0)
    diagonal = np.concatenate([np.full(na, noise_a ** 2), np.full(nb, noise_b ** 2)])
    matrix[np.diag_indices_from(matrix)] += diagonal

    gradients = {}
    for position, name in enumerate(block_targets, start=1):
        gradients[name] = full(position)
    for name in targets:
        if name == "noise":
            gradients[name] = np.diag(np.full(na + nb, 2.0 * noise_a))
        elif name == "noise_a":
            gradients[name] = np.diag(np.concatenate([np.full(na, 2.0 * noise_a), np.zeros(nb)]))
        elif name == "noise_b":
            gradients[name] = np.diag(np.concatenate([np.zeros(na), np.full(nb, 2.0 * noise_b)]))

    logger.debug("Assembled %dx%d covariance (%d gradient targets)", na + nb, na + nb, len(gradients))
    return CovarianceAssembly(matrix=matrix, block_layout=(slice(0, na), slice(na, na + nb)),
                              gradients=gradients)


def cross_covariance(problem: "GpProblem", params: Dict[str, float], query_sites,
                     which: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Covariance between the a- or b-function at query sites and all training data,
    and the prior variance of that function at the query sites.
    """
    sd, op, _, _ = problem_components(problem, params)
    rules, angular = _rules_for(problem)
    kind_aa, kind_ab, kind_ba, kind_bb = _kinds(problem)
    query = np.asarray(query_sites, dtype=float)
    if which == "a":
        left, right, self_kind = kind_aa, kind_ab, kind_aa
    elif which == "b":
        left, right, self_kind = kind_ba, kind_bb, kind_bb
    else:
        raise ConfigurationError(f"Prediction target must be 'a' or 'b', got {which!r}.")
    threads = problem.threads
    with_a = _block_matrices(left, query, problem.sites_a, op, sd, rules, angular, [None], threads)[0]
    with_b = _block_matrices(right, query, problem.sites_b, op, sd, rules, angular, [None], threads)[0]
    zero = np.zeros((1, 2)) if sd.dim == 2 else np.zeros(1)
    prior = _evaluate(self_kind, zero, op, sd, rules, [None], angular=angular, threads=1)[0, 0]
    return np.hstack([with_a, with_b]), np.full(len(query), prior)
