"""
Spectral Module - Stationary prior kernels given by their Fourier transforms
Squared-exponential and Matern families, hyperparameter derivatives, and
closed-form real-space kernels used as oracles.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np
from scipy.special import digamma, gammaln

from services.errors import ParameterError, UnsupportedConfigurationError

logger = logging.getLogger(__name__)

# Training box for the Matern smoothness
NU_MIN = 0.26
NU_MAX = 30.0


class KernelFamily(str, Enum):
    SQUARED_EXPONENTIAL = "squared_exponential"
    MATERN = "matern"


class Combine(str, Enum):
    PRODUCT = "product"
    SUM = "sum"


@dataclass(frozen=True)
class SpectralDensity:
    """A stationary kernel represented by its spectral density."""
    family: KernelFamily
    sigma: float
    theta: Tuple[float, ...]
    nu: Tuple[float, ...] = ()
    combine: Combine = Combine.PRODUCT
    dim: int = 1

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ParameterError(f"Spatial dimension must be 1 or 2, got {self.dim}.")
        if not self.sigma > 0 or not math.isfinite(self.sigma):
            raise ParameterError(f"sigma must be positive, got {self.sigma}.")
        if len(self.theta) != self.dim or not all(t > 0 and math.isfinite(t) for t in self.theta):
            raise ParameterError(f"theta needs {self.dim} positive length scales, got {self.theta}.")
        if self.family == KernelFamily.MATERN:
            if len(self.nu) != self.dim or not all(v > 0 and math.isfinite(v) for v in self.nu):
                raise ParameterError(f"nu needs {self.dim} positive smoothness values, got {self.nu}.")

    def with_values(self, sigma=None, theta=None, nu=None) -> "SpectralDensity":
        """Copy with some hyperparameters replaced."""
        return SpectralDensity(
            family=self.family,
            sigma=self.sigma if sigma is None else float(sigma),
            theta=self.theta if theta is None else tuple(float(t) for t in theta),
            nu=self.nu if nu is None else tuple(float(v) for v in nu),
            combine=self.combine,
            dim=self.dim,
        )


@dataclass(frozen=True)
class HyperParamTag:
    """Selects sigma, theta_i or nu_i (0-based index) for a derivative."""
    which: str
    index: int = 0


def hyperparameter_tags(sd: SpectralDensity) -> List[Tuple[str, HyperParamTag]]:
    """Names and tags of every kernel hyperparameter, in report order."""
    tags = [("sigma", HyperParamTag("sigma"))]
    tags += [(f"theta_{i + 1}", HyperParamTag("theta", i)) for i in range(sd.dim)]
    if sd.family == KernelFamily.MATERN:
        tags += [(f"nu_{i + 1}", HyperParamTag("nu", i)) for i in range(sd.dim)]
    return tags


def _matern_log_constant(nu: float) -> float:
    return gammaln(nu + 0.5) - 0.5 * math.log(nu) - gammaln(nu)


def _log_factor(sd: SpectralDensity, i: int, xi: np.ndarray) -> np.ndarray:
    """log of the unit-variance 1D density of coordinate i."""
    theta = sd.theta[i]
    if sd.family == KernelFamily.SQUARED_EXPONENTIAL:
        return math.log(theta) - 0.5 * (theta * xi) ** 2
    nu = sd.nu[i]
    return (math.log(theta) + _matern_log_constant(nu)
            - (nu + 0.5) * np.log1p((theta * xi) ** 2 / (2.0 * nu)))


def _dlog_factor_dtheta(sd: SpectralDensity, i: int, xi: np.ndarray) -> np.ndarray:
    theta = sd.theta[i]
    if sd.family == KernelFamily.SQUARED_EXPONENTIAL:
        return 1.0 / theta - theta * xi ** 2
    nu = sd.nu[i]
    return 1.0 / theta - (nu + 0.5) * (theta * xi ** 2 / nu) / (1.0 + (theta * xi) ** 2 / (2.0 * nu))


def _dlog_factor_dnu(sd: SpectralDensity, i: int, xi: np.ndarray) -> np.ndarray:
    nu = sd.nu[i]
    q = 0.5 * (sd.theta[i] * xi) ** 2
    return (digamma(nu + 0.5) - digamma(nu) - 0.5 / nu
            - np.log1p(q / nu) + (nu + 0.5) * (q / nu ** 2) / (1.0 + q / nu))


def _coordinates(sd: SpectralDensity, xi) -> List[np.ndarray]:
    xi = np.asarray(xi, dtype=float)
    if sd.dim == 1:
        return [xi]
    if xi.shape[-1] != 2:
        raise ParameterError(f"Expected frequency vectors of length 2, got shape {xi.shape}.")
    return [xi[..., 0], xi[..., 1]]


def spectral_log_eval(sd: SpectralDensity, xi) -> np.ndarray:
    """log of spectral_eval for Product combine."""
    if sd.combine != Combine.PRODUCT and sd.dim > 1:
        raise UnsupportedConfigurationError(
            "Sum-combine kernels have distributional transforms; use them in real space only.")
    coords = _coordinates(sd, xi)
    total = 2.0 * math.log(sd.sigma)
    for i, x in enumerate(coords):
        total = total + _log_factor(sd, i, x)
    return total


def spectral_eval(sd: SpectralDensity, xi) -> np.ndarray:
    """
    Spectral density at xi.
    1D Matern: theta sigma^2 Gamma(nu+1/2)/(sqrt(nu) Gamma(nu)) (1+theta^2 xi^2/(2nu))^-(nu+1/2);
    1D squared-exponential: theta sigma^2 exp(-theta^2 xi^2/2).
    """
    if sd.combine == Combine.SUM and sd.dim > 1:
        coords = _coordinates(sd, xi)
        return sum(sd.sigma ** 2 * np.exp(_log_factor(sd, i, x)) for i, x in enumerate(coords))
    return np.exp(spectral_log_eval(sd, xi))


def spectral_log_grad(sd: SpectralDensity, xi, tag: HyperParamTag) -> np.ndarray:
    """Derivative of log spectral_eval with respect to the tagged hyperparameter."""
    coords = _coordinates(sd, xi)
    if tag.which == "sigma":
        return np.full(np.shape(coords[0]), 2.0 / sd.sigma)
    if not 0 <= tag.index < sd.dim:
        raise ParameterError(f"Hyperparameter index {tag.index} out of range for dim {sd.dim}.")
    if tag.which == "theta":
        return _dlog_factor_dtheta(sd, tag.index, coords[tag.index])
    if tag.which == "nu":
        if sd.family != KernelFamily.MATERN:
            raise ParameterError("nu derivative requested for a squared-exponential kernel.")
        return _dlog_factor_dnu(sd, tag.index, coords[tag.index])
    raise ParameterError(f"Unknown hyperparameter tag {tag.which!r}.")


def spectral_grad(sd: SpectralDensity, xi, tag: HyperParamTag) -> np.ndarray:
    """Exact partial derivative of spectral_eval (Product combine)."""
    return spectral_eval(sd, xi) * spectral_log_grad(sd, xi, tag)


def _half_integer_order(nu: float) -> int:
    p = nu - 0.5
    if p < 0 or abs(p - round(p)) > 1e-12:
        raise ParameterError(f"Closed-form Matern needs a half-integer nu, got {nu}.")
    return int(round(p))


def matern_closed_form(nu_half_int: float, sigma: float, theta: float, r) -> np.ndarray:
    """Matern kernel for nu = p + 1/2 as exponential times a degree-p polynomial."""
    p = _half_integer_order(nu_half_int)
    z = math.sqrt(2.0 * nu_half_int) * np.abs(np.asarray(r, dtype=float)) / theta
    poly = np.zeros_like(z)
    for i in range(p + 1):
        coeff = math.factorial(p + i) / (math.factorial(i) * math.factorial(p - i))
        poly = poly + coeff * (2.0 * z) ** (p - i)
    return sigma ** 2 * np.exp(-z) * poly * math.factorial(p) / math.factorial(2 * p)


def kernel_real_space(sd: SpectralDensity, lag) -> np.ndarray:
    """Real-space kernel value at lag (diagnostics and oracles)."""
    lag = np.asarray(lag, dtype=float)
    coords = [lag] if sd.dim == 1 else [lag[..., 0], lag[..., 1]]
    factors = []
    for i, r in enumerate(coords):
        if sd.family == KernelFamily.SQUARED_EXPONENTIAL:
            factors.append(np.exp(-0.5 * (r / sd.theta[i]) ** 2))
        else:
            factors.append(matern_closed_form(sd.nu[i], 1.0, sd.theta[i], r))
    if sd.combine == Combine.SUM:
        return sd.sigma ** 2 * sum(factors)
    return sd.sigma ** 2 * np.prod(factors, axis=0)
