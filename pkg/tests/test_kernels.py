import numpy as np
import pytest

from services.errors import ConfigurationError, UnsupportedConfigurationError
from services.kernels import (
    KernelBlockKind,
    RuleSet,
    assemble_covariance,
    block_pieces,
    cross_covariance,
    kernel_block_1d,
    kernel_block_2d,
    kernel_block_grad,
)
from services.likelihood import Framework, GpProblem
from services.operators import Evolution, MultiplierTerm, OperatorSpec, TermKind
from services.optimize import TransformTable
from services.quadrature import angular_grid, gauss_laguerre_rule
from services.spectral import KernelFamily, SpectralDensity, kernel_real_space, matern_closed_form

LAGS = np.linspace(-1.0, 1.0, 101)


def matern(sigma=1.0, theta=1.0, nu=2.5):
    return SpectralDensity(KernelFamily.MATERN, sigma, (theta,), (nu,))


def single(kind, alpha, coeff=1.0, **kwargs):
    return OperatorSpec(terms=(MultiplierTerm(kind, alpha, coeff),), **kwargs)


PLAIN = single(TermKind.FRACTIONAL_LAPLACIAN, 1.0)

# ---------- kernel_block_1d ----------

def test_uu_block_matches_closed_form():
    values = kernel_block_1d(KernelBlockKind.UU, LAGS, PLAIN, matern(), gauss_laguerre_rule(64, 0.0))
    assert np.max(np.abs(values - matern_closed_form(2.5, 1.0, 1.0, LAGS))) < 1e-5

def test_fu_block_converges_to_reference():
    op = single(TermKind.RIEMANN_LIOUVILLE_RIGHT, 0.5)
    coarse = kernel_block_1d(KernelBlockKind.FU, LAGS, op, matern(), gauss_laguerre_rule(64, 0.5))
    reference = kernel_block_1d(KernelBlockKind.FU, LAGS, op, matern(), RuleSet(512))
    assert np.max(np.abs(coarse - reference)) < 1e-5

def test_uf_is_transpose_of_fu():
    op = OperatorSpec(terms=(MultiplierTerm(TermKind.RIEMANN_LIOUVILLE_LEFT, 0.7, 1.3),
                             MultiplierTerm(TermKind.RIEMANN_LIOUVILLE_RIGHT, 1.4, 0.4)))
    uf = kernel_block_1d(KernelBlockKind.UF, LAGS, op, matern(), RuleSet(64))
    fu = kernel_block_1d(KernelBlockKind.FU, -LAGS, op, matern(), RuleSet(64))
    assert uf == pytest.approx(fu, rel=1e-12, abs=1e-14)

def test_ff_block_is_symmetric_in_lag():
    op = single(TermKind.RIEMANN_LIOUVILLE_LEFT, 0.6, 1.1)
    ff = kernel_block_1d(KernelBlockKind.FF, LAGS, op, matern(), RuleSet(64))
    assert ff == pytest.approx(ff[::-1], rel=1e-12, abs=1e-14)
    assert ff[50] > 0

def test_ff_block_at_order_two_is_fourth_derivative_of_se():
    sd = SpectralDensity(KernelFamily.SQUARED_EXPONENTIAL, 1.0, (1.0,))
    ff = kernel_block_1d(KernelBlockKind.FF, LAGS, single(TermKind.FRACTIONAL_LAPLACIAN, 2.0), sd, RuleSet(128))
    expected = (LAGS ** 4 - 6.0 * LAGS ** 2 + 3.0) * np.exp(-0.5 * LAGS ** 2)
    assert np.max(np.abs(ff - expected)) < 1e-6

@pytest.mark.parametrize("kind,evolution", [
    (KernelBlockKind.FF, None),
    (KernelBlockKind.NM1_NM1, Evolution(0.05)),
    (KernelBlockKind.NM1_NM1, Evolution(0.05, generator=True)),
])
def test_pair_block_integrand_is_real(kind, evolution):
    op = OperatorSpec(terms=(MultiplierTerm(TermKind.RIEMANN_LIOUVILLE_LEFT, 0.73, 1.4),
                             MultiplierTerm(TermKind.RIEMANN_LIOUVILLE_RIGHT, 1.6, -0.3)), evolution=evolution)
    xi = np.geomspace(1e-3, 50.0, 40)
    profile = sum(piece.coeff * xi ** piece.exponent * np.log(xi) ** piece.log_power
                  for piece in block_pieces(kind, op))
    assert np.max(np.abs(profile.imag) / np.maximum(np.abs(profile), 1.0)) <= 1e-12

def test_explicit_rule_must_match_fractional_part():
    op = single(TermKind.RIEMANN_LIOUVILLE_LEFT, 0.5)
    with pytest.raises(ConfigurationError):
        kernel_block_1d(KernelBlockKind.FU, LAGS, op, matern(), gauss_laguerre_rule(32, 0.0))

def test_explicit_rule_accepts_integer_shift():
    op = single(TermKind.RIEMANN_LIOUVILLE_LEFT, 1.5)
    shifted = kernel_block_1d(KernelBlockKind.FU, LAGS, op, matern(), gauss_laguerre_rule(64, 0.5))
    assert np.all(np.isfinite(shifted))

def test_evolution_kind_needs_evolution_operator():
    with pytest.raises(ConfigurationError):
        kernel_block_1d(KernelBlockKind.NN, LAGS, PLAIN, matern(), RuleSet(16))
    with pytest.raises(ConfigurationError):
        kernel_block_1d(KernelBlockKind.UU, LAGS, single(TermKind.FRACTIONAL_LAPLACIAN, 1.0, evolution=Evolution(0.1)),
                        matern(), RuleSet(16))

def test_two_dimensional_density_rejected_in_1d():
    sd = SpectralDensity(KernelFamily.MATERN, 1.0, (1.0, 1.0), (2.5, 2.5), dim=2)
    with pytest.raises(ConfigurationError):
        kernel_block_1d(KernelBlockKind.UU, LAGS, PLAIN, sd, RuleSet(16))

# ---------- evolution blocks ----------

def test_nn_block_is_plain_kernel():
    evo = single(TermKind.RIEMANN_LIOUVILLE_LEFT, 0.5, 1.25, evolution=Evolution(0.1))
    nn = kernel_block_1d(KernelBlockKind.NN, LAGS, evo, matern(), RuleSet(64))
    uu = kernel_block_1d(KernelBlockKind.UU, LAGS, PLAIN, matern(), RuleSet(64))
    assert nn == pytest.approx(uu, rel=1e-14)

def test_mixed_evolution_block_is_identity_plus_step():
    plain = single(TermKind.RIEMANN_LIOUVILLE_LEFT, 0.5, 1.25)
    evo = single(TermKind.RIEMANN_LIOUVILLE_LEFT, 0.5, 1.25, evolution=Evolution(0.1))
    uu = kernel_block_1d(KernelBlockKind.UU, LAGS, plain, matern(), RuleSet(64))
    uf = kernel_block_1d(KernelBlockKind.UF, LAGS, plain, matern(), RuleSet(64))
    mixed = kernel_block_1d(KernelBlockKind.N_NM1, LAGS, evo, matern(), RuleSet(64))
    assert mixed == pytest.approx(uu + 0.1 * uf, rel=1e-10, abs=1e-13)

def test_zero_step_evolution_reduces_to_plain_kernel():
    evo = single(TermKind.RIEMANN_LIOUVILLE_LEFT, 0.5, 1.25, evolution=Evolution(0.0))
    block = kernel_block_1d(KernelBlockKind.NM1_NM1, LAGS, evo, matern(), RuleSet(64))
    uu = kernel_block_1d(KernelBlockKind.UU, LAGS, PLAIN, matern(), RuleSet(64))
    assert block == pytest.approx(uu, rel=1e-12, abs=1e-14)

# ---------- kernel_block_2d ----------

def product_density(sigma=1.0):
    return SpectralDensity(KernelFamily.MATERN, sigma, (1.0, 1.0), (2.5, 3.5), dim=2)


LAG_PAIRS = np.array([[0.0, 0.0], [0.5, -0.3], [1.0, 1.0], [-0.8, 0.2]])

def test_uu_block_2d_matches_product_kernel():
    op = single(TermKind.FRACTIONAL_LAPLACIAN, 0.5, dim=2)
    sd = product_density()
    values = kernel_block_2d(KernelBlockKind.UU, LAG_PAIRS, op, sd, RuleSet(64), angular_grid(64))
    assert np.max(np.abs(values - kernel_real_space(sd, LAG_PAIRS))) < 1e-4

def test_ff_block_2d_positive_at_zero_lag():
    op = single(TermKind.FRACTIONAL_LAPLACIAN, 0.5, dim=2)
    value = kernel_block_2d(KernelBlockKind.FF, np.zeros((1, 2)), op, product_density(), RuleSet(32), angular_grid(32))
    assert value[0] > 0

def test_uf_is_transpose_of_fu_in_2d():
    op = single(TermKind.FRACTIONAL_LAPLACIAN, 1.2, 0.8, dim=2)
    uf = kernel_block_2d(KernelBlockKind.UF, LAG_PAIRS, op, product_density(), RuleSet(32), angular_grid(32))
    fu = kernel_block_2d(KernelBlockKind.FU, -LAG_PAIRS, op, product_density(), RuleSet(32), angular_grid(32))
    assert uf == pytest.approx(fu, rel=1e-10, abs=1e-13)

def test_one_dimensional_density_rejected_in_2d():
    op = single(TermKind.FRACTIONAL_LAPLACIAN, 0.5, dim=2)
    with pytest.raises(ConfigurationError):
        kernel_block_2d(KernelBlockKind.UU, LAG_PAIRS, op, matern(), RuleSet(16), angular_grid(16))

def test_one_dimensional_operator_rejected_in_2d():
    with pytest.raises(UnsupportedConfigurationError):
        kernel_block_2d(KernelBlockKind.UU, LAG_PAIRS, PLAIN, product_density(), RuleSet(16), angular_grid(16))

# ---------- kernel_block_grad ----------

def test_sigma_gradient_is_twice_block_over_sigma():
    sd = matern(sigma=1.7)
    value = kernel_block_1d(KernelBlockKind.UU, LAGS, PLAIN, sd, RuleSet(64))
    grad = kernel_block_grad(KernelBlockKind.UU, LAGS, PLAIN, sd, RuleSet(64), "sigma")
    assert grad == pytest.approx(2.0 * value / 1.7, rel=1e-12, abs=1e-15)

def test_coefficient_gradient_of_ff_block():
    op = single(TermKind.FRACTIONAL_LAPLACIAN, 0.75, 1.3)
    value = kernel_block_1d(KernelBlockKind.FF, LAGS, op, matern(), RuleSet(64))
    grad = kernel_block_grad(KernelBlockKind.FF, LAGS, op, matern(), RuleSet(64), "C_1")
    assert grad == pytest.approx(2.0 * value / 1.3, rel=1e-10, abs=1e-13)

def test_theta_gradient_matches_finite_difference():
    lags = np.linspace(-1.0, 1.0, 7)
    h = 1e-6
    up = kernel_block_1d(KernelBlockKind.UU, lags, PLAIN, matern(theta=1.2 + h), RuleSet(64))
    down = kernel_block_1d(KernelBlockKind.UU, lags, PLAIN, matern(theta=1.2 - h), RuleSet(64))
    grad = kernel_block_grad(KernelBlockKind.UU, lags, PLAIN, matern(theta=1.2), RuleSet(64), "theta_1")
    assert grad == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)

def test_order_gradient_matches_finite_difference():
    lags = np.linspace(-1.0, 1.0, 5)
    h = 1e-5
    def block(alpha):
        op = single(TermKind.RIEMANN_LIOUVILLE_LEFT, alpha, 1.0)
        return kernel_block_1d(KernelBlockKind.FU, lags, op, matern(), RuleSet(128))
    op = single(TermKind.RIEMANN_LIOUVILLE_LEFT, 0.8, 1.0)
    grad = kernel_block_grad(KernelBlockKind.FU, lags, op, matern(), RuleSet(128), "alpha_1")
    assert grad == pytest.approx((block(0.8 + h) - block(0.8 - h)) / (2 * h), rel=1e-4, abs=1e-6)

def test_unknown_gradient_parameter():
    with pytest.raises(ConfigurationError):
        kernel_block_grad(KernelBlockKind.UU, LAGS, PLAIN, matern(), RuleSet(16), "lengthscale")

# ---------- assemble_covariance ----------

XA = np.array([-1.0, 0.1, 0.9])
XB = np.array([-0.4, 0.6])
PARAMS = {"sigma": 1.0, "theta_1": 1.0, "nu_1": 2.5, "C_1": 1.0, "alpha_1": 1.5, "noise_a": 0.1, "noise_b": 0.2}


def joint_problem():
    return GpProblem(
        framework=Framework.TIME_INDEPENDENT,
        sites_a=XA, values_a=np.zeros(3),
        sites_b=XB, values_b=np.zeros(2),
        sd=matern(), op=single(TermKind.FRACTIONAL_LAPLACIAN, 1.5),
        transforms=TransformTable(()),
    )

def test_covariance_is_exactly_symmetric():
    matrix = assemble_covariance(joint_problem(), PARAMS).matrix
    assert matrix.shape == (5, 5)
    assert np.array_equal(matrix, matrix.T)

def test_covariance_depends_only_on_lags():
    def problem_at(shift):
        return GpProblem(
            framework=Framework.TIME_INDEPENDENT,
            sites_a=np.array([-1.0, 0.125, 0.875]) + shift, values_a=np.zeros(3),
            sites_b=np.array([-0.375, 0.625]) + shift, values_b=np.zeros(2),
            sd=matern(), op=single(TermKind.RIEMANN_LIOUVILLE_LEFT, 1.5),
            transforms=TransformTable(()),
        )
    base = assemble_covariance(problem_at(0.0), PARAMS).matrix
    assert np.array_equal(assemble_covariance(problem_at(2.0), PARAMS).matrix, base)
    assert np.array_equal(assemble_covariance(problem_at(-4.0), PARAMS).matrix, base)

def test_covariance_blocks_and_noise():
    assembly = assemble_covariance(joint_problem(), PARAMS)
    op = single(TermKind.FRACTIONAL_LAPLACIAN, 1.5)
    uu0 = kernel_block_1d(KernelBlockKind.UU, [0.0], op, matern(), RuleSet(64))[0]
    ff0 = kernel_block_1d(KernelBlockKind.FF, [0.0], op, matern(), RuleSet(64))[0]
    uf = kernel_block_1d(KernelBlockKind.UF, (XA[:, None] - XB[None, :]).ravel(), op, matern(), RuleSet(64))
    assert np.diag(assembly.matrix)[:3] == pytest.approx(np.full(3, uu0 + 0.01))
    assert np.diag(assembly.matrix)[3:] == pytest.approx(np.full(2, ff0 + 0.04))
    assert assembly.matrix[:3, 3:] == pytest.approx(uf.reshape(3, 2))
    assert assembly.block_layout == (slice(0, 3), slice(3, 5))

def test_covariance_gradients():
    assembly = assemble_covariance(joint_problem(), PARAMS, targets=["sigma", "noise_a", "noise_b"])
    noiseless = assembly.matrix - np.diag([0.01] * 3 + [0.04] * 2)
    assert assembly.gradients["sigma"] == pytest.approx(2.0 * noiseless, abs=1e-14)
    assert np.diag(assembly.gradients["noise_a"]) == pytest.approx([0.2, 0.2, 0.2, 0.0, 0.0])
    assert np.diag(assembly.gradients["noise_b"]) == pytest.approx([0.0, 0.0, 0.0, 0.4, 0.4])

def test_evolution_covariance_uses_single_noise():
    evo = single(TermKind.RIEMANN_LIOUVILLE_LEFT, 1.0, 1.0, evolution=Evolution(0.1))
    problem = GpProblem(
        framework=Framework.EVOLUTION,
        sites_a=XA, values_a=np.zeros(3), sites_b=XB, values_b=np.zeros(2),
        sd=matern(), op=evo, transforms=TransformTable(()), dt=0.1,
    )
    params = {"sigma": 1.0, "theta_1": 1.0, "nu_1": 2.5, "C_1": 1.0, "alpha_1": 1.0, "noise": 0.3}
    with_noise = assemble_covariance(problem, params, targets=["noise"])
    without = assemble_covariance(problem, {**params, "noise": 0.0})
    assert np.diag(with_noise.matrix - without.matrix) == pytest.approx(np.full(5, 0.09))
    assert np.diag(with_noise.gradients["noise"]) == pytest.approx(np.full(5, 0.6))

def test_cross_covariance_matches_training_rows():
    problem = joint_problem()
    k_star, prior = cross_covariance(problem, PARAMS, XA, "a")
    noiseless = assemble_covariance(problem, {**PARAMS, "noise_a": 0.0, "noise_b": 0.0}).matrix
    assert k_star == pytest.approx(noiseless[:3], rel=1e-12, abs=1e-14)
    assert prior == pytest.approx(np.diag(noiseless)[:3], rel=1e-12)

def test_cross_covariance_rejects_unknown_target():
    with pytest.raises(ConfigurationError):
        cross_covariance(joint_problem(), PARAMS, XA, "c")
