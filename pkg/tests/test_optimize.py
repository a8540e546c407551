import math

import numpy as np
import pytest

from services.errors import NumericError, OptimizerError, ParameterError
from services.optimize import (
    LbfgsOptions,
    TransformEntry,
    TransformKind,
    TransformTable,
    lbfgs_minimize,
    lbfgs_multistart,
    transform_derivative,
    transform_forward,
    transform_inverse,
)

TABLE = TransformTable((
    TransformEntry("C_1", TransformKind.IDENTITY, -0.7),
    TransformEntry("sigma", TransformKind.LOG, 2.0),
    TransformEntry("alpha_1", TransformKind.SIGMOID, 1.4, lo=0.0, hi=2.0),
    TransformEntry("nu_1", TransformKind.LOG_SIGMOID, 4.5, lo=0.26, hi=30.0),
    TransformEntry("noise_a", TransformKind.LOG, 0.01, floor=1e-8),
    TransformEntry("theta_1", TransformKind.LOG, 0.5, trainable=False),
))


def rosenbrock(x):
    return (1.0 - x[0]) ** 2 + 100.0 * (x[1] - x[0] ** 2) ** 2


def rosenbrock_grad(x):
    return np.array([-2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] ** 2), 200.0 * (x[1] - x[0] ** 2)])

# ---------- transforms ----------

def test_inverse_then_forward_recovers_initial_values():
    initial = [e.initial for e in TABLE.trainable]
    assert transform_forward(TABLE, TABLE.initial_unconstrained()) == pytest.approx(initial, rel=1e-12)

def test_sigmoid_stays_inside_range():
    values = transform_forward(TABLE, [0.0, 0.0, 40.0, -40.0, 0.0])
    assert 0.0 < values[2] <= 2.0
    assert values[3] == pytest.approx(0.26)

def test_log_transform_respects_floor():
    assert transform_forward(TABLE, [0.0, 0.0, 0.0, 0.0, -50.0])[4] > 1e-8

def test_transform_derivative_matches_finite_difference():
    u = np.array([0.3, -0.4, 0.8, -1.1, 0.2])
    h = 1e-6
    numeric = [(transform_forward(TABLE, u + h * e) - transform_forward(TABLE, u - h * e))[i] / (2 * h)
               for i, e in enumerate(np.eye(len(u)))]
    assert transform_derivative(TABLE, u) == pytest.approx(numeric, rel=1e-7)

@pytest.mark.parametrize("entry,value", [
    (TransformEntry("alpha_1", TransformKind.SIGMOID, 1.0, lo=0.0, hi=2.0), 2.0),
    (TransformEntry("sigma", TransformKind.LOG, 1.0), -1.0),
    (TransformEntry("noise_a", TransformKind.LOG, 1.0, floor=1e-8), 1e-8),
    (TransformEntry("C_1", TransformKind.IDENTITY, 1.0), math.inf),
])
def test_inverse_rejects_values_outside_range(entry, value):
    with pytest.raises(ParameterError):
        transform_inverse(TransformTable((entry,)), [value])

def test_constrained_map_keeps_fixed_entries():
    values = TABLE.constrained_map(TABLE.initial_unconstrained())
    assert values["theta_1"] == 0.5
    assert values["sigma"] == pytest.approx(2.0)
    assert list(values) == TABLE.names

def test_table_lookup_and_initial_update():
    assert TABLE.entry("nu_1").hi == 30.0
    with pytest.raises(ParameterError):
        TABLE.entry("gamma")
    updated = TABLE.with_initial({"sigma": 3.0})
    assert updated.entry("sigma").initial == 3.0
    assert updated.entry("C_1").initial == -0.7
    assert TABLE.trainable_names == ["C_1", "sigma", "alpha_1", "nu_1", "noise_a"]

# ---------- lbfgs_minimize ----------

def test_lbfgs_solves_rosenbrock():
    result = lbfgs_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0], LbfgsOptions(grad_tol=1e-8, f_tol=0.0))
    assert result.x == pytest.approx([1.0, 1.0], abs=1e-5)
    assert result.termination in ("gradient", "line_search")
    assert result.nlml < 1e-9

def test_lbfgs_minimizes_quadratic_quickly():
    rng = np.random.default_rng(3)
    basis = rng.normal(size=(5, 5))
    A = basis @ basis.T + 5.0 * np.eye(5)
    b = rng.normal(size=5)
    result = lbfgs_minimize(lambda x: 0.5 * x @ A @ x - b @ x, lambda x: A @ x - b, np.zeros(5),
                            LbfgsOptions(grad_tol=1e-6, f_tol=0.0))
    assert result.x == pytest.approx(np.linalg.solve(A, b), abs=1e-6)
    assert result.iterations <= 50
    assert result.termination == "gradient"

def test_lbfgs_stops_immediately_at_stationary_point():
    result = lbfgs_minimize(lambda x: float(x @ x), lambda x: 2.0 * x, np.zeros(3))
    assert result.iterations == 0
    assert result.termination == "gradient"
    assert len(result.trace) == 1

def test_lbfgs_respects_iteration_cap():
    result = lbfgs_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0], LbfgsOptions(max_iter=3, f_tol=0.0))
    assert result.iterations == 3
    assert result.termination == "max_iter"

def test_lbfgs_trace_and_callback():
    seen = []
    result = lbfgs_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0], LbfgsOptions(max_iter=5, f_tol=0.0),
                            callback=seen.append)
    assert [entry["iter"] for entry in result.trace] == list(range(len(result.trace)))
    assert seen == result.trace[1:]
    assert all(b["nlml"] <= a["nlml"] for a, b in zip(result.trace, result.trace[1:]))

def test_lbfgs_drops_memory_after_failed_line_search(mocker):
    import services.optimize as optimize
    real_search = optimize._strong_wolfe
    calls = []

    def flaky_search(*args):
        calls.append(args)
        return None if len(calls) == 3 else real_search(*args)

    mocker.patch("services.optimize._strong_wolfe", side_effect=flaky_search)
    A = np.diag([1.0, 10.0, 100.0])
    b = np.array([1.0, -2.0, 3.0])
    result = lbfgs_minimize(lambda x: 0.5 * x @ A @ x - b @ x, lambda x: A @ x - b, np.zeros(3),
                            LbfgsOptions(grad_tol=1e-8, f_tol=0.0))
    assert len(calls) > 4
    # the retry starts from the same point along the steepest-descent direction
    assert np.array_equal(calls[3][0].x, calls[2][0].x)
    assert calls[3][0].d == pytest.approx(-calls[3][0].gradient(calls[3][0].x))
    assert result.termination == "gradient"
    assert result.x == pytest.approx(np.linalg.solve(A, b), abs=1e-7)

def test_lbfgs_stops_when_steepest_descent_search_fails(mocker):
    mocker.patch("services.optimize._strong_wolfe", return_value=None)
    result = lbfgs_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0])
    assert result.termination == "line_search"
    assert result.iterations == 0

def test_lbfgs_rejects_infinite_start():
    with pytest.raises(OptimizerError):
        lbfgs_minimize(lambda x: math.inf, lambda x: np.zeros_like(x), np.ones(2))

def test_lbfgs_rejects_non_finite_gradient_at_start():
    with pytest.raises(NumericError):
        lbfgs_minimize(lambda x: 1.0, lambda x: np.full_like(x, np.nan), np.ones(2))

def test_lbfgs_backs_off_from_infinite_region():
    # unconstrained minimum at 0.4 lies in the infinite region x < 0.5
    f = lambda x: (x[0] - 0.4) ** 2 if x[0] >= 0.5 else math.inf
    g = lambda x: np.array([2.0 * (x[0] - 0.4)])
    result = lbfgs_minimize(f, g, [4.0], LbfgsOptions(max_iter=50))
    assert math.isfinite(result.nlml)
    assert 0.5 <= result.x[0] < 0.51

# ---------- lbfgs_multistart ----------

def double_well(x):
    return (x[0] ** 2 - 1.0) ** 2 + 0.3 * x[0]


def double_well_grad(x):
    return np.array([4.0 * x[0] * (x[0] ** 2 - 1.0) + 0.3])

def test_multistart_escapes_local_minimum():
    single = lbfgs_minimize(double_well, double_well_grad, [1.0])
    best = lbfgs_multistart(double_well, double_well_grad, [1.0],
                            LbfgsOptions(restarts=30, restart_scale=2.0), seed=0)
    assert single.x[0] > 0
    assert best.x[0] < 0
    assert best.nlml < single.nlml

def test_multistart_without_restarts_is_single_run():
    single = lbfgs_minimize(rosenbrock, rosenbrock_grad, [-1.2, 1.0])
    multi = lbfgs_multistart(rosenbrock, rosenbrock_grad, [-1.2, 1.0], seed=11)
    assert multi.x == pytest.approx(single.x)
    assert multi.nlml == single.nlml
