import numpy as np
import pytest

from singdc import gradcheck as G


@pytest.mark.parametrize("name", sorted(G.CASES))
@pytest.mark.parametrize("bits", [32, 64])
def test_op_passes(name, bits):
    for seed in range(5):
        r = G.check_case(name, seed, bits)
        assert r.passed, (r.op, r.seed, r.per_input)


def test_corrupted_backward_is_caught():
    r = G.check_case("conv2d", 0, 64, case=lambda rng, dt: G.case_conv2d(rng, dt, corrupt=True))
    assert not r.passed
    assert r.max_rel_error > 1.0


def test_numerical_gradient_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = G.numerical_gradient(lambda: float((x ** 2).sum()), x, 1e-5)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)
    np.testing.assert_array_equal(x, [1.0, -2.0, 3.0])  # restored after probing


def test_relative_error_floor():
    assert G.relative_error([1.0, 0.0], [1.0, 1e-9]) < 1e-5
    assert G.relative_error([1.0], [2.0]) == pytest.approx(0.5)
    assert G.relative_error([], []) == 0.0


def test_summarize():
    reports = G.run_suite(64, seeds=range(2), ops=["linear", "relu"])
    table = G.summarize(reports)
    assert set(table) == {"linear", "relu"}
    assert table["linear"]["seeds"] == 2
    assert all(row["passed"] for row in table.values())
