import numpy as np
import pytest
from numpy.testing import assert_allclose

from steinflow.config import KernelFamily
from steinflow.errors import ConfigurationError, ContractViolation, DegenerateEnsembleError
from steinflow.kernels import (KernelSpec, grad_x_matrix, grad_xy_matrix, grad_y_matrix, kernel_eval,
                               kernel_grad_x, kernel_grad_y, kernel_matrix, kernel_parts, kernel_trace_grad_xx,
                               median_bandwidth, resolve_bandwidth, trace_grad_xy_diagonal,
                               trace_grad_xy_matrix)

FAMILIES = [
    KernelSpec(KernelFamily.RBF, 1.0),
    KernelSpec(KernelFamily.RBF, 0.7),
    KernelSpec(KernelFamily.IMQ, 1.0),
    KernelSpec(KernelFamily.IMQ, 1.5, imq_exponent=-0.3, imq_offset=2.0),
    KernelSpec(KernelFamily.LINEAR),
]


def test_rbf_values(rbf):
    assert kernel_eval(rbf, [0.0, 0.0], [0.0, 0.0]) == 1.0
    assert_allclose(kernel_eval(rbf, [1.0, 0.0], [0.0, 0.0]), np.exp(-0.5), rtol=1e-15)
    assert_allclose(kernel_eval(rbf, [1.0, 0.0], [0.0, 0.0]), 0.60653, atol=1e-5)


def test_imq_at_coincidence():
    spec = KernelSpec(KernelFamily.IMQ, 1.0, imq_exponent=-0.5, imq_offset=1.0)
    assert kernel_eval(spec, [0.3, -1.2], [0.3, -1.2]) == 1.0


def test_rbf_gradient(rbf):
    assert np.array_equal(kernel_grad_x(rbf, [0.5, 0.5], [0.5, 0.5]), np.zeros(2))
    assert_allclose(kernel_grad_x(rbf, [1.0], [0.0]), [-np.exp(-0.5)], rtol=1e-15)


@pytest.mark.parametrize("spec", FAMILIES[:4])
def test_gradients_antisymmetric_for_radial_kernels(spec, rng):
    x, y = rng.standard_normal(3), rng.standard_normal(3)
    assert_allclose(kernel_grad_x(spec, x, y), -kernel_grad_y(spec, x, y), rtol=1e-14)
    assert_allclose(kernel_grad_x(spec, x, y), kernel_grad_y(spec, y, x), rtol=1e-14)


def test_trace_examples():
    assert kernel_trace_grad_xx(KernelSpec(KernelFamily.RBF, 1.0), [0.0, 0.0], [0.0, 0.0]) == 2.0
    assert kernel_trace_grad_xx(KernelSpec(KernelFamily.RBF, 2.0), [1.0], [1.0]) == 0.25


@pytest.mark.parametrize("spec", FAMILIES)
def test_trace_matches_finite_differences_at_coincidence(spec, rng):
    x = rng.standard_normal(2)
    step = 1e-5
    estimate = 0.0
    for a in range(2):
        e = np.zeros(2)
        e[a] = step
        estimate += (kernel_grad_x(spec, x, x + e)[a] - kernel_grad_x(spec, x, x - e)[a]) / (2 * step)
    assert_allclose(kernel_trace_grad_xx(spec, x, x), estimate, rtol=1e-5)


@pytest.mark.parametrize("spec", FAMILIES)
def test_grad_x_matches_finite_differences(spec, rng):
    step = 1e-6
    for _ in range(20):
        x, y = rng.standard_normal(3), rng.standard_normal(3)
        numeric = np.array([
            (kernel_eval(spec, x + step * e, y) - kernel_eval(spec, x - step * e, y)) / (2 * step)
            for e in np.eye(3)
        ])
        assert_allclose(kernel_grad_x(spec, x, y), numeric, atol=1e-6)


@pytest.mark.parametrize("spec", FAMILIES)
def test_mixed_derivative_matches_finite_differences(spec, rng):
    x, y = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    step = 1e-6
    mixed = grad_xy_matrix(spec, x, y)
    for b in range(2):
        e = np.zeros(2)
        e[b] = step
        numeric = (grad_x_matrix(spec, x, y + e) - grad_x_matrix(spec, x, y - e)) / (2 * step)
        assert_allclose(mixed[:, :, :, b], numeric, atol=1e-6)
    assert_allclose(np.trace(mixed, axis1=2, axis2=3), trace_grad_xy_matrix(spec, x, y), atol=1e-12)


@pytest.mark.parametrize("spec", FAMILIES)
def test_kernel_parts_agree_with_separate_evaluators(spec, rng):
    x, y = rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    parts = kernel_parts(spec, x, y)
    assert_allclose(parts.value, kernel_matrix(spec, x, y), rtol=1e-14)
    assert_allclose(parts.grad_x, grad_x_matrix(spec, x, y), rtol=1e-14, atol=1e-15)
    assert_allclose(parts.grad_y, grad_y_matrix(spec, x, y), rtol=1e-14, atol=1e-15)
    assert_allclose(parts.trace_grad_xy, trace_grad_xy_matrix(spec, x, y), rtol=1e-14)


@pytest.mark.parametrize("family", [KernelFamily.RBF, KernelFamily.IMQ])
def test_radial_kernel_parts_gradients_are_exact_negatives(family, rng):
    parts = kernel_parts(KernelSpec(family, 0.7), rng.standard_normal((6, 2)), rng.standard_normal((9, 2)))
    assert np.array_equal(parts.grad_x, -parts.grad_y)


def test_rbf_self_gradient_is_exactly_zero(rbf, rng):
    x = rng.standard_normal((6, 3))
    grads = grad_x_matrix(rbf, x, x)
    for i in range(6):
        assert np.all(grads[i, i] == 0.0)


@pytest.mark.parametrize("spec", FAMILIES[:4])
def test_gram_matrices_are_positive_semidefinite(spec, rng):
    for _ in range(100):
        n, d = int(rng.integers(2, 33)), int(rng.integers(1, 6))
        x = rng.standard_normal((n, d))
        gram = kernel_matrix(spec, x, x)
        assert np.linalg.eigvalsh(gram).min() >= -1e-8 * np.trace(gram)


def test_trace_diagonal_matches_matrix(rbf, rng):
    x = rng.standard_normal((5, 2))
    assert_allclose(trace_grad_xy_diagonal(rbf, x), np.diag(trace_grad_xy_matrix(rbf, x, x)))


def test_median_bandwidth_examples():
    assert_allclose(median_bandwidth([[0.0], [1.0]]), 1.0 / np.sqrt(2 * np.log(3)))
    assert_allclose(median_bandwidth([[0.0], [1.0]]), 0.6745, atol=1e-4)
    assert_allclose(median_bandwidth([[0.0], [2.0], [4.0]]), 2.0 / np.sqrt(2 * np.log(4)))


def test_median_bandwidth_is_homogeneous(rng):
    x = rng.standard_normal((20, 3))
    assert_allclose(median_bandwidth(3.5 * x), 3.5 * median_bandwidth(x), rtol=1e-13)


def test_median_bandwidth_degenerate():
    with pytest.raises(DegenerateEnsembleError):
        median_bandwidth([[1.0, 1.0]])
    with pytest.raises(DegenerateEnsembleError):
        median_bandwidth([[1.0], [1.0], [1.0]])


def test_median_bandwidth_zero_median_with_distinct_points():
    with pytest.raises(DegenerateEnsembleError, match="^Median pairwise distance is zero$"):
        median_bandwidth([[0.0], [0.0], [0.0], [0.0], [5.0]])


def test_resolve_bandwidth_falls_back_with_warning(caplog):
    spec = KernelSpec(KernelFamily.RBF, "median")
    with caplog.at_level("WARNING"):
        resolved = resolve_bandwidth(spec, [[0.5]])
    assert resolved.bandwidth == 1.0
    assert "Median heuristic unavailable" in caplog.text


def test_resolve_bandwidth_keeps_fixed(rbf):
    assert resolve_bandwidth(rbf, [[0.0], [3.0]]) is rbf


@pytest.mark.parametrize("kwargs", [
    {"family": "rbf", "bandwidth": -1.0},
    {"family": "rbf", "bandwidth": 0.0},
    {"family": "rbf", "bandwidth": "mean"},
    {"family": "gaussian"},
    {"family": "imq", "bandwidth": 1.0, "imq_exponent": 0.5},
    {"family": "imq", "bandwidth": 1.0, "imq_offset": 0.0},
])
def test_kernel_spec_validation(kwargs):
    with pytest.raises(ConfigurationError):
        KernelSpec(**kwargs)


def test_unresolved_bandwidth_is_rejected():
    with pytest.raises(ConfigurationError):
        kernel_eval(KernelSpec(KernelFamily.RBF), [0.0], [1.0])


def test_dimension_mismatch(rbf):
    with pytest.raises(ContractViolation):
        kernel_matrix(rbf, np.zeros((2, 2)), np.zeros((2, 3)))
