"""
Discrepancies between measures: kernelized Stein discrepancy (V- and U-statistics),
the bounded-Lipschitz distance of discrete measures (exact, by linear programming)
and KL estimators.

Double sums are accumulated per row over a canonical ordering of the points, then the
row sums are reduced once, so results do not depend on the input order or worker count.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.optimize import linprog
from scipy.spatial.distance import pdist, squareform

from .config import BL_MAX_SUPPORT, BL_WEIGHT_TOLERANCE, Estimator
from .errors import ContractViolation, SteinflowError, TrackingRequiredError
from .kernels import (KernelSpec, grad_x_diagonal, grad_x_matrix, grad_xy_matrix, grad_y_matrix, kernel_diagonal,
                      kernel_matrix, kernel_parts, resolve_bandwidth, trace_grad_xy_diagonal)
from .targets import TargetModel
from .utils import canonical_order, parallel_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscrepancyReport:
    value: float
    estimator: Estimator
    n_points: int
    bandwidth: float | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimator"] = self.estimator.value
        return out


@dataclass(frozen=True)
class TrackedKl:
    value: float
    standard_error: float
    relative: bool


def _stein_block(spec: KernelSpec, x: np.ndarray, sx: np.ndarray, y: np.ndarray, sy: np.ndarray) -> np.ndarray:
    parts = kernel_parts(spec, x, y)
    score_dot = (sx[:, None, :] * sy[None, :, :]).sum(axis=-1)
    return (score_dot * parts.value
            + (sx[:, None, :] * parts.grad_y).sum(axis=-1)
            + (sy[None, :, :] * parts.grad_x).sum(axis=-1)
            + parts.trace_grad_xy)


def stein_kernel_matrix(target: TargetModel, spec: KernelSpec, x, y=None) -> np.ndarray:
    """kappa_p(x_i, y_j) for a resolved kernel."""
    x, _ = target._points(x)
    y = x if y is None else target._points(y)[0]
    return _stein_block(spec, x, target.score(x), y, target.score(y))


def stein_kernel(target: TargetModel, spec: KernelSpec, x, y) -> float:
    """
    The Stein kernel kappa_p(x, y) = s(x).s(y) k + s(x).grad_y k + s(y).grad_x k + tr grad_xy k,
    with s the target score.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.ndim != 1 or y.ndim != 1:
        raise ContractViolation("stein_kernel takes single points")
    return float(stein_kernel_matrix(target, spec, x, y)[0, 0])


def stein_kernel_diagonal(target: TargetModel, spec: KernelSpec, points) -> np.ndarray:
    """kappa_p(x_i, x_i) for every row, without forming the pairwise matrix."""
    pts, _ = target._points(points)
    scores = target.score(pts)
    grad = grad_x_diagonal(spec, pts)
    return ((scores * scores).sum(axis=-1) * kernel_diagonal(spec, pts)
            + 2.0 * (scores * grad).sum(axis=-1) + trace_grad_xy_diagonal(spec, pts))


def _stein_sums(target: TargetModel, spec: KernelSpec, points, workers: int | None):
    """Sorted points, resolved kernel, total double sum and diagonal sum of kappa_p."""
    pts, _ = target._points(points)
    if pts.shape[0] == 0:
        raise ContractViolation("KSD of an empty point set")
    pts = pts[canonical_order(pts)]
    spec = resolve_bandwidth(spec, pts)
    scores = target.score(pts)

    def rows(start: int, stop: int) -> np.ndarray:
        block = _stein_block(spec, pts[start:stop], scores[start:stop], pts, scores)
        diag = block[np.arange(stop - start), np.arange(start, stop)]
        return np.stack([block.sum(axis=1), diag], axis=1)

    sums = parallel_rows(rows, pts.shape[0], workers)
    return pts, spec, float(np.sum(sums[:, 0])), float(np.sum(sums[:, 1]))


def ksd_vstat(target: TargetModel, spec: KernelSpec, points, workers: int | None = None) -> DiscrepancyReport:
    """S(mu_n || p) = sqrt(mean_ij kappa_p(x_i, x_j)), the exact KSD of the empirical measure."""
    pts, spec, total, _ = _stein_sums(target, spec, points, workers)
    n = pts.shape[0]
    value = np.sqrt(max(total / (n * n), 0.0))
    return DiscrepancyReport(float(value), Estimator.VSTAT, n, spec.bandwidth)


def ksd_ustat(target: TargetModel, spec: KernelSpec, points, workers: int | None = None) -> DiscrepancyReport:
    """Unbiased off-diagonal estimator, reported as a signed square root."""
    pts, _ = target._points(points)
    n = pts.shape[0]
    if n < 2:
        raise ContractViolation(f"U-statistic needs at least 2 points, got {n}")
    pts, spec, total, diag = _stein_sums(target, spec, pts, workers)
    squared = (total - diag) / (n * (n - 1))
    value = np.sign(squared) * np.sqrt(abs(squared))
    return DiscrepancyReport(float(value), Estimator.USTAT, n, spec.bandwidth)


def ksd(target: TargetModel, spec: KernelSpec, points, estimator: Estimator = Estimator.VSTAT,
        workers: int | None = None) -> DiscrepancyReport:
    if Estimator(estimator) == Estimator.USTAT:
        return ksd_ustat(target, spec, points, workers)
    return ksd_vstat(target, spec, points, workers)


def rkhs_norm_phi_star(target: TargetModel, spec: KernelSpec, points) -> float:
    """
    ||phi*||_H computed from the expansion phi*(.) = 1/n sum_j [s(x_j) k(x_j, .) + grad_{x_j} k(x_j, .)]
    as a quadratic form in the Gram matrix of the features k(x_j, .) and d/dx_{j,a} k(x_j, .).
    Algebraically equal to the V-statistic KSD.
    """
    pts, _ = target._points(points)
    n, d = pts.shape
    spec = resolve_bandwidth(spec, pts)
    scores = target.score(pts)

    gram_kk = kernel_matrix(spec, pts, pts)
    # <k(x_j, .), d_b k(x_l, .)> = d/dy_b k(x_j, x_l)
    gram_kd = grad_y_matrix(spec, pts, pts).reshape(n, n * d)
    # <d_a k(x_j, .), k(x_l, .)> = d/dx_a k(x_j, x_l)
    gram_dk = grad_x_matrix(spec, pts, pts).transpose(0, 2, 1).reshape(n * d, n)
    gram_dd = grad_xy_matrix(spec, pts, pts).transpose(0, 2, 1, 3).reshape(n * d, n * d)
    gram = np.block([[gram_kk, gram_kd], [gram_dk, gram_dd]])

    total = 0.0
    for a in range(d):
        selector = np.zeros((n, d))
        selector[:, a] = 1.0
        coef = np.concatenate([scores[:, a], selector.ravel()]) / n
        total += float(coef @ gram @ coef)
    return float(np.sqrt(max(total, 0.0)))


def _weights(points: np.ndarray, weights, name: str) -> np.ndarray:
    n = points.shape[0]
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ContractViolation(f"{name}: expected {n} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > BL_WEIGHT_TOLERANCE:
        raise ContractViolation(f"{name}: weights must be nonnegative and sum to 1")
    return w


def _measure(points, weights, name: str) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ContractViolation(f"{name}: expected a nonempty (n, d) point set")
    w = _weights(pts, weights, name)
    order = canonical_order(pts)
    return pts[order], w[order]


def _measure_key(points: np.ndarray, weights: np.ndarray) -> tuple:
    return points.shape[0], tuple(points.ravel()), tuple(weights)


def _bl_lp(points_a, weights_a, points_b, weights_b) -> float:
    support = np.vstack([points_a, points_b])
    m = support.shape[0]
    objective = -np.concatenate([weights_a, -weights_b])
    bounds = [(-1.0, 1.0)] * m
    dist = squareform(pdist(support))
    s_idx, t_idx = np.triu_indices(m, 1)
    n_pairs = len(s_idx)
    rows = np.repeat(np.arange(2 * n_pairs), 2)
    cols = np.column_stack([s_idx, t_idx, t_idx, s_idx]).ravel()
    data = np.tile([1.0, -1.0], 2 * n_pairs)
    a_ub = sparse.csr_matrix((data, (rows, cols)), shape=(2 * n_pairs, m))
    b_ub = np.repeat(dist[s_idx, t_idx], 2)
    result = linprog(objective, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs-ds",
                     options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if not result.success:
        raise SteinflowError(f"BL linear program failed: {result.message}")
    logger.debug("BL LP over %d support points: %d constraints, %d iterations", m, 2 * n_pairs, result.nit)
    return max(-float(result.fun), 0.0)


def bl_distance(points_a, points_b, weights_a=None, weights_b=None) -> float:
    """
    Bounded-Lipschitz distance between two discrete measures, solved exactly as
    max sum_i a_i f(u_i) - sum_j b_j f(v_j) s.t. |f| <= 1, |f(s) - f(t)| <= |s - t|
    over the union support (uniform weights by default).
    """
    pa, wa = _measure(points_a, weights_a, "points_a")
    pb, wb = _measure(points_b, weights_b, "points_b")
    if pa.shape[1] != pb.shape[1]:
        raise ContractViolation(f"Dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    if pa.shape[0] + pb.shape[0] > BL_MAX_SUPPORT:
        raise ContractViolation(f"BL support capped at {BL_MAX_SUPPORT} points")
    # the LP value is symmetric; solving in one canonical orientation makes it exactly so
    if _measure_key(pb, wb) < _measure_key(pa, wa):
        pa, wa, pb, wb = pb, wb, pa, wa
    return _bl_lp(pa, wa, pb, wb)


def _spd_cholesky(cov, d: int, name: str) -> np.ndarray:
    arr = np.asarray(cov, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.shape != (d, d):
        raise ContractViolation(f"{name} must be {d}x{d}, got shape {arr.shape}")
    try:
        return linalg.cholesky(arr, lower=True)
    except linalg.LinAlgError:
        raise ContractViolation(f"{name} is not symmetric positive definite")


def kl_gaussian(mean0, cov0, mean1, cov1) -> float:
    """KL(N(mean0, cov0) || N(mean1, cov1)) in closed form."""
    mean0, mean1 = np.atleast_1d(np.asarray(mean0, dtype=float)), np.atleast_1d(np.asarray(mean1, dtype=float))
    if mean0.shape != mean1.shape:
        raise ContractViolation(f"Dimension mismatch: {mean0.shape} vs {mean1.shape}")
    d = mean0.shape[0]
    chol0 = _spd_cholesky(cov0, d, "cov0")
    chol1 = _spd_cholesky(cov1, d, "cov1")
    ratio = linalg.solve_triangular(chol1, chol0, lower=True)
    shift = linalg.solve_triangular(chol1, mean1 - mean0, lower=True)
    logdet0 = 2.0 * np.log(np.diag(chol0)).sum()
    logdet1 = 2.0 * np.log(np.diag(chol1)).sum()
    value = 0.5 * ((ratio * ratio).sum() + (shift * shift).sum() - d + logdet1 - logdet0)
    return max(float(value), 0.0)


def kl_tracked_stats(ensemble, target: TargetModel) -> TrackedKl:
    """
    Tracked KL estimate mean_i [log q(x_i) - log p(x_i)] with its Monte Carlo standard error.
    Without a known normalizer the value is KL up to an additive constant (``relative=True``).
    """
    if ensemble.tracked_log_q is None:
        raise TrackingRequiredError("Ensemble carries no tracked log-densities")
    diffs = ensemble.tracked_log_q - target.log_density(ensemble.positions)
    n = diffs.shape[0]
    relative = target.log_normalizer is None
    value = float(diffs.mean()) + (0.0 if relative else target.log_normalizer)
    stderr = float(diffs.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return TrackedKl(value, stderr, relative)


def kl_tracked(ensemble, target: TargetModel) -> float:
    return kl_tracked_stats(ensemble, target).value
