"""
Positive-definite kernels and the derivatives SVGD needs.

RBF and IMQ are radial, k(x, y) = f(|x - y|^2), and share one code path built on
f, f' and f''. All formulas are closed form; finite differences live in the tests only.
Pairwise evaluators return arrays indexed ``[i, j]`` for ``x[i]``, ``y[j]``.
"""
import logging
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import pdist

from .config import DEFAULT_BANDWIDTH, DEFAULT_IMQ_EXPONENT, DEFAULT_IMQ_OFFSET, MEDIAN, KernelFamily
from .errors import ConfigurationError, ContractViolation, DegenerateEnsembleError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelSpec:
    """
    Kernel family and parameters. ``bandwidth=None`` (or ``"median"``) defers the
    length-scale to the median heuristic, see ``resolve_bandwidth``.
    """
    family: KernelFamily = KernelFamily.RBF
    bandwidth: float | None = None
    imq_exponent: float = DEFAULT_IMQ_EXPONENT
    imq_offset: float = DEFAULT_IMQ_OFFSET

    def __post_init__(self):
        try:
            family = KernelFamily(self.family)
        except ValueError:
            raise ConfigurationError(f"Unknown kernel family {self.family!r}")
        object.__setattr__(self, "family", family)

        bandwidth = self.bandwidth
        if isinstance(bandwidth, str):
            if bandwidth != MEDIAN:
                raise ConfigurationError(f"Bandwidth must be a positive number or {MEDIAN!r}, got {bandwidth!r}")
            bandwidth = None
        if bandwidth is not None:
            bandwidth = float(bandwidth)
            if not np.isfinite(bandwidth) or bandwidth <= 0:
                raise ConfigurationError(f"Bandwidth must be positive, got {bandwidth}")
        object.__setattr__(self, "bandwidth", bandwidth)

        if family == KernelFamily.IMQ:
            if not -1.0 < self.imq_exponent < 0.0:
                raise ConfigurationError(f"IMQ exponent must lie in (-1, 0), got {self.imq_exponent}")
            if self.imq_offset <= 0:
                raise ConfigurationError(f"IMQ offset must be positive, got {self.imq_offset}")

    @property
    def is_median(self) -> bool:
        return self.bandwidth is None

    def with_bandwidth(self, bandwidth: float) -> "KernelSpec":
        return replace(self, bandwidth=bandwidth)


def _as_points(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ContractViolation(f"Expected a point or an (n, d) array, got shape {arr.shape}")
    return arr


def _as_point(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ContractViolation(f"Expected a single point of shape (d,), got shape {arr.shape}")
    return arr


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = _as_points(x), _as_points(y)
    if x.shape[1] != y.shape[1]:
        raise ContractViolation(f"Dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return x, y


def _bandwidth(spec: KernelSpec) -> float:
    if spec.bandwidth is None:
        raise ConfigurationError("Kernel bandwidth is unresolved; call resolve_bandwidth first")
    return spec.bandwidth


def _radial(spec: KernelSpec, sq: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Profile f(s) and its first two derivatives in s = |x - y|^2."""
    h2 = _bandwidth(spec) ** 2
    if spec.family == KernelFamily.RBF:
        f = np.exp(-sq / (2.0 * h2))
        return f, -f / (2.0 * h2), f / (4.0 * h2 * h2)
    beta, c = spec.imq_exponent, spec.imq_offset
    base = c + sq / h2
    f = base ** beta
    f1 = beta / h2 * base ** (beta - 1.0)
    f2 = beta * (beta - 1.0) / (h2 * h2) * base ** (beta - 2.0)
    return f, f1, f2


def _squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return (diff * diff).sum(axis=-1)


def kernel_matrix(spec: KernelSpec, x, y) -> np.ndarray:
    x, y = _pair(x, y)
    if spec.family == KernelFamily.LINEAR:
        return (x[:, None, :] * y[None, :, :]).sum(axis=-1) + 1.0
    f, _, _ = _radial(spec, _squared_distances(x, y))
    return f


def grad_x_matrix(spec: KernelSpec, x, y) -> np.ndarray:
    """``[i, j, :] = grad_x k(x_i, y_j)``."""
    x, y = _pair(x, y)
    if spec.family == KernelFamily.LINEAR:
        return np.broadcast_to(y[None, :, :], (x.shape[0],) + y.shape).copy()
    toward = y[None, :, :] - x[:, None, :]
    _, f1, _ = _radial(spec, (toward * toward).sum(axis=-1))
    # -2 f' >= 0 for both radial families, so a zero offset yields +0.0
    return (-2.0 * f1)[..., None] * toward


def grad_y_matrix(spec: KernelSpec, x, y) -> np.ndarray:
    """``[i, j, :] = grad_y k(x_i, y_j)``."""
    x, y = _pair(x, y)
    if spec.family == KernelFamily.LINEAR:
        return np.broadcast_to(x[:, None, :], (x.shape[0], y.shape[0], x.shape[1])).copy()
    away = x[:, None, :] - y[None, :, :]
    _, f1, _ = _radial(spec, (away * away).sum(axis=-1))
    return (-2.0 * f1)[..., None] * away


def grad_xy_matrix(spec: KernelSpec, x, y) -> np.ndarray:
    """``[i, j, a, b] = d/dx_a d/dy_b k(x_i, y_j)``."""
    x, y = _pair(x, y)
    d = x.shape[1]
    eye = np.eye(d)
    if spec.family == KernelFamily.LINEAR:
        return np.broadcast_to(eye, (x.shape[0], y.shape[0], d, d)).copy()
    diff = x[:, None, :] - y[None, :, :]
    _, f1, f2 = _radial(spec, (diff * diff).sum(axis=-1))
    outer = diff[..., :, None] * diff[..., None, :]
    return (-2.0 * f1)[..., None, None] * eye - (4.0 * f2)[..., None, None] * outer


def trace_grad_xy_matrix(spec: KernelSpec, x, y) -> np.ndarray:
    """``[i, j] = sum_a d/dx_a d/dy_a k(x_i, y_j)``."""
    x, y = _pair(x, y)
    d = x.shape[1]
    if spec.family == KernelFamily.LINEAR:
        return np.full((x.shape[0], y.shape[0]), float(d))
    sq = _squared_distances(x, y)
    _, f1, f2 = _radial(spec, sq)
    return -2.0 * f1 * d - 4.0 * f2 * sq


class KernelParts(NamedTuple):
    value: np.ndarray
    grad_x: np.ndarray
    grad_y: np.ndarray
    trace_grad_xy: np.ndarray


def kernel_parts(spec: KernelSpec, x, y) -> KernelParts:
    """Kernel value, both gradients and the mixed-derivative trace from one distance pass."""
    x, y = _pair(x, y)
    if spec.family == KernelFamily.LINEAR:
        return KernelParts(kernel_matrix(spec, x, y), grad_x_matrix(spec, x, y),
                           grad_y_matrix(spec, x, y), trace_grad_xy_matrix(spec, x, y))
    d = x.shape[1]
    away = x[:, None, :] - y[None, :, :]
    sq = (away * away).sum(axis=-1)
    f, f1, f2 = _radial(spec, sq)
    grad_y = (-2.0 * f1)[..., None] * away
    # radial kernels: grad_x = -grad_y exactly
    return KernelParts(f, -grad_y, grad_y, -2.0 * f1 * d - 4.0 * f2 * sq)


def kernel_diagonal(spec: KernelSpec, x) -> np.ndarray:
    """k(x_i, x_i) for every row."""
    x = _as_points(x)
    if spec.family == KernelFamily.LINEAR:
        return (x * x).sum(axis=-1) + 1.0
    f, _, _ = _radial(spec, np.zeros(x.shape[0]))
    return f


def grad_x_diagonal(spec: KernelSpec, x) -> np.ndarray:
    """grad_x k(x, x') at x' = x; zero for the radial families."""
    x = _as_points(x)
    if spec.family == KernelFamily.LINEAR:
        return x.copy()
    return np.zeros_like(x)


def trace_grad_xy_diagonal(spec: KernelSpec, x) -> np.ndarray:
    """The mixed-derivative trace at coincidence, sum_a d/dx_a d/dx'_a k(x, x') at x = x'."""
    x = _as_points(x)
    d = x.shape[1]
    if spec.family == KernelFamily.LINEAR:
        return np.full(x.shape[0], float(d))
    _, f1, _ = _radial(spec, np.zeros(x.shape[0]))
    return -2.0 * f1 * d


def kernel_eval(spec: KernelSpec, x, y) -> float:
    return float(kernel_matrix(spec, _as_point(x), _as_point(y))[0, 0])


def kernel_grad_x(spec: KernelSpec, x, y) -> np.ndarray:
    return grad_x_matrix(spec, _as_point(x), _as_point(y))[0, 0]


def kernel_grad_y(spec: KernelSpec, x, y) -> np.ndarray:
    return grad_y_matrix(spec, _as_point(x), _as_point(y))[0, 0]


def kernel_trace_grad_xx(spec: KernelSpec, x, y) -> float:
    return float(trace_grad_xy_matrix(spec, _as_point(x), _as_point(y))[0, 0])


def median_bandwidth(points) -> float:
    """Median pairwise distance divided by sqrt(2 ln(n + 1))."""
    pts = _as_points(points)
    n = pts.shape[0]
    if n < 2:
        raise DegenerateEnsembleError("Median heuristic needs at least two points")
    median = float(np.median(pdist(pts)))
    if median <= 0.0:
        raise DegenerateEnsembleError("Median pairwise distance is zero")
    return median / np.sqrt(2.0 * np.log(n + 1.0))


def resolve_bandwidth(spec: KernelSpec, points) -> KernelSpec:
    """Returns ``spec`` with a concrete bandwidth, applying the median heuristic when requested."""
    if not spec.is_median:
        return spec
    if spec.family == KernelFamily.LINEAR:
        return spec.with_bandwidth(DEFAULT_BANDWIDTH)
    try:
        bandwidth = median_bandwidth(points)
    except DegenerateEnsembleError as e:
        logger.warning("Median heuristic unavailable (%s); using bandwidth %s", e, DEFAULT_BANDWIDTH)
        bandwidth = DEFAULT_BANDWIDTH
    logger.debug("Median-heuristic bandwidth %.6g", bandwidth)
    return spec.with_bandwidth(bandwidth)
