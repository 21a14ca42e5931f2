"""
Target distributions exposing log-density and score, plus the Stein operator.

Log-densities may be unnormalized. A target that knows its normalizer reports it through
``log_normalizer`` so KL estimates can be made absolute; nothing else depends on it.
Whether a score-based target is distantly dissipative is assumed, never checked.

All density functions accept either one point of shape (d,) or a batch of shape (n, d)
and return a float / (d,) array or an (n,) / (n, d) array respectively.
"""
from collections.abc import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, softmax

from .config import SIMPLEX_TOLERANCE
from .errors import ConfigurationError, ContractViolation
from .utils import derive_rng


class TargetModel:
    """
    A differentiable (unnormalized) log density on R^d and its score.

    Generic targets are built from batched callables; the built-in families subclass this
    and override the ``_batch`` hooks.
    """

    def __init__(self, dimension: int,
                 log_density: Callable[[np.ndarray], np.ndarray] | None = None,
                 score: Callable[[np.ndarray], np.ndarray] | None = None,
                 score_jacobian: Callable[[np.ndarray], np.ndarray] | None = None,
                 log_normalizer: float | None = None):
        if int(dimension) < 1:
            raise ConfigurationError(f"Target dimension must be >= 1, got {dimension}")
        self.dimension = int(dimension)
        self._log_density_fn = log_density
        self._score_fn = score
        self._score_jacobian_fn = score_jacobian
        self._log_normalizer = log_normalizer

    @property
    def log_normalizer(self) -> float | None:
        """log Z with p = exp(log_density) / Z, or None when unknown."""
        return self._log_normalizer

    @property
    def score_lipschitz(self) -> float | None:
        """Lipschitz constant of the score when known in closed form."""
        return None

    @property
    def has_sampler(self) -> bool:
        return False

    def _points(self, x) -> tuple[np.ndarray, bool]:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.dimension:
            raise ContractViolation(
                f"Expected points of dimension {self.dimension}, got shape {np.shape(x)}")
        return arr, single

    def _log_density_batch(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self._log_density_fn(pts), dtype=float)

    def _score_batch(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self._score_fn(pts), dtype=float)

    def _score_jacobian_batch(self, pts: np.ndarray) -> np.ndarray:
        if self._score_jacobian_fn is None:
            raise NotImplementedError("This target has no score Jacobian")
        return np.asarray(self._score_jacobian_fn(pts), dtype=float)

    def log_density(self, x):
        pts, single = self._points(x)
        out = self._log_density_batch(pts)
        return float(out[0]) if single else out

    def score(self, x) -> np.ndarray:
        pts, single = self._points(x)
        out = self._score_batch(pts)
        return out[0] if single else out

    def score_jacobian(self, x) -> np.ndarray:
        pts, single = self._points(x)
        out = self._score_jacobian_batch(pts)
        return out[0] if single else out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no exact sampler")


class GaussianTarget(TargetModel):
    """N(mean, covariance); the Cholesky factor is computed once, at construction."""

    def __init__(self, mean, covariance):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if mean.ndim != 1:
            raise ConfigurationError(f"Gaussian mean must be a vector, got shape {mean.shape}")
        d = mean.shape[0]
        cov = _as_square(covariance, d)
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-12):
            raise ConfigurationError("Covariance is not symmetric")
        try:
            chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError:
            raise ConfigurationError("Covariance is not positive definite (Cholesky failed)")

        self.mean = mean
        self.covariance = cov
        self.cholesky = chol
        self.precision = linalg.cho_solve((chol, True), np.eye(d))
        log_normalizer = 0.5 * d * np.log(2.0 * np.pi) + float(np.log(np.diag(chol)).sum())
        super().__init__(d, log_normalizer=log_normalizer)

    @property
    def score_lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.precision).max())

    @property
    def has_sampler(self) -> bool:
        return True

    def _log_density_batch(self, pts: np.ndarray) -> np.ndarray:
        whitened = linalg.solve_triangular(self.cholesky, (pts - self.mean).T, lower=True)
        return -0.5 * (whitened * whitened).sum(axis=0)

    def _score_batch(self, pts: np.ndarray) -> np.ndarray:
        diff = pts - self.mean
        return -(diff[:, None, :] * self.precision[None, :, :]).sum(axis=-1)

    def _score_jacobian_batch(self, pts: np.ndarray) -> np.ndarray:
        return np.broadcast_to(-self.precision, (pts.shape[0],) + self.precision.shape).copy()

    def normalized_log_density(self, x):
        return self.log_density(x) - self.log_normalizer

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((int(n), self.dimension))
        return self.mean + z @ self.cholesky.T


class MixtureTarget(TargetModel):
    """Finite mixture of Gaussian components; log_density is normalized (log_normalizer 0)."""

    def __init__(self, weights, components: Sequence[GaussianTarget]):
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 1 or len(weights) == 0 or len(weights) != len(components):
            raise ConfigurationError("Mixture needs one weight per component")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > SIMPLEX_TOLERANCE:
            raise ConfigurationError(f"Mixture weights must be positive and sum to 1, got {weights.tolist()}")
        dims = {c.dimension for c in components}
        if len(dims) != 1:
            raise ConfigurationError(f"Mixture components disagree on dimension: {sorted(dims)}")
        self.weights = weights
        self.components = list(components)
        self._log_weights = np.log(weights)
        super().__init__(dims.pop(), log_normalizer=0.0)

    @property
    def has_sampler(self) -> bool:
        return True

    def _component_log_terms(self, pts: np.ndarray) -> np.ndarray:
        return np.stack([
            lw + c._log_density_batch(pts) - c.log_normalizer
            for lw, c in zip(self._log_weights, self.components)
        ], axis=1)

    def responsibilities(self, x) -> np.ndarray:
        pts, single = self._points(x)
        resp = softmax(self._component_log_terms(pts), axis=1)
        return resp[0] if single else resp

    def _log_density_batch(self, pts: np.ndarray) -> np.ndarray:
        return logsumexp(self._component_log_terms(pts), axis=1)

    def _score_batch(self, pts: np.ndarray) -> np.ndarray:
        resp = softmax(self._component_log_terms(pts), axis=1)
        scores = np.stack([c._score_batch(pts) for c in self.components], axis=1)
        return (resp[:, :, None] * scores).sum(axis=1)

    def _score_jacobian_batch(self, pts: np.ndarray) -> np.ndarray:
        resp = softmax(self._component_log_terms(pts), axis=1)
        scores = np.stack([c._score_batch(pts) for c in self.components], axis=1)
        jacs = np.stack([c._score_jacobian_batch(pts) for c in self.components], axis=1)
        mixed = (resp[:, :, None] * scores).sum(axis=1)
        second = jacs + scores[..., :, None] * scores[..., None, :]
        return (resp[:, :, None, None] * second).sum(axis=1) - mixed[:, :, None] * mixed[:, None, :]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        labels = rng.choice(len(self.components), size=int(n), p=self.weights)
        out = np.empty((int(n), self.dimension))
        for k, component in enumerate(self.components):
            idx = np.flatnonzero(labels == k)
            if len(idx):
                out[idx] = component.sample(rng, len(idx))
        return out


def _as_square(matrix, d: int) -> np.ndarray:
    arr = np.asarray(matrix, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1 and arr.size == d * d:
        arr = arr.reshape(d, d)
    if arr.shape != (d, d):
        raise ConfigurationError(f"Covariance must be {d}x{d} (dense row-major), got shape {np.shape(matrix)}")
    return arr


def stein_operator_apply(target: TargetModel, phi: Callable, div_phi: Callable, x) -> float:
    """S_p phi(x) = score(x) . phi(x) + div phi(x) at a single point."""
    pts, _ = target._points(x)
    point = pts[0]
    return float(np.dot(target.score(point), np.asarray(phi(point), dtype=float)) + float(div_phi(point)))


def stein_identity_residual(target: TargetModel, phi: Callable, div_phi: Callable,
                            sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None,
                            n_samples: int = 10_000, seed: int = 0) -> float:
    """
    Monte Carlo mean of S_p phi over exact draws from the target. ``phi`` and ``div_phi``
    are applied to the whole (n, d) batch; ``sampler(rng, n)`` defaults to ``target.sample``.
    """
    if n_samples < 1:
        raise ContractViolation(f"n_samples must be >= 1, got {n_samples}")
    sampler = sampler or target.sample
    rng = derive_rng(seed, "stein_identity_residual")
    pts, _ = target._points(np.asarray(sampler(rng, n_samples), dtype=float).reshape(n_samples, -1))
    values = (target.score(pts) * np.asarray(phi(pts), dtype=float)).sum(axis=-1)
    values = values + np.asarray(div_phi(pts), dtype=float)
    return float(values.mean())
