"""
Discrete-time SVGD: the phi* drift against an ensemble, its Jacobian, step-size caps and
the simultaneous particle update with optional log-density tracking.

Every particle sum runs over the ensemble in canonical (lexicographic) order and query rows
are evaluated in fixed-size blocks, so a step is bitwise independent of particle indexing
and of the worker count.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import SINGULAR_DET_THRESHOLD, StepMode
from .discrepancy import kl_tracked_stats, ksd_vstat
from .errors import ConfigurationError, ContractViolation, DivergedError, StepTooLargeError, TrackingRequiredError
from .kernels import KernelSpec, grad_xy_matrix, kernel_parts, resolve_bandwidth, trace_grad_xy_diagonal
from .targets import GaussianTarget, TargetModel
from .utils import canonical_order, parallel_rows

logger = logging.getLogger(__name__)

LOG_SINGULAR_DET = float(np.log(SINGULAR_DET_THRESHOLD))


@dataclass(frozen=True)
class ParticleEnsemble:
    """
    Particle positions (n, d), optionally with the log-density of the pushed-forward
    initial measure at every particle.
    """
    positions: np.ndarray
    tracked_log_q: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        if positions.ndim == 1:
            positions = positions[:, None]
        if positions.ndim != 2 or positions.shape[0] == 0:
            raise ContractViolation(f"Ensemble needs a nonempty (n, d) array, got shape {positions.shape}")
        object.__setattr__(self, "positions", positions)
        if self.tracked_log_q is not None:
            tracked = np.asarray(self.tracked_log_q, dtype=float).reshape(-1)
            if tracked.shape[0] != positions.shape[0]:
                raise ContractViolation(
                    f"tracked_log_q has {tracked.shape[0]} entries for {positions.shape[0]} particles")
            object.__setattr__(self, "tracked_log_q", tracked)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dimension(self) -> int:
        return self.positions.shape[1]

    @property
    def tracking(self) -> bool:
        return self.tracked_log_q is not None


@dataclass(frozen=True)
class StepSchedule:
    """
    Step-size rule. ``capped`` takes min(base, safety * eps*) each iteration; ``ksd`` uses
    base * S^beta. With ``conservative`` the capped rule also honours the analytic cap.
    """
    mode: StepMode = StepMode.CONSTANT
    base: float = 0.05
    beta: float = 1.0
    safety: float = 0.9
    conservative: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", StepMode(self.mode))
        except ValueError:
            raise ConfigurationError(f"Unknown step mode {self.mode!r}")
        if not self.base > 0:
            raise ConfigurationError(f"Step base must be positive, got {self.base}")
        if not self.beta > 0:
            raise ConfigurationError(f"Step exponent beta must be positive, got {self.beta}")
        if not 0 < self.safety <= 1:
            raise ConfigurationError(f"Step safety must lie in (0, 1], got {self.safety}")

    def epsilon(self, target: TargetModel, spec: KernelSpec, ensemble: ParticleEnsemble,
                ksd: float | None = None, workers: int | None = None) -> float:
        if self.mode == StepMode.CONSTANT:
            return self.base
        if self.mode == StepMode.KSD_PROPORTIONAL:
            if ksd is None:
                ksd = ksd_vstat(target, spec, ensemble.positions, workers).value
            # S = 0 means phi* vanishes; any step is a no-op
            return self.base * ksd ** self.beta if ksd > 0 else self.base
        cap = step_size_cap(target, spec, ensemble, workers)
        if self.conservative:
            cap = min(cap, analytic_step_cap(target, spec, ensemble, ksd, workers))
        return min(self.base, self.safety * cap)


@dataclass(frozen=True)
class TrajectoryRow:
    step: int
    epsilon: float
    ksd: float
    kl: float | None = None
    time: float | None = None
    positions: np.ndarray | None = None


@dataclass
class TrajectoryRecord:
    """Recorded rows of a run; ``time_based`` records carry a time column instead of an iteration."""
    time_based: bool = False
    kl_relative: bool = False
    rows: list[TrajectoryRow] = field(default_factory=list)
    final: ParticleEnsemble | None = None

    def append(self, row: TrajectoryRow):
        if self.rows and row.step <= self.rows[-1].step:
            raise ContractViolation(f"Trajectory steps must increase: {row.step} after {self.rows[-1].step}")
        if row.ksd < 0:
            raise ContractViolation(f"Negative KSD {row.ksd} at step {row.step}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.rows], dtype=int)

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([r.epsilon for r in self.rows])

    @property
    def ksd(self) -> np.ndarray:
        return np.array([r.ksd for r in self.rows])

    @property
    def kl(self) -> np.ndarray:
        return np.array([np.nan if r.kl is None else r.kl for r in self.rows])

    @property
    def has_kl(self) -> bool:
        return any(r.kl is not None for r in self.rows)

    @property
    def times(self) -> np.ndarray:
        return np.array([np.nan if r.time is None else r.time for r in self.rows])

    def snapshots(self) -> list[TrajectoryRow]:
        return [r for r in self.rows if r.positions is not None]


def _positions(ensemble) -> np.ndarray:
    if isinstance(ensemble, ParticleEnsemble):
        return ensemble.positions
    return ParticleEnsemble(ensemble).positions


def _block_rows(spec: KernelSpec, particles: np.ndarray, scores: np.ndarray, queries: np.ndarray,
                jacobian: bool, divergence: bool) -> np.ndarray:
    """[drift | divergence | flattened Jacobian] for each query row."""
    n = particles.shape[0]
    parts = kernel_parts(spec, queries, particles)
    drift = (parts.value[:, :, None] * scores[None, :, :] + parts.grad_y).sum(axis=1) / n
    out = [drift]
    if divergence:
        div = ((parts.grad_x * scores[None, :, :]).sum(axis=-1) + parts.trace_grad_xy).sum(axis=1) / n
        out.append(div[:, None])
    if jacobian:
        # J[a, b] = d phi_a / d q_b
        mixed = grad_xy_matrix(spec, queries, particles).transpose(0, 1, 3, 2)
        jac = (scores[None, :, :, None] * parts.grad_x[:, :, None, :] + mixed).sum(axis=1) / n
        out.append(jac.reshape(queries.shape[0], -1))
    return np.concatenate(out, axis=1)


def _evaluate(target: TargetModel, spec: KernelSpec, ensemble, queries, jacobian: bool = False,
              divergence: bool = False, workers: int | None = None):
    particles = _positions(ensemble)
    particles = particles[canonical_order(particles)]
    spec = resolve_bandwidth(spec, particles)
    scores = target.score(particles)
    queries, _ = target._points(queries)

    order = canonical_order(queries)
    sorted_queries = queries[order]
    rows = parallel_rows(
        lambda start, stop: _block_rows(spec, particles, scores, sorted_queries[start:stop], jacobian, divergence),
        sorted_queries.shape[0], workers)
    out = np.empty_like(rows)
    out[order] = rows

    d = queries.shape[1]
    drift = out[:, :d]
    div = out[:, d] if divergence else None
    jac = out[:, d + int(divergence):].reshape(-1, d, d) if jacobian else None
    return drift, div, jac


def phi_star_batch(target: TargetModel, spec: KernelSpec, ensemble, queries, workers: int | None = None) -> np.ndarray:
    return _evaluate(target, spec, ensemble, queries, workers=workers)[0]


def phi_star(target: TargetModel, spec: KernelSpec, ensemble, query) -> np.ndarray:
    """phi*(q) = 1/n sum_j [score(x_j) k(x_j, q) + grad_{x_j} k(x_j, q)]."""
    query = np.asarray(query, dtype=float)
    if query.ndim != 1:
        raise ContractViolation("phi_star takes a single query point")
    return phi_star_batch(target, spec, ensemble, query[None, :])[0]


def phi_star_jacobian_batch(target: TargetModel, spec: KernelSpec, ensemble, queries,
                            workers: int | None = None) -> np.ndarray:
    return _evaluate(target, spec, ensemble, queries, jacobian=True, workers=workers)[2]


def phi_star_jacobian(target: TargetModel, spec: KernelSpec, ensemble, query) -> np.ndarray:
    """``J[a, b] = d phi*_a / d q_b`` at a single query point."""
    query = np.asarray(query, dtype=float)
    if query.ndim != 1:
        raise ContractViolation("phi_star_jacobian takes a single query point")
    return phi_star_jacobian_batch(target, spec, ensemble, query[None, :])[0]


def phi_star_divergence(target: TargetModel, spec: KernelSpec, ensemble, queries,
                        workers: int | None = None) -> np.ndarray:
    return _evaluate(target, spec, ensemble, queries, divergence=True, workers=workers)[1]


def drift_and_divergence(target: TargetModel, spec: KernelSpec, positions, workers: int | None = None):
    """phi* and its divergence at every particle of the ensemble formed by ``positions``."""
    drift, div, _ = _evaluate(target, spec, positions, positions, divergence=True, workers=workers)
    return drift, div


def step_size_cap(target: TargetModel, spec: KernelSpec, ensemble, workers: int | None = None) -> float:
    """
    (2 max_i rho(J(x_i) + J(x_i)^T))^-1 with J the phi* Jacobian, the sup over x taken over
    the particle positions. Returns +inf when every Jacobian vanishes.
    The analytic cap is not folded in here; schedules apply it only with ``conservative``.
    """
    positions = _positions(ensemble)
    jac = phi_star_jacobian_batch(target, spec, positions, positions, workers)
    sym = jac + jac.transpose(0, 2, 1)
    rho = float(np.abs(np.linalg.eigvalsh(sym)).max())
    if rho == 0.0:
        return float("inf")
    return 1.0 / (2.0 * rho)


def analytic_step_cap(target: TargetModel, spec: KernelSpec, ensemble, ksd: float | None = None,
                      workers: int | None = None) -> float:
    """(2 max_x sqrt(tr grad_xx' k(x, x)) S)^-1, a cap that shrinks as the KSD grows."""
    positions = _positions(ensemble)
    resolved = resolve_bandwidth(spec, positions)
    if ksd is None:
        ksd = ksd_vstat(target, resolved, positions, workers).value
    peak = float(np.sqrt(trace_grad_xy_diagonal(resolved, positions).max()))
    if ksd == 0.0 or peak == 0.0:
        return float("inf")
    return 1.0 / (2.0 * peak * ksd)


def raise_diverged(positions: np.ndarray, previous: np.ndarray, iteration: int | None = None,
                    time: float | None = None):
    bad = np.flatnonzero(~np.isfinite(positions).all(axis=1))
    index = int(bad[0])
    where = f"iteration {iteration}" if time is None else f"time {time:.6g}"
    logger.error("Divergence at %s: %d non-finite particle(s), first %d (from %s to %s); "
                 "pre-step bounds [%s, %s]", where, len(bad), index, previous[index].tolist(),
                 positions[index].tolist(), previous.min(axis=0).tolist(), previous.max(axis=0).tolist())
    raise DivergedError(f"Particle {index} became non-finite at {where}",
                        particle_index=index, iteration=iteration, time=time)


def svgd_step(target: TargetModel, spec: KernelSpec, ensemble: ParticleEnsemble, epsilon: float,
              track_density: bool = False, workers: int | None = None) -> ParticleEnsemble:
    """
    One simultaneous SVGD update x_i <- x_i + eps phi*(x_i), with phi* built from the
    pre-step ensemble. With ``track_density`` each tracked log-density drops by
    log|det(I + eps J(x_i))|.
    """
    if epsilon < 0 or not np.isfinite(epsilon):
        raise ContractViolation(f"Step size must be finite and nonnegative, got {epsilon}")
    if track_density and not ensemble.tracking:
        raise TrackingRequiredError("Density tracking requested on an untracked ensemble")

    positions = ensemble.positions
    iteration = ensemble.iteration + 1
    drift, _, jac = _evaluate(target, spec, positions, positions, jacobian=track_density, workers=workers)
    moved = positions + epsilon * drift
    if not np.isfinite(moved).all():
        raise_diverged(moved, positions, iteration=iteration)

    tracked = ensemble.tracked_log_q
    if track_density:
        d = ensemble.dimension
        if d == 1:
            logabsdet = np.log(np.abs(1.0 + epsilon * jac[:, 0, 0]))
        else:
            _, logabsdet = np.linalg.slogdet(np.eye(d) + epsilon * jac)
        singular = np.flatnonzero(~(logabsdet >= LOG_SINGULAR_DET))
        if len(singular):
            index = int(singular[0])
            raise StepTooLargeError(
                f"I + eps*J is singular for particle {index} at iteration {iteration} (eps={epsilon:.6g})",
                particle_index=index, iteration=iteration)
        tracked = tracked - logabsdet
    return ParticleEnsemble(moved, tracked, iteration)


def _kl_or_none(ensemble: ParticleEnsemble, target: TargetModel) -> float | None:
    return kl_tracked_stats(ensemble, target).value if ensemble.tracking else None


def run(target: TargetModel, spec: KernelSpec, initial: ParticleEnsemble, schedule: StepSchedule,
        max_iter: int, record_every: int, track_density: bool | None = None, snapshot_every: int = 0,
        workers: int | None = None) -> TrajectoryRecord:
    """
    Applies ``max_iter`` SVGD steps. Rows are recorded at iteration 0, every ``record_every``
    iterations and at the end; positions are kept on rows whose iteration is a multiple of
    ``snapshot_every`` (never when 0).
    """
    if max_iter < 1:
        raise ContractViolation(f"max_iter must be >= 1, got {max_iter}")
    if record_every < 1:
        raise ContractViolation(f"record_every must be >= 1, got {record_every}")
    if track_density is None:
        track_density = initial.tracking
    if track_density and not initial.tracking:
        raise TrackingRequiredError("Density tracking requested on an untracked ensemble")

    logger.info("SVGD run: n=%d d=%d max_iter=%d schedule=%s tracking=%s",
                initial.n, initial.dimension, max_iter, schedule.mode.value, track_density)
    record = TrajectoryRecord(time_based=False, kl_relative=target.log_normalizer is None)

    def snapshot(ens: ParticleEnsemble, step: int) -> np.ndarray | None:
        if snapshot_every > 0 and step % snapshot_every == 0:
            return ens.positions.copy()
        return None

    ensemble = initial
    ksd = ksd_vstat(target, spec, ensemble.positions, workers).value
    record.append(TrajectoryRow(0, 0.0, ksd, _kl_or_none(ensemble, target) if track_density else None,
                                positions=snapshot(ensemble, 0)))

    for step in range(1, max_iter + 1):
        epsilon = schedule.epsilon(target, spec, ensemble, ksd, workers)
        ensemble = svgd_step(target, spec, ensemble, epsilon, track_density, workers)
        ksd = None
        if step % record_every == 0 or step == max_iter:
            ksd = ksd_vstat(target, spec, ensemble.positions, workers).value
            kl = _kl_or_none(ensemble, target) if track_density else None
            record.append(TrajectoryRow(step, epsilon, ksd, kl, positions=snapshot(ensemble, step)))
            logger.debug("iteration %d: eps=%.6g ksd=%.6g kl=%s", step, epsilon, ksd, kl)

    record.final = ensemble
    logger.info("SVGD run finished: final ksd=%.6g", record.rows[-1].ksd)
    return record


def initial_ensemble_gaussian(mean, covariance, n: int, rng: np.random.Generator,
                              track_density: bool = False) -> ParticleEnsemble:
    """n i.i.d. draws from N(mean, covariance); tracked log q0 is the normalized Gaussian log density."""
    if n < 1:
        raise ContractViolation(f"Need at least one particle, got {n}")
    law = GaussianTarget(mean, covariance)
    positions = law.sample(rng, n)
    tracked = law.normalized_log_density(positions) if track_density else None
    return ParticleEnsemble(positions, tracked)


def initial_ensemble_grid(low, high, n: int) -> ParticleEnsemble:
    """
    Deterministic grid on the box [low, high]. In d > 1 dimensions ``n`` must be a perfect
    d-th power; the grid has round(n^(1/d)) points per axis.
    """
    low = np.atleast_1d(np.asarray(low, dtype=float))
    high = np.atleast_1d(np.asarray(high, dtype=float))
    if low.shape != high.shape or low.ndim != 1:
        raise ConfigurationError("Grid bounds must be vectors of equal length")
    if np.any(high < low):
        raise ConfigurationError("Grid upper bound below lower bound")
    if n < 1:
        raise ContractViolation(f"Need at least one particle, got {n}")
    d = low.shape[0]
    per_axis = int(round(n ** (1.0 / d)))
    if per_axis ** d != n:
        raise ConfigurationError(f"{n} particles do not form a {d}-dimensional grid")
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(low, high)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return ParticleEnsemble(np.stack([m.ravel() for m in mesh], axis=1))
