"""
Continuous-time dynamics: the n-particle SVGD ODE (with the log-density carried along),
the path-integral KL estimate, and the Langevin / Ornstein-Uhlenbeck baseline.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .config import Integrator, NoiseConvention
from .discrepancy import kl_gaussian, kl_tracked_stats, ksd_vstat
from .errors import ConfigurationError, ContractViolation, TrackingRequiredError
from .kernels import KernelSpec
from .svgd import (ParticleEnsemble, TrajectoryRecord, TrajectoryRow, drift_and_divergence, phi_star_batch,
                   raise_diverged)
from .targets import GaussianTarget, TargetModel
from .utils import derive_rng

logger = logging.getLogger(__name__)

NOISE_CHUNK = 256


@dataclass(frozen=True)
class OdeConfig:
    integrator: Integrator = Integrator.RK4
    dt: float = 0.01
    t_end: float = 1.0
    record_every: int = 1

    def __post_init__(self):
        try:
            object.__setattr__(self, "integrator", Integrator(self.integrator))
        except ValueError:
            raise ConfigurationError(f"Unknown integrator {self.integrator!r}")
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= 0:
            raise ConfigurationError(f"t_end must be nonnegative, got {self.t_end}")
        if self.t_end > 0 and self.dt > self.t_end:
            raise ConfigurationError(f"dt={self.dt} exceeds t_end={self.t_end}")
        if self.record_every < 1:
            raise ConfigurationError(f"record_every must be >= 1, got {self.record_every}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


def vlasov_rhs(target: TargetModel, spec: KernelSpec, positions, workers: int | None = None) -> np.ndarray:
    """Row i is phi* at x_i against the whole ensemble, the same drift svgd_step applies."""
    return phi_star_batch(target, spec, positions, positions, workers)


def _as_ensemble(initial) -> ParticleEnsemble:
    return initial if isinstance(initial, ParticleEnsemble) else ParticleEnsemble(initial)


def integrate_vlasov(target: TargetModel, spec: KernelSpec, initial, cfg: OdeConfig, track: bool = False,
                     workers: int | None = None, snapshot_every: int = 0) -> TrajectoryRecord:
    """
    Integrates dx_i/dt = phi*(x_i). With ``track`` the log-density follows
    d log q(x_i)/dt = -div phi*(x_i) through the same stages. Rows are recorded on the
    step grid every ``cfg.record_every`` steps and at the end.
    """
    ensemble = _as_ensemble(initial)
    if track and not ensemble.tracking:
        raise TrackingRequiredError("Density tracking requested on an untracked ensemble")

    def rhs(x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        if not track:
            return vlasov_rhs(target, spec, x, workers), None
        drift, div = drift_and_divergence(target, spec, x, workers)
        return drift, -div

    def advance(x: np.ndarray, logq: np.ndarray | None, dt: float):
        if cfg.integrator == Integrator.EULER:
            f, g = rhs(x)
            return x + dt * f, None if logq is None else logq + dt * g
        k1, l1 = rhs(x)
        k2, l2 = rhs(x + 0.5 * dt * k1)
        k3, l3 = rhs(x + 0.5 * dt * k2)
        k4, l4 = rhs(x + dt * k3)
        x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if logq is None:
            return x_next, None
        return x_next, logq + dt / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4)

    n_steps = cfg.n_steps
    logger.info("Vlasov flow: n=%d d=%d integrator=%s dt=%g steps=%d tracking=%s",
                ensemble.n, ensemble.dimension, cfg.integrator.value, cfg.dt, n_steps, track)
    record = TrajectoryRecord(time_based=True, kl_relative=target.log_normalizer is None)

    def add_row(ens: ParticleEnsemble, step: int, dt_used: float):
        ksd = ksd_vstat(target, spec, ens.positions, workers).value
        kl = kl_tracked_stats(ens, target).value if track else None
        positions = ens.positions.copy() if snapshot_every > 0 and step % snapshot_every == 0 else None
        record.append(TrajectoryRow(step, dt_used, ksd, kl, time=step * cfg.dt, positions=positions))

    add_row(ensemble, 0, 0.0)
    x = ensemble.positions
    logq = ensemble.tracked_log_q if track else None
    for step in range(1, n_steps + 1):
        x_next, logq = advance(x, logq, cfg.dt)
        if not np.isfinite(x_next).all():
            raise_diverged(x_next, x, time=step * cfg.dt)
        x = x_next
        if step % cfg.record_every == 0 or step == n_steps:
            add_row(ParticleEnsemble(x, logq, step), step, cfg.dt)
            logger.debug("t=%.6g ksd=%.6g", step * cfg.dt, record.rows[-1].ksd)

    record.final = ParticleEnsemble(x, logq, ensemble.iteration + n_steps) if n_steps else ensemble
    return record


@dataclass(frozen=True)
class PathIntegralKl:
    """``value`` = ``truncated`` (trapezoid over the recorded grid) + ``tail`` (exponential extrapolation)."""
    value: float
    truncated: float
    tail: float


def path_integral_kl(trajectory: TrajectoryRecord) -> PathIntegralKl:
    """KL(mu_0 || p) estimated as the integral over time of S(mu_t || p)^2."""
    if not trajectory.time_based:
        raise ContractViolation("Path integral needs a trajectory with a time column")
    if len(trajectory) < 2:
        raise ContractViolation(f"Path integral needs at least 2 time points, got {len(trajectory)}")
    times = trajectory.times
    squared = trajectory.ksd ** 2
    truncated = float(trapezoid(squared, times))

    tail = 0.0
    last, previous = squared[-1], squared[-2]
    if last > 0.0:
        gap = times[-1] - times[-2]
        rate = np.log(previous / last) / gap if previous > 0.0 else 0.0
        horizon = times[-1] - times[0]
        # an exponential slower than the recorded window is not extrapolated
        if rate * horizon > 1.0:
            tail = float(last / rate)
        else:
            logger.warning("KSD^2 has not decayed exponentially by t=%.6g (rate %.3g); tail omitted",
                           times[-1], rate)
    return PathIntegralKl(truncated + tail, truncated, tail)


@dataclass(frozen=True)
class LangevinConfig:
    epsilon: float = 0.01
    n_steps: int = 1000
    noise_convention: NoiseConvention = NoiseConvention.SDE
    record_every: int = 10

    def __post_init__(self):
        try:
            object.__setattr__(self, "noise_convention", NoiseConvention(self.noise_convention))
        except ValueError:
            raise ConfigurationError(f"Unknown noise convention {self.noise_convention!r}")
        if not self.epsilon > 0:
            raise ConfigurationError(f"Langevin epsilon must be positive, got {self.epsilon}")
        if self.n_steps < 1:
            raise ConfigurationError(f"Langevin n_steps must be >= 1, got {self.n_steps}")
        if self.record_every < 1:
            raise ConfigurationError(f"record_every must be >= 1, got {self.record_every}")


def noise_scale(epsilon: float, convention: NoiseConvention = NoiseConvention.SDE) -> float:
    """sqrt(2 eps) for the SDE discretization, 2 sqrt(eps) under the literal convention."""
    if NoiseConvention(convention) == NoiseConvention.TWO_SQRT_EPS:
        return 2.0 * np.sqrt(epsilon)
    return np.sqrt(2.0 * epsilon)


def _langevin_update(target: TargetModel, x: np.ndarray, epsilon: float, xi: np.ndarray,
                     convention: NoiseConvention) -> np.ndarray:
    return x + epsilon * target.score(x) + noise_scale(epsilon, convention) * xi


def langevin_step(target: TargetModel, x, epsilon: float, rng: np.random.Generator,
                  convention: NoiseConvention = NoiseConvention.SDE) -> np.ndarray:
    """x + eps score(x) + sqrt(2 eps) xi for one point (d,) or a batch of chains (n, d)."""
    if epsilon < 0:
        raise ContractViolation(f"Langevin step must be nonnegative, got {epsilon}")
    x = np.asarray(x, dtype=float)
    xi = rng.standard_normal(x.shape)
    return _langevin_update(target, x, epsilon, xi, convention)


def _moment_kl(target: TargetModel, x: np.ndarray) -> float | None:
    n, d = x.shape
    if not isinstance(target, GaussianTarget) or n <= d:
        return None
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    try:
        return kl_gaussian(x.mean(axis=0), cov, target.mean, target.covariance)
    except ContractViolation:
        return None


def run_langevin(target: TargetModel, initial, cfg: LangevinConfig, seed: int,
                 spec: KernelSpec | None = None, workers: int | None = None,
                 snapshot_every: int = 0) -> TrajectoryRecord:
    """
    Independent unadjusted Langevin chains, one per initial row, each with its own noise
    stream derived from ``seed``. Rows carry the KSD of the chain ensemble when ``spec`` is
    given and, for Gaussian targets, the KL of the moment-matched Gaussian.
    """
    x = _as_ensemble(initial).positions.copy()
    n_chains, d = x.shape
    streams = [derive_rng(seed, f"langevin/chain/{i}") for i in range(n_chains)]
    logger.info("Langevin: chains=%d d=%d eps=%g steps=%d noise=%s", n_chains, d, cfg.epsilon,
                cfg.n_steps, cfg.noise_convention.value)
    record = TrajectoryRecord(time_based=True, kl_relative=False)

    def add_row(step: int, eps_used: float):
        ksd = ksd_vstat(target, spec, x, workers).value if spec is not None else 0.0
        positions = x.copy() if snapshot_every > 0 and step % snapshot_every == 0 else None
        record.append(TrajectoryRow(step, eps_used, ksd, _moment_kl(target, x), time=step * cfg.epsilon,
                                    positions=positions))

    add_row(0, 0.0)
    noise = None
    for step in range(1, cfg.n_steps + 1):
        offset = (step - 1) % NOISE_CHUNK
        if offset == 0:
            chunk = min(NOISE_CHUNK, cfg.n_steps - step + 1)
            noise = np.stack([rng.standard_normal((chunk, d)) for rng in streams], axis=1)
        x_next = _langevin_update(target, x, cfg.epsilon, noise[offset], cfg.noise_convention)
        if not np.isfinite(x_next).all():
            raise_diverged(x_next, x, time=step * cfg.epsilon)
        x = x_next
        if step % cfg.record_every == 0 or step == cfg.n_steps:
            add_row(step, cfg.epsilon)

    record.final = ParticleEnsemble(x, None, cfg.n_steps)
    return record


@dataclass(frozen=True)
class OuState:
    mean: float
    variance: float
    time: float = 0.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ContractViolation(f"OU variance must be positive, got {self.variance}")
        if self.time < 0:
            raise ContractViolation(f"OU time must be nonnegative, got {self.time}")


def ou_closed_form(initial: OuState, t: float, p_mean: float = 0.0, p_var: float = 1.0) -> OuState:
    """
    Law at time t of the Langevin diffusion toward N(p_mean, p_var) started from a Gaussian:
    the mean relaxes at rate 1/p_var, the variance at rate 2/p_var.
    """
    if t < 0:
        raise ContractViolation(f"Time must be nonnegative, got {t}")
    if not p_var > 0:
        raise ContractViolation(f"Target variance must be positive, got {p_var}")
    decay = np.exp(-t / p_var)
    mean = p_mean + (initial.mean - p_mean) * decay
    variance = p_var + (initial.variance - p_var) * decay * decay
    return OuState(float(mean), float(variance), initial.time + t)


def fisher_divergence_gaussian(q_mean: float, q_var: float, p_mean: float, p_var: float) -> float:
    """E_q |d/dx log(q/p)|^2 for 1D Gaussians q and p."""
    if not q_var > 0 or not p_var > 0:
        raise ContractViolation(f"Variances must be positive, got {q_var} and {p_var}")
    # d/dx log(q/p) = a x + b
    a = 1.0 / p_var - 1.0 / q_var
    b = q_mean / q_var - p_mean / p_var
    return float(a * a * q_var + (a * q_mean + b) ** 2)
