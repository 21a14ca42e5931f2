"""
Executable checks of the inequalities and identities behind SVGD, run on Gaussian targets
where every constant is known in closed form.

Statistical checks compare against Monte Carlo standard errors; algebraic ones use
machine-precision tolerances. Each check owns a random stream derived from ``seed`` and
its own name, so results are deterministic and independent of which checks run.
"""
import logging
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, fields

import numpy as np

from .config import Integrator, KernelFamily
from .continuum import (OdeConfig, OuState, fisher_divergence_gaussian, integrate_vlasov, ou_closed_form,
                        path_integral_kl, vlasov_rhs)
from .discrepancy import bl_distance, kl_gaussian, ksd_vstat, rkhs_norm_phi_star, stein_kernel_diagonal
from .errors import ConfigurationError, ContractViolation
from .kernels import (KernelSpec, grad_x_matrix, kernel_diagonal, kernel_matrix, resolve_bandwidth,
                      trace_grad_xy_diagonal)
from .storage import write_report_json
from .svgd import (ParticleEnsemble, drift_and_divergence, initial_ensemble_gaussian, phi_star_batch,
                   phi_star_jacobian_batch, step_size_cap, svgd_step)
from .targets import GaussianTarget, TargetModel
from .utils import derive_rng

logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-9
LOGDET_SLACK = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    observed: float
    bound_or_target: float
    tolerance: float
    details: str = ""

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = bool(self.passed)
        for key in ("observed", "bound_or_target", "tolerance"):
            out[key] = float(out[key])
        return out


@dataclass(frozen=True)
class VerifyConfig:
    """
    Sizes, step sizes and tolerances of the harness. The canonical setting is 1D:
    target N(target_mean, target_var), initial law N(init_mean, init_var), RBF kernel.
    """
    seed: int = 0
    bandwidth: float = 1.0
    target_mean: float = 0.0
    target_var: float = 1.0
    init_mean: float = 2.0
    init_var: float = 1.0

    descent_particles: int = 2000
    descent_epsilon: float = 0.01
    descent_steps: int = 20
    descent_capped: bool = True
    descent_safety: float = 0.9

    rate_particles: int = 2000
    rate_dt: float = 0.01
    rate_times: tuple[float, ...] = (0.5, 1.0, 2.0)
    rate_tolerance: float = 0.15

    path_particles: int = 1000
    path_dt: float = 0.01
    path_t_end: float = 10.0
    path_record_every: int = 5
    path_tolerance: float = 0.15

    logdet_trials: int = 10_000
    logdet_max_dim: int = 8

    bl_pairs: int = 50
    bl_points: int = 8
    bl_shift: float = 1.0
    bl_epsilon: float = 0.05
    bl_inflation: float = 1.5
    bl_grid: int = 201

    fixed_point_particles: int = 10_000
    fixed_point_shift: float = 0.0

    norm_particles: int = 16
    norm_dimension: int = 2

    drift_particles: int = 200
    drift_dimension: int = 2

    weak_particles: int = 500
    weak_dt: float = 0.01
    weak_time: float = 0.5
    weak_tolerance: float = 1e-3

    langevin_init_mean: float = 2.0
    langevin_init_var: float = 4.0
    langevin_times: tuple[float, ...] = (0.1, 0.5, 1.0)
    langevin_delta: float = 1e-4
    langevin_tolerance: float = 1e-4

    def __post_init__(self):
        for name in ("rate_times", "langevin_times"):
            object.__setattr__(self, name, tuple(float(t) for t in getattr(self, name)))
        errors = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.endswith(("_particles", "_steps", "_trials", "_pairs", "_points", "_grid",
                                "_dimension", "_max_dim", "_record_every")) and value < 1:
                errors.append(f"verify.{f.name}: must be >= 1, got {value}")
        for name in ("bandwidth", "target_var", "init_var", "langevin_init_var", "rate_dt", "path_dt",
                     "path_t_end", "weak_dt", "langevin_delta", "bl_inflation"):
            if not getattr(self, name) > 0:
                errors.append(f"verify.{name}: must be positive, got {getattr(self, name)}")
        for name in ("descent_epsilon", "bl_epsilon"):
            if getattr(self, name) < 0:
                errors.append(f"verify.{name}: must be nonnegative, got {getattr(self, name)}")
        if not 0 < self.descent_safety <= 1:
            errors.append(f"verify.descent_safety: must lie in (0, 1], got {self.descent_safety}")
        if self.bl_grid < 2:
            errors.append(f"verify.bl_grid: must be >= 2, got {self.bl_grid}")
        if errors:
            raise ConfigurationError("; ".join(errors), errors)


def _target(cfg: VerifyConfig, dimension: int = 1) -> GaussianTarget:
    return GaussianTarget(np.full(dimension, cfg.target_mean), cfg.target_var * np.eye(dimension))


def _kernel(cfg: VerifyConfig) -> KernelSpec:
    return KernelSpec(KernelFamily.RBF, cfg.bandwidth)


def descent_constant(target: TargetModel, spec: KernelSpec, points) -> float:
    """R = max_x {1/2 Lip(score) k(x, x) + 2 tr grad_xx' k(x, x)}, the max taken over ``points``."""
    lipschitz = target.score_lipschitz
    if lipschitz is None:
        raise ContractViolation("Descent constant needs a target with a known score Lipschitz constant")
    spec = resolve_bandwidth(spec, points)
    values = 0.5 * lipschitz * kernel_diagonal(spec, points) + 2.0 * trace_grad_xy_diagonal(spec, points)
    return float(values.max())


def check_descent_inequality(cfg: VerifyConfig = VerifyConfig()) -> CheckResult:
    """
    Per-step tracked-KL change against -eps (1 - eps R) S^2 over ``descent_steps`` steps.
    A step passes when the change exceeds the bound by no more than three paired standard errors.
    """
    target, spec = _target(cfg), _kernel(cfg)
    rng = derive_rng(cfg.seed, "verify/descent_inequality")
    ensemble = initial_ensemble_gaussian([cfg.init_mean], [[cfg.init_var]], cfg.descent_particles, rng,
                                         track_density=True)
    big_r = descent_constant(target, spec, ensemble.positions)
    n = ensemble.n

    worst = None
    epsilons = []
    for _ in range(cfg.descent_steps):
        ksd = ksd_vstat(target, spec, ensemble.positions).value
        epsilon = cfg.descent_epsilon
        if cfg.descent_capped:
            epsilon = min(epsilon, cfg.descent_safety * step_size_cap(target, spec, ensemble))
        moved = svgd_step(target, spec, ensemble, epsilon, track_density=True)
        before = ensemble.tracked_log_q - target.log_density(ensemble.positions)
        after = moved.tracked_log_q - target.log_density(moved.positions)
        delta = after - before
        change = float(delta.mean())
        stderr = float(delta.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        bound = -epsilon * (1.0 - epsilon * big_r) * ksd * ksd
        margin = change - bound - 3.0 * stderr
        if worst is None or margin > worst[0]:
            worst = (margin, change, bound, 3.0 * stderr, moved.iteration)
        epsilons.append(epsilon)
        ensemble = moved

    margin, change, bound, tolerance, step = worst
    return CheckResult(
        "descent_inequality", margin <= 0.0, change, bound, tolerance,
        f"R={big_r:.6g}, steps={cfg.descent_steps}, eps in [{min(epsilons):.4g}, {max(epsilons):.4g}], "
        f"worst step {step}")


def check_rate_identity(cfg: VerifyConfig = VerifyConfig()) -> CheckResult:
    """d/dt tracked KL (central difference over one dt each side) against -S^2 along the RK4 flow."""
    target, spec = _target(cfg), _kernel(cfg)
    rng = derive_rng(cfg.seed, "verify/rate_identity")
    ensemble = initial_ensemble_gaussian([cfg.init_mean], [[cfg.init_var]], cfg.rate_particles, rng,
                                         track_density=True)
    dt = cfg.rate_dt
    current = 0
    ratios, passed, worst = [], True, None
    for t in sorted(cfg.rate_times):
        centre = int(round(t / dt))
        advance = centre - 1 - current
        if advance < 0:
            raise ContractViolation(f"Rate times must be at least 2*dt apart and >= dt, got {t}")
        if advance > 0:
            ensemble = integrate_vlasov(target, spec, ensemble, OdeConfig(Integrator.RK4, dt, advance * dt, advance),
                                        track=True).final
        window = integrate_vlasov(target, spec, ensemble, OdeConfig(Integrator.RK4, dt, 2 * dt, 1), track=True,
                                  snapshot_every=1)
        rows = window.rows
        rate = (rows[2].kl - rows[0].kl) / (2.0 * dt)
        expected = -rows[1].ksd ** 2

        mid = rows[1].positions
        drift, div = drift_and_divergence(target, spec, mid)
        contributions = (target.score(mid) * drift).sum(axis=-1) + div
        stderr = float(contributions.std(ddof=1) / np.sqrt(len(mid))) if len(mid) > 1 else 0.0

        ratio = rate / expected if expected != 0.0 else float("nan")
        ok = abs(ratio - 1.0) <= cfg.rate_tolerance or abs(rate - expected) <= 3.0 * stderr
        passed = passed and ok
        ratios.append(f"t={t:g}: ratio={ratio:.4f} (dKL/dt={rate:.6g}, -S^2={expected:.6g}, SE={stderr:.3g})")
        deviation = abs(ratio - 1.0) if np.isfinite(ratio) else float("inf")
        if worst is None or deviation > worst[0]:
            worst = (deviation, ratio)
        ensemble = window.final
        current = centre + 1

    ratio = worst[1] if worst else 1.0
    return CheckResult("rate_identity", passed, ratio, 1.0, cfg.rate_tolerance, "; ".join(ratios))


def check_path_integral_kl(cfg: VerifyConfig = VerifyConfig()) -> CheckResult:
    """The time integral of S^2 along the flow against the closed-form KL(mu_0 || p)."""
    target, spec = _target(cfg), _kernel(cfg)
    rng = derive_rng(cfg.seed, "verify/path_integral_kl")
    ensemble = initial_ensemble_gaussian([cfg.init_mean], [[cfg.init_var]], cfg.path_particles, rng)
    record = integrate_vlasov(target, spec, ensemble,
                              OdeConfig(Integrator.RK4, cfg.path_dt, cfg.path_t_end, cfg.path_record_every))
    estimate = path_integral_kl(record)
    expected = kl_gaussian([cfg.init_mean], [[cfg.init_var]], [cfg.target_mean], [[cfg.target_var]])
    tolerance = cfg.path_tolerance * max(expected, 1.0)
    return CheckResult(
        "path_integral_kl", abs(estimate.truncated - expected) <= tolerance, estimate.truncated, expected,
        tolerance, f"with tail {estimate.value:.6g} (tail {estimate.tail:.3g}), t_end={cfg.path_t_end:g}")


def logdet_bound_terms(b: np.ndarray, epsilon: float) -> tuple[float, float]:
    """(log|det(I + eps B)|, eps tr B - 2 eps^2 |B|_F^2)."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    _, logabsdet = np.linalg.slogdet(np.eye(b.shape[0]) + epsilon * b)
    return float(logabsdet), float(epsilon * np.trace(b) - 2.0 * epsilon ** 2 * (b * b).sum())


def check_logdet_bound(trials: int = 10_000, seed: int = 0, max_dim: int = 8) -> CheckResult:
    """log|det(I + eps B)| >= eps tr B - 2 eps^2 |B|_F^2 for random B and 0 < eps <= 1/(2 rho(B + B^T))."""
    if trials < 1:
        raise ContractViolation(f"trials must be >= 1, got {trials}")
    rng = derive_rng(seed, "verify/logdet_bound")
    violations, worst = 0, float("inf")
    for _ in range(trials):
        d = int(rng.integers(1, max_dim + 1))
        b = rng.standard_normal((d, d))
        rho = float(np.abs(np.linalg.eigvalsh(b + b.T)).max())
        fraction = 1.0 - rng.random()
        epsilon = fraction / (2.0 * rho) if rho > 0 else 0.0
        lhs, rhs = logdet_bound_terms(b, epsilon)
        margin = lhs - rhs
        worst = min(worst, margin)
        if margin < -LOGDET_SLACK:
            violations += 1
    return CheckResult("logdet_bound", violations == 0, worst, 0.0, LOGDET_SLACK,
                       f"{violations} violation(s) in {trials} trials, dims 1..{max_dim}")


def bl_norm_estimate(target: TargetModel, spec: KernelSpec, low: float, high: float, grid: int) -> float:
    """
    Grid estimate of the BL norm of g(x, y) = score(x) k(x, y) + grad_x k(x, y) on [low, high]^2:
    the larger of the sup norm and the largest joint difference quotient. 1D targets only.
    """
    if target.dimension != 1:
        raise ContractViolation("BL norm estimate is implemented for 1D targets")
    if grid < 2:
        raise ContractViolation(f"grid must be >= 2, got {grid}")
    xs = np.linspace(low, high, grid)[:, None]
    g = target.score(xs)[:, 0][:, None] * kernel_matrix(spec, xs, xs) + grad_x_matrix(spec, xs, xs)[..., 0]
    step = (high - low) / (grid - 1)
    along_x = np.diff(g, axis=0)[:, :-1] / step
    along_y = np.diff(g, axis=1)[:-1, :] / step
    lipschitz = float(np.sqrt(along_x ** 2 + along_y ** 2).max())
    return max(float(np.abs(g).max()), lipschitz)


def bl_contraction_terms(target: TargetModel, spec: KernelSpec, points_a, points_b, epsilon: float,
                         inflation: float = 1.5, grid: int = 201) -> tuple[float, float, float]:
    """
    (BL(Phi(mu), Phi(mu')), (1 + 2 eps |g|_BL) BL(mu, mu'), |g|_BL) for two uniform empirical
    measures, each pushed by the SVGD map built from itself.
    """
    a = ParticleEnsemble(points_a)
    b = ParticleEnsemble(points_b)
    moved_a = svgd_step(target, spec, a, epsilon).positions
    moved_b = svgd_step(target, spec, b, epsilon).positions
    before = bl_distance(a.positions, b.positions)
    after = bl_distance(moved_a, moved_b)

    support = np.vstack([a.positions, b.positions])
    moved = np.vstack([moved_a, moved_b])
    margin = 1.0
    while True:
        low, high = float(support.min()) - margin, float(support.max()) + margin
        if moved.min() >= low and moved.max() <= high:
            break
        logger.debug("Post-step support leaves [%g, %g]; enlarging box", low, high)
        margin *= 2.0
    norm = inflation * bl_norm_estimate(target, resolve_bandwidth(spec, support), low, high, grid)
    return after, (1.0 + 2.0 * epsilon * norm) * before, norm


def check_bl_contraction(cfg: VerifyConfig = VerifyConfig()) -> CheckResult:
    """BL distance after one SVGD map against (1 + 2 eps |g|_BL) times the distance before."""
    target, spec = _target(cfg), _kernel(cfg)
    rng = derive_rng(cfg.seed, "verify/bl_contraction")
    worst, failures = None, 0
    for _ in range(cfg.bl_pairs):
        points_a = rng.standard_normal((cfg.bl_points, 1))
        points_b = cfg.bl_shift + rng.standard_normal((cfg.bl_points, 1))
        after, bound, norm = bl_contraction_terms(target, spec, points_a, points_b, cfg.bl_epsilon,
                                                  cfg.bl_inflation, cfg.bl_grid)
        if after > bound + BOUND_SLACK:
            failures += 1
        if worst is None or after - bound > worst[0] - worst[1]:
            worst = (after, bound, norm)
    after, bound, norm = worst
    return CheckResult("bl_contraction", failures == 0, after, bound, BOUND_SLACK,
                       f"{failures} failure(s) over {cfg.bl_pairs} pairs of {cfg.bl_points}-point measures; "
                       f"|g|_BL estimate at worst pair {norm:.4g}")


def check_fixed_point(cfg: VerifyConfig = VerifyConfig()) -> CheckResult:
    """Mean |phi*(x_i)| over an exact sample against 3 sqrt(mean kappa_p(x, x)) / sqrt(n)."""
    target, spec = _target(cfg), _kernel(cfg)
    rng = derive_rng(cfg.seed, "verify/fixed_point")
    points = target.sample(rng, cfg.fixed_point_particles) + cfg.fixed_point_shift
    spec = resolve_bandwidth(spec, points)
    drift = phi_star_batch(target, spec, points, points)
    mean_norm = float(np.linalg.norm(drift, axis=1).mean())
    n = points.shape[0]
    threshold = 3.0 * float(np.sqrt(stein_kernel_diagonal(target, spec, points).mean())) / np.sqrt(n)
    return CheckResult("fixed_point", mean_norm < threshold, mean_norm, threshold, 0.0,
                       f"n={n}, shift={cfg.fixed_point_shift:g}")


def check_gradient_norm_identity(cfg: VerifyConfig = VerifyConfig()) -> CheckResult:
    """sqrt of the kappa_p double sum against the RKHS norm of phi* from the Gram quadratic form."""
    d = cfg.norm_dimension
    target, spec = _target(cfg, d), _kernel(cfg)
    rng = derive_rng(cfg.seed, "verify/gradient_norm_identity")
    points = rng.standard_normal((cfg.norm_particles, d))
    direct = ksd_vstat(target, spec, points).value
    gram = rkhs_norm_phi_star(target, spec, points)
    scale = max(abs(direct), abs(gram))
    relative = abs(direct - gram) / scale if scale > 0 else 0.0
    return CheckResult("gradient_norm_identity", relative < 1e-10, relative, 0.0, 1e-10,
                       f"double sum {direct!r}, Gram form {gram!r}")


def check_drift_bounds(cfg: VerifyConfig = VerifyConfig()) -> CheckResult:
    """|phi*(x)|^2 <= k(x, x) S^2 and |grad phi*(x)|_F^2 <= tr grad_xx' k(x, x) S^2 at particles and random points."""
    d = cfg.drift_dimension
    target, spec = _target(cfg, d), _kernel(cfg)
    rng = derive_rng(cfg.seed, "verify/drift_bounds")
    particles = cfg.init_mean + np.sqrt(cfg.init_var) * rng.standard_normal((cfg.drift_particles, d))
    probes = 3.0 * rng.standard_normal((cfg.drift_particles, d))
    queries = np.vstack([particles, probes])

    spec = resolve_bandwidth(spec, particles)
    squared = ksd_vstat(target, spec, particles).value ** 2
    drift = phi_star_batch(target, spec, particles, queries)
    jac = phi_star_jacobian_batch(target, spec, particles, queries)
    value_ratio = (drift * drift).sum(axis=-1) / (kernel_diagonal(spec, queries) * squared)
    jacobian_ratio = (jac * jac).sum(axis=(1, 2)) / (trace_grad_xy_diagonal(spec, queries) * squared)
    worst = float(max(value_ratio.max(), jacobian_ratio.max()))
    return CheckResult("drift_bounds", worst <= 1.0 + BOUND_SLACK, worst, 1.0, BOUND_SLACK,
                       f"max value ratio {value_ratio.max():.6g}, max Jacobian ratio {jacobian_ratio.max():.6g}")


def check_weak_solution(cfg: VerifyConfig = VerifyConfig()) -> CheckResult:
    """d/dt mean h(x_t) against mean grad h(x_t) . phi*(x_t) for h(x) = sum_a sin(x_a)."""
    target, spec = _target(cfg), _kernel(cfg)
    rng = derive_rng(cfg.seed, "verify/weak_solution")
    ensemble = initial_ensemble_gaussian([cfg.init_mean], [[cfg.init_var]], cfg.weak_particles, rng)
    dt = cfg.weak_dt
    centre = int(round(cfg.weak_time / dt))
    if centre < 1:
        raise ContractViolation(f"weak_time must be at least weak_dt, got {cfg.weak_time}")
    if centre > 1:
        ensemble = integrate_vlasov(target, spec, ensemble,
                                    OdeConfig(Integrator.RK4, dt, (centre - 1) * dt, centre - 1)).final
    rows = integrate_vlasov(target, spec, ensemble, OdeConfig(Integrator.RK4, dt, 2 * dt, 1), snapshot_every=1).rows
    observed = (np.sin(rows[2].positions).sum(axis=1).mean()
                - np.sin(rows[0].positions).sum(axis=1).mean()) / (2.0 * dt)
    mid = rows[1].positions
    expected = float((np.cos(mid) * vlasov_rhs(target, spec, mid)).sum(axis=1).mean())
    tolerance = cfg.weak_tolerance * max(abs(expected), 1e-6)
    return CheckResult("weak_solution", abs(observed - expected) <= tolerance, float(observed), expected, tolerance,
                       f"t={centre * dt:g}, dt={dt:g}, n={cfg.weak_particles}")


def check_langevin_rate_identity(cfg: VerifyConfig = VerifyConfig()) -> CheckResult:
    """Central difference of KL(q_t || p) along the closed-form OU law against -F(q_t, p)."""
    initial = OuState(cfg.langevin_init_mean, cfg.langevin_init_var)
    p_mean, p_var, delta = cfg.target_mean, cfg.target_var, cfg.langevin_delta

    def kl_at(t: float) -> float:
        state = ou_closed_form(initial, t, p_mean, p_var)
        return kl_gaussian(state.mean, state.variance, p_mean, p_var)

    worst, lines = None, []
    for t in cfg.langevin_times:
        rate = (kl_at(t + delta) - kl_at(t - delta)) / (2.0 * delta)
        state = ou_closed_form(initial, t, p_mean, p_var)
        expected = -fisher_divergence_gaussian(state.mean, state.variance, p_mean, p_var)
        relative = abs(rate - expected) / abs(expected) if expected != 0.0 else abs(rate)
        lines.append(f"t={t:g}: dKL/dt={rate:.8g}, -F={expected:.8g}")
        if worst is None or relative > worst[0]:
            worst = (relative, rate, expected)
    relative, rate, expected = worst
    return CheckResult("langevin_rate_identity", relative <= cfg.langevin_tolerance, rate, expected,
                       cfg.langevin_tolerance, "; ".join(lines))


CHECKS: dict[str, Callable[[VerifyConfig], CheckResult]] = {
    "descent_inequality": check_descent_inequality,
    "rate_identity": check_rate_identity,
    "path_integral_kl": check_path_integral_kl,
    "logdet_bound": lambda cfg: check_logdet_bound(cfg.logdet_trials, cfg.seed, cfg.logdet_max_dim),
    "bl_contraction": check_bl_contraction,
    "fixed_point": check_fixed_point,
    "gradient_norm_identity": check_gradient_norm_identity,
    "drift_bounds": check_drift_bounds,
    "weak_solution": check_weak_solution,
    "langevin_rate_identity": check_langevin_rate_identity,
}


def report_all(cfg: VerifyConfig | None = None, out_path: str | None = None,
               only: Iterable[str] | None = None) -> list[CheckResult]:
    """
    Runs the selected checks (all when ``only`` is None) and optionally writes them as a JSON
    array. A check that raises is recorded as failed; the others still run.
    """
    cfg = cfg or VerifyConfig()
    names = list(CHECKS) if only is None else list(only)
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise ConfigurationError(f"Unknown check(s): {', '.join(unknown)}; available: {', '.join(CHECKS)}")

    results = []
    for name in names:
        logger.info("Running check %s", name)
        try:
            result = CHECKS[name](cfg)
        except Exception as e:
            logger.warning("Check %s raised %s: %s", name, type(e).__name__, e)
            result = CheckResult(name, False, float("nan"), float("nan"), float("nan"),
                                 f"error: {type(e).__name__}: {e}")
        logger.info("Check %s: %s", name, "passed" if result.passed else "FAILED")
        results.append(result)

    if out_path:
        write_report_json(out_path, results)
    return results
