import numpy as np
import pytest
from numpy.testing import assert_allclose

from steinflow.config import KernelFamily, StepMode
from steinflow.discrepancy import ksd_vstat
from steinflow.errors import (ConfigurationError, ContractViolation, DivergedError, StepTooLargeError,
                              TrackingRequiredError)
from steinflow.kernels import KernelSpec
from steinflow.svgd import (ParticleEnsemble, StepSchedule, TrajectoryRecord, TrajectoryRow, analytic_step_cap,
                            drift_and_divergence, initial_ensemble_gaussian, initial_ensemble_grid, phi_star,
                            phi_star_batch, phi_star_divergence, phi_star_jacobian, phi_star_jacobian_batch, run,
                            step_size_cap, svgd_step)
from steinflow.targets import GaussianTarget, TargetModel


def test_single_particle_drift_is_the_score(std_normal, rbf):
    assert_allclose(phi_star(std_normal, rbf, [[2.0]], [2.0]), [-2.0])
    assert_allclose(phi_star(std_normal, rbf, [[0.0]], [0.0]), [0.0])


def test_symmetric_pair_has_antisymmetric_drift(std_normal, rbf):
    ensemble = ParticleEnsemble([[1.0], [-1.0]])
    assert_allclose(phi_star(std_normal, rbf, ensemble, [1.0]), -phi_star(std_normal, rbf, ensemble, [-1.0]),
                    rtol=1e-15)


def test_single_particle_jacobian(std_normal, rbf):
    assert_allclose(phi_star_jacobian(std_normal, rbf, [[2.0]], [2.0]), [[1.0]])


@pytest.mark.parametrize("spec", [KernelSpec(KernelFamily.RBF, 1.2), KernelSpec(KernelFamily.IMQ, 0.8),
                                  KernelSpec(KernelFamily.LINEAR)])
def test_jacobian_matches_finite_differences(spec, rng):
    target = GaussianTarget([0.5, -0.5], [[1.5, 0.4], [0.4, 0.7]])
    particles = rng.standard_normal((7, 2))
    step = 1e-5
    for query in rng.standard_normal((5, 2)):
        numeric = np.stack([
            (phi_star(target, spec, particles, query + step * e) - phi_star(target, spec, particles, query - step * e))
            / (2 * step) for e in np.eye(2)
        ], axis=1)
        assert_allclose(phi_star_jacobian(target, spec, particles, query), numeric, atol=1e-5)


def test_divergence_is_jacobian_trace(std_normal_2d, rng):
    spec = KernelSpec(KernelFamily.RBF, "median")
    particles = rng.standard_normal((30, 2))
    queries = rng.standard_normal((10, 2))
    jac = phi_star_jacobian_batch(std_normal_2d, spec, particles, queries)
    assert_allclose(phi_star_divergence(std_normal_2d, spec, particles, queries),
                    np.trace(jac, axis1=1, axis2=2), rtol=1e-12, atol=1e-12)
    drift, div = drift_and_divergence(std_normal_2d, spec, particles)
    assert_allclose(drift, phi_star_batch(std_normal_2d, spec, particles, particles), rtol=1e-15)
    assert div.shape == (30,)


def test_drift_is_equivariant_under_particle_permutation(std_normal_2d, rng):
    spec = KernelSpec(KernelFamily.RBF, "median")
    x = rng.standard_normal((300, 2))
    perm = rng.permutation(300)
    drift = phi_star_batch(std_normal_2d, spec, x, x)
    assert np.array_equal(phi_star_batch(std_normal_2d, spec, x[perm], x[perm]), drift[perm])


def test_step_size_cap_single_particle(std_normal, rbf):
    assert_allclose(step_size_cap(std_normal, rbf, [[2.0]]), 0.25)


def test_analytic_cap_scales_inversely_with_ksd(std_normal, rbf):
    ensemble = ParticleEnsemble([[0.0], [1.0]])
    assert analytic_step_cap(std_normal, rbf, ensemble, ksd=0.0) == float("inf")
    one = analytic_step_cap(std_normal, rbf, ensemble, ksd=1.0)
    assert_allclose(one, 0.5)
    assert_allclose(analytic_step_cap(std_normal, rbf, ensemble, ksd=2.0), one / 2)


def test_step_moves_by_gradient_ascent(std_normal, rbf):
    moved = svgd_step(std_normal, rbf, ParticleEnsemble([[2.0]]), 0.1)
    assert_allclose(moved.positions, [[1.8]])
    assert moved.iteration == 1


def test_zero_step_is_identity(std_normal, rbf, rng):
    ensemble = initial_ensemble_gaussian([1.0], [[1.0]], 10, rng, track_density=True)
    moved = svgd_step(std_normal, rbf, ensemble, 0.0, track_density=True)
    assert np.array_equal(moved.positions, ensemble.positions)
    assert np.array_equal(moved.tracked_log_q, ensemble.tracked_log_q)


def test_tracked_density_drops_by_log_det(std_normal, rbf):
    moved = svgd_step(std_normal, rbf, ParticleEnsemble([[2.0]], tracked_log_q=[0.0]), 0.1, track_density=True)
    assert_allclose(moved.tracked_log_q, [-np.log(1.1)], rtol=1e-14)


def test_tracking_in_two_dimensions_uses_slogdet(std_normal_2d, rng):
    spec = KernelSpec(KernelFamily.RBF, 1.0)
    ensemble = initial_ensemble_gaussian([1.0, 0.0], np.eye(2), 20, rng, track_density=True)
    moved = svgd_step(std_normal_2d, spec, ensemble, 0.05, track_density=True)
    jac = phi_star_jacobian_batch(std_normal_2d, spec, ensemble.positions, ensemble.positions)
    expected = ensemble.tracked_log_q - np.log(np.abs(np.linalg.det(np.eye(2) + 0.05 * jac)))
    assert_allclose(moved.tracked_log_q, expected, rtol=1e-12)


def test_step_rejects_negative_epsilon(std_normal, rbf):
    with pytest.raises(ContractViolation):
        svgd_step(std_normal, rbf, ParticleEnsemble([[0.0]]), -0.1)


def test_tracking_requires_tracked_ensemble(std_normal, rbf):
    with pytest.raises(TrackingRequiredError):
        svgd_step(std_normal, rbf, ParticleEnsemble([[0.0]]), 0.1, track_density=True)


def test_singular_jacobian_raises(rbf):
    target = GaussianTarget([0.0], [[0.2]])
    ensemble = ParticleEnsemble([[0.0], [2.0]], tracked_log_q=[0.0, 0.0])
    jac = phi_star_jacobian_batch(target, rbf, ensemble, ensemble.positions)
    assert jac[0, 0, 0] < 0
    with pytest.raises(StepTooLargeError) as info:
        svgd_step(target, rbf, ensemble, -1.0 / jac[0, 0, 0], track_density=True)
    assert info.value.particle_index == 0
    assert info.value.iteration == 1


def test_non_finite_positions_raise_diverged(rbf, caplog):
    target = TargetModel(1, log_density=lambda x: np.zeros(len(x)), score=lambda x: np.full_like(x, np.inf))
    with caplog.at_level("ERROR"), pytest.raises(DivergedError) as info:
        svgd_step(target, rbf, ParticleEnsemble([[0.0], [1.0]]), 0.1)
    assert info.value.particle_index == 0
    assert info.value.iteration == 1
    assert "Divergence at iteration 1" in caplog.text


def test_run_contracts_geometrically(std_normal, rbf):
    record = run(std_normal, rbf, ParticleEnsemble([[2.0]]), StepSchedule(StepMode.CONSTANT, 0.1), 100, 10)
    assert abs(record.final.positions[0, 0]) < 1e-4
    assert_allclose(record.final.positions[0, 0], 2.0 * 0.9 ** 100, rtol=1e-10)
    assert list(record.steps) == list(range(0, 101, 10))
    assert record.epsilons[0] == 0.0
    assert np.all(record.epsilons[1:] == 0.1)


def test_run_records_initial_and_final_only(std_normal, rbf):
    record = run(std_normal, rbf, ParticleEnsemble([[2.0]]), StepSchedule(), 7, 7)
    assert len(record) == 2
    assert list(record.steps) == [0, 7]
    assert not record.has_kl


def test_run_records_last_iteration_off_grid(std_normal, rbf):
    record = run(std_normal, rbf, ParticleEnsemble([[2.0]]), StepSchedule(), 7, 3)
    assert list(record.steps) == [0, 3, 6, 7]


def test_run_snapshots(std_normal, rbf, rng):
    ensemble = initial_ensemble_gaussian([1.0], [[1.0]], 5, rng)
    record = run(std_normal, rbf, ensemble, StepSchedule(), 6, 1, snapshot_every=3)
    assert [row.step for row in record.snapshots()] == [0, 3, 6]
    assert np.array_equal(record.snapshots()[-1].positions, record.final.positions)


def test_run_tracks_decreasing_kl(std_normal, rbf):
    ensemble = initial_ensemble_gaussian([2.0], [[1.0]], 200, np.random.default_rng(11), track_density=True)
    record = run(std_normal, rbf, ensemble, StepSchedule(StepMode.CONSTANT, 0.05), 30, 5)
    assert record.has_kl
    assert not record.kl_relative
    assert np.all(np.diff(record.kl) < 0)
    assert record.ksd[-1] < record.ksd[0]


def test_run_rejects_tracking_untracked(std_normal, rbf):
    with pytest.raises(TrackingRequiredError):
        run(std_normal, rbf, ParticleEnsemble([[0.0]]), StepSchedule(), 3, 1, track_density=True)


def test_run_is_independent_of_worker_count(std_normal, rng):
    spec = KernelSpec(KernelFamily.RBF, "median")
    ensemble = initial_ensemble_gaussian([3.0], [[1.0]], 600, rng, track_density=True)
    schedule = StepSchedule(StepMode.CAPPED, 0.5)
    one = run(std_normal, spec, ensemble, schedule, 3, 1, workers=1)
    many = run(std_normal, spec, ensemble, schedule, 3, 1, workers=8)
    assert np.array_equal(one.ksd, many.ksd)
    assert np.array_equal(one.kl, many.kl)
    assert np.array_equal(one.final.positions, many.final.positions)


def test_step_is_permutation_equivariant(std_normal, rng):
    spec = KernelSpec(KernelFamily.RBF, "median")
    ensemble = initial_ensemble_gaussian([1.0], [[2.0]], 50, rng, track_density=True)
    perm = rng.permutation(50)
    shuffled = ParticleEnsemble(ensemble.positions[perm], ensemble.tracked_log_q[perm])
    a = svgd_step(std_normal, spec, ensemble, 0.05, track_density=True)
    b = svgd_step(std_normal, spec, shuffled, 0.05, track_density=True)
    assert np.array_equal(a.positions[perm], b.positions)
    assert np.array_equal(a.tracked_log_q[perm], b.tracked_log_q)


def test_schedules(std_normal, rbf):
    ensemble = ParticleEnsemble([[2.0]])
    assert StepSchedule(StepMode.CONSTANT, 0.3).epsilon(std_normal, rbf, ensemble) == 0.3
    assert_allclose(StepSchedule(StepMode.CAPPED, 1.0, safety=0.9).epsilon(std_normal, rbf, ensemble), 0.225)
    assert StepSchedule(StepMode.CAPPED, 0.1).epsilon(std_normal, rbf, ensemble) == 0.1
    ksd = ksd_vstat(std_normal, rbf, ensemble.positions).value
    assert_allclose(StepSchedule(StepMode.KSD_PROPORTIONAL, 0.1, beta=2.0).epsilon(std_normal, rbf, ensemble),
                    0.1 * ksd ** 2)
    assert StepSchedule(StepMode.KSD_PROPORTIONAL, 0.1).epsilon(std_normal, rbf, ensemble, ksd=0.0) == 0.1


def test_conservative_schedule_takes_smaller_cap(std_normal, rbf):
    ensemble = ParticleEnsemble([[2.0]])
    spectral = step_size_cap(std_normal, rbf, ensemble)
    analytic = analytic_step_cap(std_normal, rbf, ensemble)
    eps = StepSchedule(StepMode.CAPPED, 10.0, safety=1.0, conservative=True).epsilon(std_normal, rbf, ensemble)
    assert eps == min(spectral, analytic)
    plain = StepSchedule(StepMode.CAPPED, 10.0, safety=1.0).epsilon(std_normal, rbf, ensemble)
    assert plain == min(10.0, spectral)


@pytest.mark.parametrize("kwargs", [{"mode": "adaptive"}, {"base": 0.0}, {"beta": -1.0}, {"safety": 1.5},
                                    {"safety": 0.0}])
def test_schedule_validation(kwargs):
    with pytest.raises(ConfigurationError):
        StepSchedule(**kwargs)


def test_ensemble_validation():
    assert ParticleEnsemble([1.0, 2.0, 3.0]).positions.shape == (3, 1)
    with pytest.raises(ContractViolation):
        ParticleEnsemble(np.zeros((0, 2)))
    with pytest.raises(ContractViolation):
        ParticleEnsemble([[0.0], [1.0]], tracked_log_q=[0.0])


def test_trajectory_rows_must_increase():
    record = TrajectoryRecord()
    record.append(TrajectoryRow(0, 0.0, 1.0))
    with pytest.raises(ContractViolation):
        record.append(TrajectoryRow(0, 0.1, 0.5))
    with pytest.raises(ContractViolation):
        record.append(TrajectoryRow(1, 0.1, -0.5))


def test_initial_gaussian_ensemble(rng):
    ensemble = initial_ensemble_gaussian([1.0, -1.0], [[1.0, 0.2], [0.2, 0.5]], 4000, rng, track_density=True)
    assert ensemble.positions.shape == (4000, 2)
    assert ensemble.tracking
    assert_allclose(ensemble.positions.mean(axis=0), [1.0, -1.0], atol=0.05)


def test_initial_grid():
    ensemble = initial_ensemble_grid([0.0, 0.0], [1.0, 2.0], 9)
    assert ensemble.positions.shape == (9, 2)
    assert_allclose(sorted(set(ensemble.positions[:, 1])), [0.0, 1.0, 2.0])
    assert not ensemble.tracking
    with pytest.raises(ConfigurationError):
        initial_ensemble_grid([0.0, 0.0], [1.0, 1.0], 8)
    assert_allclose(initial_ensemble_grid([-1.0], [1.0], 5).positions[:, 0], np.linspace(-1, 1, 5))


@pytest.mark.slow
def test_sampling_quality_from_far_initialization(std_normal, rbf):
    ensemble = initial_ensemble_gaussian([10.0], [[1.0]], 200, np.random.default_rng(3))
    record = run(std_normal, rbf, ensemble, StepSchedule(StepMode.CAPPED, 0.5), 500, 50)
    assert record.ksd[-1] < 0.1 * record.ksd[0]
    assert abs(record.final.positions.mean()) < 0.1
    assert record.ksd[-1] < 0.1
    assert abs(record.final.positions.var(ddof=1) - 1.0) < 0.15
