import numpy as np
import pytest

from impsamp.numerics import finite_diff_gradient, finite_diff_hessian
from impsamp.vehicle import (
    SteeringSingularity,
    VehicleParams,
    axle_speed,
    init_feature,
    mcl_objective_terms,
    measure,
    measurement_jacobian_feature,
    measurement_jacobian_pose,
    motion_input_jacobian,
    motion_rhs,
    motion_rhs_axle,
    process_noise_cov,
    propagate,
    wrap_angle,
)

PARAMS = VehicleParams()


class TestAxleSpeed:
    def test_straight_driving(self):
        assert axle_speed(1.0, 0.0, PARAMS) == pytest.approx(1.0)

    def test_quarter_turn(self):
        # L v_l / (L - tan(alpha) H) = 2.83 / (2.83 - 0.76)
        assert axle_speed(1.0, np.pi / 4, PARAMS) == pytest.approx(2.83 / 2.07, rel=1e-12)

    def test_singularity(self):
        alpha = np.arctan(PARAMS.L / PARAMS.H)
        with pytest.raises(SteeringSingularity):
            axle_speed(1.0, alpha, PARAMS)


class TestMotionModel:
    def test_straight_east(self):
        rhs = motion_rhs(np.array([0.0, 0.0, 0.0]), (1.0, 0.0), PARAMS)
        np.testing.assert_allclose(rhs, [1.0, 0.0, 0.0], atol=1e-12)

    def test_straight_north(self):
        rhs = motion_rhs(np.array([0.0, 0.0, np.pi / 2]), (1.0, 0.0), PARAMS)
        np.testing.assert_allclose(rhs, [0.0, 1.0, 0.0], atol=1e-12)

    def test_generic_against_laser_offset_oracle(self):
        # Independent oracle: integrate the axle state (x_c, y_c, beta)
        # exactly (RK4 at tiny steps), reconstruct the laser position from
        # its rigid offset, and differentiate numerically.
        beta, alpha, v_l = 0.3, 0.1, 2.0
        v_c = axle_speed(v_l, alpha, PARAMS)

        def axle_rhs(s):
            return np.array([v_c * np.cos(s[2]), v_c * np.sin(s[2]),
                             v_c * np.tan(alpha) / PARAMS.L])

        def laser_of(s):
            return np.array([
                s[0] + PARAMS.a * np.cos(s[2]) - PARAMS.b * np.sin(s[2]),
                s[1] + PARAMS.a * np.sin(s[2]) + PARAMS.b * np.cos(s[2]),
                s[2]])

        s0 = np.array([0.0, 0.0, beta])
        h = 1e-6
        k1 = axle_rhs(s0)
        k2 = axle_rhs(s0 + 0.5 * h * k1)
        k3 = axle_rhs(s0 + 0.5 * h * k2)
        k4 = axle_rhs(s0 + h * k3)
        s1 = s0 + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        oracle = (laser_of(s1) - laser_of(s0)) / h

        pose0 = laser_of(s0)
        rhs = motion_rhs(pose0, (v_l, alpha), PARAMS)
        np.testing.assert_allclose(rhs, oracle, rtol=1e-5, atol=1e-8)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(0)
        poses = rng.uniform(-3, 3, size=(7, 3))
        u = (1.4, 0.2)
        batched = motion_rhs(poses, u, PARAMS)
        for j in range(7):
            np.testing.assert_allclose(batched[j], motion_rhs(poses[j], u, PARAMS))


class TestProcessNoise:
    def test_no_control_noise_reduces_to_model_noise(self):
        params = VehicleParams(p_diag=(0.0, 0.0))
        cov = process_noise_cov(np.array([1.0, 2.0, 0.3]), (1.0, 0.1), params)
        np.testing.assert_allclose(cov, params.delta * params.QQt, atol=1e-10)

    def test_input_jacobian_against_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pose = rng.uniform(-3, 3, 3)
            v_c = rng.uniform(0.2, 3.0)
            alpha = rng.uniform(-0.4, 0.4)
            J = motion_input_jacobian(pose, v_c, alpha, PARAMS)
            for k, (dv, da) in enumerate(((1e-6, 0.0), (0.0, 1e-7))):
                hi = motion_rhs_axle(pose, v_c + dv, alpha + da, PARAMS)
                lo = motion_rhs_axle(pose, v_c - dv, alpha - da, PARAMS)
                fd = (hi - lo) / (2 * (dv + da))
                np.testing.assert_allclose(J[:, k], fd, rtol=1e-6, atol=1e-9)

    def test_always_spd(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pose = rng.uniform(-5, 5, 3)
            u = (rng.uniform(0.1, 3.0), rng.uniform(-0.5, 0.5))
            cov = process_noise_cov(pose, u, PARAMS)
            assert np.linalg.eigvalsh(cov).min() > 0.0

    def test_empirical_one_step_covariance(self):
        pose = np.array([0.0, 0.0, 0.4])
        u = (2.0, 0.15)
        rng = np.random.default_rng(3)
        poses = np.broadcast_to(pose, (100000, 3)).copy()
        out = propagate(poses, u, PARAMS, rng=rng)
        mean = pose + motion_rhs(pose, u, PARAMS) * PARAMS.delta
        dev = out - mean
        emp = dev.T @ dev / len(dev)
        cov = process_noise_cov(pose, u, PARAMS)
        np.testing.assert_allclose(emp, cov, rtol=0.02, atol=2e-2 * np.abs(cov).max())


class TestPropagate:
    def test_deterministic_straight_step(self):
        out = propagate(np.zeros(3), (1.0, 0.0), PARAMS, noise=np.zeros(3))
        np.testing.assert_allclose(out, [PARAMS.delta, 0.0, 0.0], atol=1e-12)

    def test_seeded_reproducibility(self):
        p1 = propagate(np.zeros(3), (1.0, 0.1), PARAMS, rng=np.random.default_rng(4))
        p2 = propagate(np.zeros(3), (1.0, 0.1), PARAMS, rng=np.random.default_rng(4))
        np.testing.assert_array_equal(p1, p2)


class TestMeasure:
    def test_hand_example(self):
        z = measure(np.array([0.0, 0.0, np.pi / 2]), np.array([0.0, 5.0]), PARAMS)
        assert z[0] == pytest.approx(5.0)
        assert z[1] == pytest.approx(np.pi / 2)

    def test_coincident_landmark_raises(self):
        with pytest.raises(ValueError):
            measure(np.array([1.0, 1.0, 0.0]), np.array([1.0, 1.0]), PARAMS)

    def test_bearing_always_wrapped(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            pose = rng.uniform(-10, 10, 3)
            pose[2] = rng.uniform(-4 * np.pi, 4 * np.pi)
            lm = rng.uniform(-10, 10, 2)
            if np.hypot(*(lm - pose[:2])) < 1e-3:
                continue
            z = measure(pose, lm, PARAMS)
            assert -np.pi < z[1] <= np.pi

    def test_heading_wrap_invariance(self):
        pose = np.array([1.0, -2.0, 0.7])
        wrapped = pose.copy()
        wrapped[2] = wrap_angle(pose[2] + 2 * np.pi)
        lm = np.array([4.0, 1.0])
        np.testing.assert_allclose(measure(pose, lm, PARAMS),
                                   measure(wrapped, lm, PARAMS), atol=1e-12)

    def test_translation_gauge(self):
        pose = np.array([1.0, 2.0, 0.5])
        lm = np.array([5.0, -1.0])
        shift = np.array([10.0, -3.0])
        shifted_pose = pose + np.array([*shift, 0.0])
        np.testing.assert_allclose(measure(pose, lm, PARAMS),
                                   measure(shifted_pose, lm + shift, PARAMS),
                                   atol=1e-12)


class TestObjectiveDerivatives:
    def _random_instance(self, rng, n_landmarks=2):
        pose = rng.uniform(-2, 2, 3)
        f_pred = pose + rng.normal(0, 0.1, 3)
        A = rng.normal(0, 0.05, (3, 3))
        Sigma1 = A @ A.T + np.diag([0.02, 0.02, 0.005])
        measurements = []
        for _ in range(n_landmarks):
            lm = pose[:2] + rng.uniform(2, 8, 2) * rng.choice([-1, 1], 2)
            z = measure(pose, lm, PARAMS) + rng.normal(0, 0.05, 2)
            measurements.append((lm, z))
        return pose, f_pred, np.linalg.inv(Sigma1), measurements

    def test_gradient_and_hessian_match_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            pose, f_pred, S1inv, meas = self._random_instance(rng)
            val, grad, hess = mcl_objective_terms(pose, f_pred, S1inv, meas, PARAMS)

            def F(x):
                v, _, _ = mcl_objective_terms(x, f_pred, S1inv, meas, PARAMS)
                return float(v)

            fd_g = finite_diff_gradient(F, pose, 1e-6)
            fd_h = finite_diff_hessian(F, pose, 1e-4)
            scale_g = 1.0 + np.abs(fd_g).max()
            scale_h = 1.0 + np.abs(fd_h).max()
            assert np.abs(grad - fd_g).max() / scale_g < 1e-5
            assert np.abs(hess - fd_h).max() / scale_h < 1e-3

    def test_no_measurements_hessian_is_prior_precision(self):
        S1inv = np.diag([3.0, 4.0, 5.0])
        _, _, hess = mcl_objective_terms(np.zeros(3), np.zeros(3), S1inv, [], PARAMS)
        np.testing.assert_allclose(hess, S1inv)

    def test_stationary_at_noiseless_minimum(self):
        pose = np.array([0.5, -0.3, 0.2])
        z = measure(pose, np.array([4.0, 2.0]), PARAMS)
        _, grad, _ = mcl_objective_terms(pose, pose, np.eye(3),
                                         [(np.array([4.0, 2.0]), z)], PARAMS)
        np.testing.assert_allclose(grad, 0.0, atol=1e-9)


class TestFeatureInit:
    def test_inverts_hand_example(self):
        mean, cov = init_feature(np.array([0.0, 0.0, np.pi / 2]),
                                 np.array([5.0, np.pi / 2]), PARAMS)
        np.testing.assert_allclose(mean, [0.0, 5.0], atol=1e-12)

    def test_measure_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            pose = rng.uniform(-3, 3, 3)
            z = np.array([rng.uniform(1, 12), rng.uniform(-np.pi, np.pi)])
            mean, cov = init_feature(pose, z, PARAMS)
            back = measure(pose, mean, PARAMS)
            np.testing.assert_allclose(back, z, atol=1e-9)
            assert np.linalg.eigvalsh(cov).min() > 0.0

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            pose = rng.uniform(-3, 3, 3)
            lm = pose[:2] + rng.uniform(1, 8, 2)
            Jp = measurement_jacobian_pose(pose, lm)
            Jf = measurement_jacobian_feature(pose, lm)
            for k in range(3):
                e = np.zeros(3)
                e[k] = 1e-6
                fd = (measure(pose + e, lm, PARAMS) - measure(pose - e, lm, PARAMS)) / 2e-6
                np.testing.assert_allclose(Jp[:, k], fd, rtol=1e-5, atol=1e-7)
            for k in range(2):
                e = np.zeros(2)
                e[k] = 1e-6
                fd = (measure(pose, lm + e, PARAMS) - measure(pose, lm - e, PARAMS)) / 2e-6
                np.testing.assert_allclose(Jf[:, k], fd, rtol=1e-5, atol=1e-7)
