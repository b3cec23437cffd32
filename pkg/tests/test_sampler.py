import numpy as np
import pytest

from impsamp.numerics import Objective
from impsamp.sampler import (
    DegenerateEnsemble,
    WeightedEnsemble,
    draw_ensemble,
    ess,
    normalize,
    prepare,
    random_map_log_jacobian_gradient_form,
    resample_systematic,
    sample_quadratic_map,
    sample_random_map,
)
from oracles import gaussian_objective, numerical_map_jacobian_logdet


def himmelblau(x):
    return (x[0] ** 2 + x[1] - 11.0) ** 2 + (x[0] + x[1] ** 2 - 7.0) ** 2


class TestPrepare:
    def test_shifted_quadratic(self):
        a = np.array([2.0, -1.0, 0.5])
        obj = Objective(3, lambda x: 0.5 * float((x - a) @ (x - a)),
                        grad=lambda x: x - a, hess=lambda x: np.eye(3))
        mu, phi, L = prepare(obj, np.zeros(3))
        np.testing.assert_allclose(mu, a, atol=1e-10)
        assert phi == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(L, np.eye(3), atol=1e-12)

    def test_double_slit_post_wall_minimizer(self):
        # F(z) = (z-y)^2/2s + z^2/2gamma has argmin z = y*gamma/(s+gamma).
        y, s, gamma = 1.0, 1.0, 0.1
        obj = Objective(1, lambda z: (z[0] - y) ** 2 / (2 * s) + z[0] ** 2 / (2 * gamma))
        mu, phi, L = prepare(obj, np.array([0.0]))
        assert mu[0] == pytest.approx(y * gamma / (s + gamma), abs=1e-9)
        assert phi == pytest.approx(y ** 2 / (2 * (s + gamma)), abs=1e-9)

    def test_himmelblau_over_gamma_lands_in_a_basin(self):
        # From (-1,-4) Newton first settles on a saddle; prepare must escape
        # it and return a point that a local grid scan confirms is a minimum.
        gamma = 1e-2
        obj = Objective(2, lambda x: himmelblau(x) / gamma)
        mu, phi, L = prepare(obj, np.array([-1.0, -4.0]))
        span = np.linspace(-0.25, 0.25, 41)
        grid = np.array([[himmelblau(mu + np.array([dx, dy])) / gamma
                          for dx in span] for dy in span])
        assert phi <= grid.min() + 1e-6
        assert phi == pytest.approx(0.0, abs=1e-8)  # all Himmelblau minima are 0


class TestRandomMap:
    def test_quadratic_lambda_is_sqrt_rho(self):
        rng = np.random.default_rng(0)
        obj = gaussian_objective(np.zeros(3), np.eye(3))
        mu, phi, L = prepare(obj, np.zeros(3))
        for _ in range(10):
            xi = rng.standard_normal(3)
            s = sample_random_map(obj, mu, phi, L, xi)
            assert s.lam == pytest.approx(np.sqrt(xi @ xi), rel=1e-9)
            np.testing.assert_allclose(s.x, xi, atol=1e-8)

    def test_quadratic_jacobian_constant(self):
        rng = np.random.default_rng(1)
        B = np.array([[2.0, 0.3], [0.3, 0.5]])
        obj = gaussian_objective(np.array([1.0, -1.0]), B)
        mu, phi, L = prepare(obj, np.zeros(2))
        jacs = [sample_random_map(obj, mu, phi, L, rng.standard_normal(2)).log_jacobian
                for _ in range(20)]
        assert max(jacs) - min(jacs) < 1e-8

    def test_residual_invariant(self):
        rng = np.random.default_rng(2)
        obj = Objective(2, lambda x: 0.5 * float(x @ x) + 0.1 * x[0] ** 4,
                        grad=lambda x: x + np.array([0.4 * x[0] ** 3, 0.0]))
        mu, phi, L = prepare(obj, np.zeros(2))
        for _ in range(50):
            xi = rng.standard_normal(2)
            s = sample_random_map(obj, mu, phi, L, xi)
            resid = obj.evaluate(s.x) - phi - 0.5 * float(xi @ xi)
            assert abs(resid) < 1e-8 * (1.0 + abs(phi))

    def test_jacobian_forms_agree_and_match_fd_oracle(self):
        fn = lambda x: 0.5 * float(x @ x) + 0.1 * x[0] ** 4
        grad = lambda x: x + np.array([0.4 * x[0] ** 3, 0.0])
        with_grad = Objective(2, fn, grad=grad)
        without_grad = Objective(2, fn)
        mu, phi, L = prepare(with_grad, np.zeros(2))
        rng = np.random.default_rng(3)
        for _ in range(100):
            xi = rng.standard_normal(2)
            s_g = sample_random_map(with_grad, mu, phi, L, xi)
            s_fd = sample_random_map(without_grad, mu, phi, L, xi)
            grad_form = random_map_log_jacobian_gradient_form(with_grad, L, s_g)
            assert s_g.log_jacobian == pytest.approx(grad_form, abs=1e-6)
            assert s_fd.log_jacobian == pytest.approx(s_g.log_jacobian, abs=1e-6)
            oracle = numerical_map_jacobian_logdet(with_grad, mu, phi, L, xi)
            assert s_g.log_jacobian == pytest.approx(oracle, abs=1e-4)


class TestQuadraticMap:
    def test_hand_worked_quartic(self):
        # F = x^2/2 + x^4: mu = 0, H = 1, so xi = 1 maps to x = 1 and
        # log w = -phi + Fhat(1) - F(1) = 0 + 1/2 - 3/2 = -1.
        obj = Objective(1, lambda x: 0.5 * x[0] ** 2 + x[0] ** 4)
        mu, phi, L = prepare(obj, np.array([0.2]))
        s = sample_quadratic_map(obj, mu, phi, L, np.array([1.0]))
        assert s.x[0] == pytest.approx(1.0, abs=1e-8)
        assert s.log_weight == pytest.approx(-1.0, abs=1e-7)

    def test_quadratic_target_constant_weights(self):
        obj = gaussian_objective(np.array([3.0]), np.array([[0.25]]))
        mu, phi, L = prepare(obj, np.zeros(1))
        rng = np.random.default_rng(4)
        lw = [sample_quadratic_map(obj, mu, phi, L, rng.standard_normal(1)).log_weight
              for _ in range(30)]
        assert max(lw) - min(lw) < 1e-10

    def test_gaussian_weighted_mean(self):
        a = np.array([1.0, -2.0])
        B = np.diag([0.5, 2.0])
        obj = gaussian_objective(a, B)
        mu, phi, L = prepare(obj, np.zeros(2))
        ens = draw_ensemble(obj, mu, phi, L, 4000, np.random.default_rng(5),
                            method="quadratic_map")
        mean = sum(w * s.x for w, s in zip(ens.weights, ens.samples))
        tol = 3.0 * np.sqrt(np.trace(B) / len(ens))
        assert np.linalg.norm(mean - a) < tol


class TestNormalizeAndEss:
    def test_equal_weights(self):
        ens = WeightedEnsemble(samples=[None] * 4, log_weights=np.zeros(4))
        normalize(ens)
        np.testing.assert_allclose(ens.weights, 0.25)
        assert ess(ens) == pytest.approx(4.0)

    def test_zero_weight_member(self):
        ens = WeightedEnsemble(samples=[None] * 2,
                               log_weights=np.array([0.0, -np.inf]))
        normalize(ens)
        np.testing.assert_allclose(ens.weights, [1.0, 0.0])
        assert ess(ens) == pytest.approx(1.0)

    def test_quarter_three_quarter(self):
        ens = WeightedEnsemble(samples=[None] * 2,
                               log_weights=np.array([0.0, np.log(3.0)]))
        normalize(ens)
        np.testing.assert_allclose(ens.weights, [0.25, 0.75])
        assert ess(ens) == pytest.approx(1.6)

    def test_all_degenerate_raises(self):
        ens = WeightedEnsemble(samples=[None] * 3,
                               log_weights=np.full(3, -np.inf))
        with pytest.raises(DegenerateEnsemble):
            normalize(ens)


class TestResampleSystematic:
    def _ensemble(self, weights):
        w = np.asarray(weights, dtype=float)
        return WeightedEnsemble(samples=list(range(w.size)),
                                log_weights=np.log(np.maximum(w, 1e-300)),
                                weights=w)

    def test_uniform_weights_keep_every_sample_once(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            out = resample_systematic(self._ensemble(np.full(5, 0.2)), rng)
            assert sorted(out.samples) == [0, 1, 2, 3, 4]

    def test_point_mass(self):
        out = resample_systematic(self._ensemble([1.0, 0.0, 0.0, 0.0]),
                                  np.random.default_rng(7))
        assert out.samples == [0, 0, 0, 0]
        np.testing.assert_allclose(out.weights, 0.25)

    def test_expected_copy_counts(self):
        rng = np.random.default_rng(8)
        w = np.array([0.5, 0.3, 0.2])
        counts = np.zeros(3)
        trials = 100000
        for _ in range(trials):
            out = resample_systematic(self._ensemble(w), rng)
            for s in out.samples:
                counts[s] += 1
        counts /= trials
        np.testing.assert_allclose(counts, [1.5, 0.9, 0.6], rtol=0.01)

    def test_copy_counts_bracket_integer_floor_ceil(self):
        rng = np.random.default_rng(9)
        w = np.array([0.41, 0.33, 0.26])
        for _ in range(200):
            out = resample_systematic(self._ensemble(w), rng)
            for j in range(3):
                n_j = out.samples.count(j)
                assert np.floor(3 * w[j]) <= n_j <= np.ceil(3 * w[j])


class TestGaussianExactness:
    @pytest.mark.parametrize("m", [1, 2, 5])
    @pytest.mark.parametrize("method", ["random_map", "quadratic_map"])
    def test_weights_flat_and_mean_converges(self, m, method):
        rng = np.random.default_rng(100 + m)
        a = rng.uniform(-2, 2, size=m)
        A = rng.standard_normal((m, m))
        B = A @ A.T + 0.5 * np.eye(m)
        obj = gaussian_objective(a, B)
        mu, phi, L = prepare(obj, np.zeros(m))
        ens = draw_ensemble(obj, mu, phi, L, 2000, rng, method=method)
        cov_of_weights = np.std(ens.weights) / np.mean(ens.weights)
        assert cov_of_weights < 1e-10
        mean = sum(w * s.x for w, s in zip(ens.weights, ens.samples))
        lam_max = np.linalg.eigvalsh(B).max()
        assert np.linalg.norm(mean - a) < 3.0 * np.sqrt(lam_max * m / len(ens))

    def test_self_normalized_second_moment(self):
        obj = gaussian_objective(0.0, 1.0)
        mu, phi, L = prepare(obj, np.zeros(1))
        M = 10000
        ens = draw_ensemble(obj, mu, phi, L, M, np.random.default_rng(42),
                            method="random_map")
        est = sum(w * s.x[0] ** 2 for w, s in zip(ens.weights, ens.samples))
        assert abs(est - 1.0) < 3.0 / np.sqrt(M)
