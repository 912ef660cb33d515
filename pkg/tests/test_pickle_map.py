import json

import numpy as np
import pytest
from scipy.optimize import minimize as scipy_minimize

from rpickle.diagnostics import linear_oracle
from rpickle.errors import ConfigError
from rpickle.gp_prior import CkleBasis
from rpickle.pickle_map import (
    CoefficientPair,
    LossParams,
    OptimConfig,
    ResidualModel,
    map_optimize,
    map_result_to_json,
    minimize_randomized,
    pickle_grad,
    pickle_loss,
    sweep_gammas,
)

import cases
import oracles


class _FrozenResidual:
    """Constant residual: derivatives vanish, only prior terms remain."""

    def __init__(self, r0, n_xi, n_eta):
        self.r0 = np.asarray(r0, dtype=float)
        self._n_xi = n_xi
        self._n_eta = n_eta

    @property
    def n_xi(self):
        return self._n_xi

    @property
    def n_eta(self):
        return self._n_eta

    @property
    def n_residual(self):
        return self.r0.size

    def residual(self, xi, eta):
        return self.r0.copy()

    def jacobians(self, xi, eta):
        return np.zeros((self.r0.size, self._n_xi)), np.zeros((self.r0.size, self._n_eta))

    def vjp(self, xi, eta, w):
        return np.zeros(self._n_xi), np.zeros(self._n_eta)

    def hessian_contract(self, xi, eta, w):
        n = self._n_xi + self._n_eta
        return np.zeros((n, n))


def random_point(model, rng, scale=0.5):
    return scale * rng.standard_normal(model.n_xi + model.n_eta)


class TestPickleLoss:
    def test_matches_independent_evaluation(self):
        model, params, _ = cases.make_flow_case()
        rng = np.random.default_rng(0)
        for _ in range(3):
            z = random_point(model, rng)
            got = pickle_loss(model, params, z)
            want = oracles.reference_loss(
                model.mesh, model.bc, model.y_basis, model.u_basis,
                params.sigma_r_sq, z[: model.n_xi], z[model.n_xi :],
            )
            assert got == pytest.approx(want, rel=1e-12)

    def test_zero_coefficients_is_half_residual_norm(self):
        model, params, _ = cases.make_flow_case()
        z = np.zeros(model.n_xi + model.n_eta)
        r0 = model.residual(z[: model.n_xi], z[model.n_xi :])
        assert pickle_loss(model, params, z) == 0.5 * float(r0 @ r0)

    def test_zero_when_residual_and_coefficients_vanish(self):
        # Identically zero residual at zero coefficients gives exactly zero.
        model = _FrozenResidual(np.zeros(6), n_xi=3, n_eta=2)
        assert pickle_loss(model, LossParams(sigma_r_sq=1e-2), np.zeros(5)) == 0.0
        # The small flow model's head mean solves the forward problem at the y
        # mean, so its loss at zero is residual roundoff squared.
        flow = cases.make_darcy_model()
        z = np.zeros(flow.n_xi + flow.n_eta)
        assert pickle_loss(flow, LossParams(sigma_r_sq=1e-2), z) <= 1e-20

    def test_frozen_residual_keeps_only_prior_terms(self):
        rng = np.random.default_rng(1)
        r0 = rng.standard_normal(6)
        model = _FrozenResidual(r0, n_xi=3, n_eta=2)
        params = LossParams(sigma_r_sq=0.25)
        z = rng.standard_normal(5)
        expected = 0.5 * float(r0 @ r0) + 0.125 * float(z @ z)
        assert pickle_loss(model, params, z) == pytest.approx(expected, rel=1e-14)

    def test_accepts_coefficient_pair(self):
        model = cases.make_darcy_model()
        params = LossParams(sigma_r_sq=1.0)
        rng = np.random.default_rng(2)
        z = random_point(model, rng)
        pair = CoefficientPair.from_stacked(z, model.n_xi)
        assert pickle_loss(model, params, pair) == pickle_loss(model, params, z)

    def test_rejects_wrong_length(self):
        model = cases.make_darcy_model()
        with pytest.raises(ConfigError):
            pickle_loss(model, LossParams(sigma_r_sq=1.0), np.zeros(3))

    def test_permuting_terms_and_coefficients_together(self):
        # With equal eigenvalues the basis stays valid under any column
        # permutation; permuting the coefficients the same way must leave the
        # loss unchanged and permute the xi-gradient accordingly.
        base = cases.make_darcy_model()
        rng = np.random.default_rng(3)
        q, _ = np.linalg.qr(rng.standard_normal((base.mesh.n_cells, 4)))
        vals = np.full(4, 0.7)
        basis = CkleBasis(mean=np.zeros(base.mesh.n_cells), eigenvalues=vals, eigenvectors=q)
        perm = np.array([2, 0, 3, 1])
        basis_p = CkleBasis(
            mean=np.zeros(base.mesh.n_cells), eigenvalues=vals, eigenvectors=q[:, perm]
        )
        model = ResidualModel(base.mesh, basis, base.u_basis, base.bc)
        model_p = ResidualModel(base.mesh, basis_p, base.u_basis, base.bc)
        params = LossParams(sigma_r_sq=0.1)
        xi = rng.standard_normal(4)
        eta = rng.standard_normal(base.n_eta)
        z = np.concatenate([xi, eta])
        z_p = np.concatenate([xi[perm], eta])
        assert pickle_loss(model_p, params, z_p) == pytest.approx(
            pickle_loss(model, params, z), rel=1e-12
        )
        g = pickle_grad(model, params, z)
        g_p = pickle_grad(model_p, params, z_p)
        np.testing.assert_allclose(g_p[:4], g[:4][perm], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(g_p[4:], g[4:], rtol=1e-10, atol=1e-12)


class TestPickleGrad:
    def test_matches_finite_differences_on_flow_case(self):
        model, params, _ = cases.make_flow_case()
        rng = np.random.default_rng(4)
        for _ in range(3):
            z = random_point(model, rng)
            g = pickle_grad(model, params, z)
            g_fd = oracles.fd_gradient(lambda v: pickle_loss(model, params, v), z)
            assert np.linalg.norm(g - g_fd) <= 1e-5 * np.linalg.norm(g_fd)

    def test_matches_finite_differences_small_model(self):
        model = cases.make_darcy_model()
        params = LossParams(sigma_r_sq=0.5, sigma_xi_sq=2.0, sigma_eta_sq=0.3)
        rng = np.random.default_rng(5)
        z = random_point(model, rng)
        g = pickle_grad(model, params, z)
        g_fd = oracles.fd_gradient(lambda v: pickle_loss(model, params, v), z)
        np.testing.assert_allclose(g, g_fd, rtol=1e-6, atol=1e-9)

    def test_frozen_zero_residual_gradient_is_gamma_z(self):
        model = _FrozenResidual(np.zeros(6), n_xi=3, n_eta=2)
        params = LossParams(sigma_r_sq=0.04)
        rng = np.random.default_rng(6)
        z = rng.standard_normal(5)
        np.testing.assert_allclose(
            pickle_grad(model, params, z), params.sigma_r_sq * z, rtol=0, atol=0
        )

    def test_jacobians_match_finite_differences(self):
        model = cases.make_darcy_model()
        rng = np.random.default_rng(7)
        xi = 0.4 * rng.standard_normal(model.n_xi)
        eta = 0.4 * rng.standard_normal(model.n_eta)
        j_xi, j_eta = model.jacobians(xi, eta)
        j_fd = oracles.fd_jacobian(
            lambda v: model.residual(v[: model.n_xi], v[model.n_xi :]),
            np.concatenate([xi, eta]),
        )
        np.testing.assert_allclose(j_xi, j_fd[:, : model.n_xi], rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(j_eta, j_fd[:, model.n_xi :], rtol=1e-6, atol=1e-9)

    def test_vjp_agrees_with_jacobians(self):
        model = cases.make_darcy_model()
        rng = np.random.default_rng(8)
        xi = rng.standard_normal(model.n_xi)
        eta = rng.standard_normal(model.n_eta)
        w = rng.standard_normal(model.n_residual)
        j_xi, j_eta = model.jacobians(xi, eta)
        g_xi, g_eta = model.vjp(xi, eta, w)
        np.testing.assert_allclose(g_xi, j_xi.T @ w, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(g_eta, j_eta.T @ w, rtol=1e-12, atol=1e-14)

    def test_hessian_contract_matches_finite_differences(self):
        model = cases.make_darcy_model()
        rng = np.random.default_rng(9)
        xi = 0.3 * rng.standard_normal(model.n_xi)
        eta = 0.3 * rng.standard_normal(model.n_eta)
        w = rng.standard_normal(model.n_residual)
        h = model.hessian_contract(xi, eta, w)
        np.testing.assert_allclose(h, h.T, rtol=0, atol=0)
        h_fd = oracles.fd_hessian(
            lambda v: float(w @ model.residual(v[: model.n_xi], v[model.n_xi :])),
            np.concatenate([xi, eta]),
        )
        np.testing.assert_allclose(h, h_fd, rtol=1e-4, atol=1e-6)
        # eta-eta block is exactly zero: the residual is linear in the head.
        assert np.all(h[model.n_xi :, model.n_xi :] == 0.0)


class TestMapOptimize:
    def test_linear_matches_posterior_mean(self):
        rng = np.random.default_rng(10)
        model = cases.make_random_linear(rng)
        params = LossParams(sigma_r_sq=0.5)
        mean, _ = linear_oracle(model, params)
        mean_ref, _ = oracles.linear_posterior(
            model.a_matrix, model.b_matrix, model.c_vector, params.sigma_r_sq
        )
        np.testing.assert_allclose(mean, mean_ref, rtol=1e-10, atol=1e-12)
        result = map_optimize(model, params)
        assert result.converged
        assert np.max(np.abs(result.coefficients.stacked - mean)) <= 1e-6

    def test_large_gamma_shrinks_to_zero(self):
        model, _, _ = cases.make_flow_case()
        gamma = 1e6
        params = LossParams(sigma_r_sq=gamma)
        zeros = np.zeros(model.n_xi + model.n_eta)
        r0 = model.residual(zeros[: model.n_xi], zeros[model.n_xi :])
        g_xi, g_eta = model.vjp(zeros[: model.n_xi], zeros[model.n_xi :], r0)
        bound = np.linalg.norm(np.concatenate([g_xi, g_eta])) / gamma
        result = map_optimize(model, params)
        z_norm = np.linalg.norm(result.coefficients.stacked)
        assert z_norm <= 1.1 * bound
        assert z_norm <= 1e-4

    def test_init_at_solution_returns_immediately(self):
        rng = np.random.default_rng(11)
        model = cases.make_random_linear(rng)
        params = LossParams(sigma_r_sq=0.2)
        first = map_optimize(model, params)
        second = map_optimize(model, params, init=first.coefficients)
        assert second.n_iter <= 1
        np.testing.assert_allclose(
            second.coefficients.stacked, first.coefficients.stacked, rtol=0, atol=1e-10
        )

    def test_unique_minimum_from_random_inits(self):
        rng = np.random.default_rng(12)
        model = cases.make_random_linear(rng)
        params = LossParams(sigma_r_sq=0.1)
        solutions = []
        for _ in range(10):
            init = CoefficientPair.from_stacked(
                3.0 * rng.standard_normal(model.n_xi + model.n_eta), model.n_xi
            )
            result = map_optimize(model, params, init=init)
            assert result.converged
            solutions.append(result.coefficients.stacked)
        for a in range(len(solutions)):
            for b in range(a + 1, len(solutions)):
                assert np.max(np.abs(solutions[a] - solutions[b])) < 1e-6

    def test_scaled_and_unscaled_share_argmin(self):
        # map_optimize works on the loss divided by gamma; an independent
        # minimizer of the unscaled loss must land at the same point.
        rng = np.random.default_rng(13)
        model = cases.make_random_linear(rng, n_res=20, n_xi=4, n_eta=3)
        params = LossParams(sigma_r_sq=0.5)
        result = map_optimize(model, params)
        res = scipy_minimize(
            lambda z: pickle_loss(model, params, z),
            np.zeros(model.n_xi + model.n_eta),
            jac=lambda z: pickle_grad(model, params, z),
            method="BFGS",
            options={"gtol": 1e-12, "maxiter": 500},
        )
        np.testing.assert_allclose(result.coefficients.stacked, res.x, rtol=0, atol=1e-6)

    def test_flow_case_map_is_stationary(self):
        model, params, _ = cases.make_flow_case()
        result = map_optimize(model, params)
        assert result.converged
        scaled_loss = result.loss / params.sigma_r_sq
        assert result.grad_norm <= max(1e-8, 1e-8 * (1.0 + scaled_loss))
        zeros = np.zeros(model.n_xi + model.n_eta)
        assert result.loss < pickle_loss(model, params, zeros)

    def test_sweep_gammas_shrinks_with_regularization(self):
        rng = np.random.default_rng(14)
        model = cases.make_random_linear(rng)
        grid = [1e-4, 1e-2, 1.0, 1e2]
        results = sweep_gammas(model, grid)
        assert [g for g, _ in results] == grid
        norms = [np.linalg.norm(r.coefficients.stacked) for _, r in results]
        assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))

    def test_json_output(self, tmp_path):
        rng = np.random.default_rng(15)
        model = cases.make_random_linear(rng, n_res=8, n_xi=2, n_eta=2)
        result = map_optimize(model, LossParams(sigma_r_sq=1.0))
        path = tmp_path / "map.json"
        map_result_to_json(result, path, meta={"case": "unit"})
        doc = json.loads(path.read_text())
        np.testing.assert_allclose(doc["xi"], result.coefficients.xi)
        np.testing.assert_allclose(doc["eta"], result.coefficients.eta)
        assert doc["converged"] is True
        assert doc["meta"] == {"case": "unit"}
        assert doc["n_iter"] == result.n_iter


class TestRandomizedObjective:
    def test_zero_noise_minimizer_matches_map(self):
        model, params, _ = cases.make_flow_case()
        rng = np.random.default_rng(16)
        res = minimize_randomized(
            model,
            params,
            omega=np.zeros(model.n_residual),
            alpha=np.zeros(model.n_xi),
            beta=np.zeros(model.n_eta),
            init=random_point(model, rng, scale=0.2),
        )
        result = map_optimize(model, params)
        assert res.converged
        np.testing.assert_allclose(res.z, result.coefficients.stacked, rtol=0, atol=1e-7)
        assert res.loss == pytest.approx(result.loss / params.sigma_r_sq, rel=1e-9)

    def test_linear_noise_shift_has_closed_form(self):
        rng = np.random.default_rng(17)
        model = cases.make_random_linear(rng, n_res=15, n_xi=3, n_eta=3)
        params = LossParams(sigma_r_sq=0.3)
        omega = rng.standard_normal(model.n_residual)
        alpha = rng.standard_normal(model.n_xi)
        beta = rng.standard_normal(model.n_eta)
        res = minimize_randomized(model, params, omega, alpha, beta)
        g = np.hstack([model.a_matrix, model.b_matrix])
        lhs = g.T @ g / params.sigma_r_sq + np.eye(6)
        rhs = g.T @ (model.c_vector + omega) / params.sigma_r_sq + np.concatenate([alpha, beta])
        np.testing.assert_allclose(res.z, np.linalg.solve(lhs, rhs), rtol=0, atol=1e-8)

    def test_rejects_mismatched_noise_shapes(self):
        model = cases.make_darcy_model()
        params = LossParams(sigma_r_sq=1.0)
        with pytest.raises(ConfigError):
            minimize_randomized(
                model, params,
                omega=np.zeros(model.n_residual + 1),
                alpha=np.zeros(model.n_xi),
                beta=np.zeros(model.n_eta),
            )


class TestValidation:
    def test_loss_params_must_be_positive(self):
        with pytest.raises(ConfigError):
            LossParams(sigma_r_sq=0.0)
        with pytest.raises(ConfigError):
            LossParams(sigma_r_sq=1.0, sigma_xi_sq=-1.0)

    def test_coefficient_pair_requires_finite(self):
        with pytest.raises(ConfigError):
            CoefficientPair(xi=np.array([np.nan]), eta=np.array([0.0]))

    def test_coefficient_pair_roundtrip(self):
        pair = CoefficientPair(xi=np.array([1.0, 2.0]), eta=np.array([3.0]))
        again = CoefficientPair.from_stacked(pair.stacked, 2)
        np.testing.assert_array_equal(again.xi, pair.xi)
        np.testing.assert_array_equal(again.eta, pair.eta)

    def test_residual_model_rejects_mismatched_basis(self):
        base = cases.make_darcy_model()
        small = cases.make_darcy_model(nx=4, ny=4)
        with pytest.raises(ConfigError):
            ResidualModel(base.mesh, small.y_basis, base.u_basis, base.bc)
