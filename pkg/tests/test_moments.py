import math

import numpy as np
import pytest

from gmmtvc.forms import BilinearSpline, Linear, TvcDecomposition
from gmmtvc.moments import (
    ClassParameters,
    conditional_growth_moments,
    implied_moments,
    latent_design,
)

SLOPES = TvcDecomposition.INTERVAL_SLOPES
CHANGES = TvcDecomposition.INTERVAL_CHANGES


def two_wave_params(**overrides):
    base = dict(
        form=Linear(),
        alpha_y=[3.0, 4.0],
        psi_eta_y=[[1.0, 0.3], [0.3, 2.0]],
        theta_y=0.8,
        mu_eta_x=[1.0, 2.0],
        phi_eta_x=[[1.0, 0.2], [0.2, 1.5]],
        rates=[1.0],
        beta_tvc=[0.7, 0.1],
        kappa=0.4,
        theta_x=0.6,
        theta_xy=0.2,
        mu_x=0.5,
        phi_x=2.0,
        beta_tic=[0.5, -0.2],
        rho_bl=0.5,
    )
    base.update(overrides)
    return ClassParameters(**base)


class TestPencilAndPaperOracle:
    """J=2 linear model whose 5x5 moments were derived by hand.

    Writing the observed variables as explicit linear combinations of
    (x_e, eta0, eta1, zeta0, zeta1) gives every entry below from scalar
    covariance algebra; s2 is cov(x_e, eta0) = rho*sqrt(phi_x*phi00).
    """

    def test_mean_and_cov(self):
        p = two_wave_params()
        im = implied_moments(p, [0.0, 1.0], SLOPES)
        assert np.allclose(im.mean, [1.0, 3.0, 3.95, 8.75, 0.5])

        s2 = 0.5 * math.sqrt(2.0)
        var_w1 = 0.25 * 2.0 + 0.49 * 1.0 + 0.7 * s2 + 1.0
        cov_w1w2 = -0.2 + 0.07 + (0.05 - 0.14) * s2 + 0.3
        var_w2 = 0.08 + 0.01 - 0.04 * s2 + 2.0
        cov_w1_xe = 1.0 + 0.7 * s2
        cov_w2_xe = -0.4 + 0.1 * s2
        cov_w1_e0 = 0.5 * s2 + 0.7
        cov_w2_e0 = -0.2 * s2 + 0.1
        cov_w1_e1 = 0.7 * 0.2
        cov_w2_e1 = 0.1 * 0.2
        expected = np.array([
            [1.6, 1.2, cov_w1_e0 + 0.2, cov_w1_e0 + cov_w2_e0 + 0.4 * 0.2, s2],
            [1.2, 3.5, cov_w1_e0 + cov_w1_e1,
             cov_w1_e0 + cov_w1_e1 + cov_w2_e0 + cov_w2_e1 + 0.4 * (0.2 + 1.5) + 0.2, s2],
            [0.0, 0.0, var_w1 + 0.8, var_w1 + cov_w1w2 + 0.4 * cov_w1_e1, cov_w1_xe],
            [0.0, 0.0, 0.0,
             var_w1 + var_w2 + 0.16 * 1.5 + 2 * cov_w1w2
             + 0.8 * cov_w1_e1 + 0.8 * cov_w2_e1 + 0.8,
             cov_w1_xe + cov_w2_xe],
            [0.0, 0.0, 0.0, 0.0, 2.0],
        ])
        expected = np.where(expected == 0.0, expected.T, expected)
        assert np.allclose(im.cov, expected, atol=1e-12)


class TestDegenerateCases:
    def test_zero_latent_variances_leave_only_residuals(self):
        eps = 1e-12
        p = two_wave_params(
            psi_eta_y=np.eye(2) * eps,
            phi_eta_x=np.eye(2) * eps,
            phi_x=eps,
            rho_bl=0.0,
        )
        A, m, V, R = latent_design(p, [0.0, 1.0], SLOPES)
        cov = A @ V @ A.T + R
        assert np.allclose(cov, R, atol=1e-9)

    def test_everything_zero_gives_zero_cov(self):
        eps = 1e-14
        p = two_wave_params(
            psi_eta_y=np.eye(2) * eps, phi_eta_x=np.eye(2) * eps, phi_x=eps,
            theta_x=eps, theta_y=eps, theta_xy=0.0, rho_bl=0.0,
        )
        im = implied_moments(p, [0.0, 1.0], SLOPES)
        assert np.allclose(im.cov, 0.0, atol=1e-12)

    def test_severed_paths_make_xy_block_residual_only(self):
        p = two_wave_params(kappa=0.0, beta_tvc=[0.0, 0.0], beta_tic=[0.0, 0.0])
        im = implied_moments(p, [0.0, 1.0], SLOPES)
        xy_block = im.cov[0:2, 2:4]
        assert np.allclose(xy_block, np.eye(2) * 0.2)

    def test_zero_kappa_y_block_ignores_rates(self):
        times = np.array([0.0, 1.0, 2.0, 3.0])
        kw = dict(
            form=BilinearSpline(1.5),
            alpha_y=[4.0, 2.0, 0.5],
            psi_eta_y=np.diag([2.0, 1.0, 0.5]),
            theta_y=1.0,
            mu_eta_x=[0.0, 5.0],
            phi_eta_x=[[1.0, 0.3], [0.3, 1.0]],
            beta_tvc=[0.5, 0.1, 0.0],
            kappa=0.0,
            theta_x=1.0,
            theta_xy=0.1,
            mu_x=0.0,
            phi_x=1.0,
            beta_tic=[0.2, 0.0, 0.1],
            rho_bl=0.3,
        )
        im_a = implied_moments(ClassParameters(rates=[1.0, 0.9, 0.8], **kw), times, SLOPES)
        im_b = implied_moments(ClassParameters(rates=[1.0, 0.2, 2.0], **kw), times, SLOPES)
        assert np.allclose(im_a.cov[4:8, 4:8], im_b.cov[4:8, 4:8])
        assert np.allclose(im_a.mean[4:8], im_b.mean[4:8])
        assert not np.allclose(im_a.cov[0:4, 0:4], im_b.cov[0:4, 0:4])

    def test_symmetry_and_psd(self):
        p = two_wave_params()
        im = implied_moments(p, [0.0, 1.0], CHANGES)
        assert np.allclose(im.cov, im.cov.T, atol=1e-14)
        assert np.min(np.linalg.eigvalsh(im.cov)) > 0


class TestMeanStructure:
    def test_x_mean_accumulates_rates(self):
        rates = np.arange(10, 1, -1) / 10.0
        p = ClassParameters(
            form=Linear(),
            alpha_y=[0.0, 0.0],
            psi_eta_y=np.eye(2),
            theta_y=1.0,
            mu_eta_x=[0.0, 5.0],
            phi_eta_x=np.eye(2),
            rates=rates,
            beta_tvc=[0.0, 0.0],
            kappa=0.0,
            theta_x=1.0,
            theta_xy=0.0,
        )
        times = np.arange(10.0)
        im = implied_moments(p, times, SLOPES)
        assert im.mean[9] == pytest.approx(5.0 * np.sum(rates * np.diff(times)))

    def test_state_features_enter_y_mean(self):
        p = two_wave_params()
        im_s = implied_moments(p, [0.0, 1.0], SLOPES)
        # wave-2 y mean includes kappa * E[eta1] * rate_1
        assert im_s.mean[3] == pytest.approx(3.95 + 4.0 + 0.4 * 2.0)
        im_c = implied_moments(p, [0.0, 2.0], CHANGES)
        assert im_c.mean[3] == pytest.approx(3.95 + 2 * 4.0 + 0.4 * 2.0 * 2.0)


class TestLatentDesignContract:
    def test_design_blocks(self):
        p = two_wave_params()
        A, m, V, R = latent_design(p, [0.0, 1.0], SLOPES)
        # latent order: constant, x_e, eta0, eta1, zeta0, zeta1
        assert A.shape == (5, 6)
        assert np.allclose(m, [1.0, 0.5, 1.0, 2.0, 0.0, 0.0])
        # x rows load the TVC factors only
        assert np.allclose(A[0], [0, 0, 1, 0, 0, 0])
        assert np.allclose(A[1], [0, 0, 1, 1, 0, 0])
        # x_e row is the identity on the x_e latent
        assert np.allclose(A[4], [0, 1, 0, 0, 0, 0])
        # latent covariance blocks
        assert V[1, 1] == pytest.approx(2.0)
        assert V[1, 2] == pytest.approx(0.5 * np.sqrt(2.0 * 1.0))
        assert V[1, 3] == 0.0  # no covariance between x_e and the shape factor
        assert np.allclose(V[2:4, 2:4], p.phi_eta_x)
        assert np.allclose(V[4:, 4:], p.psi_eta_y)
        assert np.allclose(V[0], 0.0)
        # residual structure: contemporaneous only, none on x_e
        assert R[0, 0] == 0.6 and R[2, 2] == 0.8
        assert R[0, 2] == 0.2 and R[1, 3] == 0.2
        assert R[0, 3] == 0.0 and R[1, 2] == 0.0
        assert R[4, 4] == 0.0

    def test_reconstruction_matches_implied(self):
        p = two_wave_params()
        A, m, V, R = latent_design(p, [0.0, 1.0], CHANGES)
        im = implied_moments(p, [0.0, 1.0], CHANGES)
        assert np.allclose(A @ m, im.mean)
        assert np.allclose(A @ V @ A.T + R, im.cov)


class TestConditionalGrowthMoments:
    def test_no_covariate_paths(self):
        p = two_wave_params(beta_tic=[0.0, 0.0], beta_tvc=[0.0, 0.0])
        mu, var = conditional_growth_moments(p)
        assert np.allclose(mu, p.alpha_y)
        assert np.allclose(var, p.psi_eta_y)

    def test_unit_loading_quadratic_form(self):
        p = two_wave_params(
            rho_bl=0.0, phi_x=1.0, phi_eta_x=[[1.0, 0.0], [0.0, 1.0]],
            beta_tic=[1.0, 0.0], beta_tvc=[1.0, 0.0],
        )
        _, var = conditional_growth_moments(p)
        assert var[0, 0] == pytest.approx(p.psi_eta_y[0, 0] + 2.0)
        assert var[1, 1] == pytest.approx(p.psi_eta_y[1, 1])

    def test_variance_explained_share(self):
        # class-1 design target: trait and TIC jointly explain ~13%
        from gmmtvc.simulation import reference_condition

        cond = reference_condition()
        p = cond.classes[0].class_parameters()
        _, var = conditional_growth_moments(p)
        ratio = np.diag(var - p.psi_eta_y) / np.diag(var)
        assert np.allclose(ratio, 0.1275, atol=0.0005)
        p2 = cond.classes[1].class_parameters()
        _, var2 = conditional_growth_moments(p2)
        ratio2 = np.diag(var2 - p2.psi_eta_y) / np.diag(var2)
        assert np.allclose(ratio2, 0.255, atol=0.0005)

    def test_explained_part_is_psd(self):
        p = two_wave_params()
        _, var = conditional_growth_moments(p)
        assert np.min(np.linalg.eigvalsh(var - p.psi_eta_y)) >= -1e-12


class TestStructuralSimulationOracle:
    """Anti-drift check: simulate the structural equations directly."""

    def test_moments_match_simulation(self):
        rng = np.random.default_rng(7)
        n = 200_000
        times = np.array([0.0, 0.7, 2.0, 3.1])
        rates = np.array([1.0, 0.8, 0.5])
        p = ClassParameters(
            form=BilinearSpline(1.5),
            alpha_y=[4.0, 2.0, 0.5],
            psi_eta_y=[[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 0.8]],
            theta_y=0.9,
            mu_eta_x=[1.0, 2.0],
            phi_eta_x=[[1.0, 0.2], [0.2, 1.5]],
            rates=rates,
            beta_tvc=[0.7, 0.1, -0.3],
            kappa=0.5,
            theta_x=0.6,
            theta_xy=0.25,
            mu_x=0.5,
            phi_x=2.0,
            beta_tic=[0.5, -0.2, 0.3],
            rho_bl=0.4,
        )
        cov3 = np.array([
            [2.0, 0.4 * math.sqrt(2.0), 0.0],
            [0.4 * math.sqrt(2.0), 1.0, 0.2],
            [0.0, 0.2, 1.5],
        ])
        xe, e0, e1 = rng.multivariate_normal([0.5, 1.0, 2.0], cov3, size=n).T
        zeta = rng.multivariate_normal(np.zeros(3), p.psi_eta_y, size=n)
        eta_y = (np.array([4.0, 2.0, 0.5])
                 + np.outer(xe, [0.5, -0.2, 0.3])
                 + np.outer(e0, [0.7, 0.1, -0.3]) + zeta)
        y_star = p.form.curve(eta_y, np.broadcast_to(times, (n, 4)))
        dt = np.diff(times)
        s = np.concatenate([[0.0], rates * dt])
        y_star = y_star + 0.5 * e1[:, None] * s[None, :]
        cum = np.concatenate([[0.0], np.cumsum(rates * dt)])
        x_star = e0[:, None] + cum[None, :] * e1[:, None]
        resid = rng.multivariate_normal(np.zeros(2), [[0.6, 0.25], [0.25, 0.9]], size=(n, 4))
        obs = np.column_stack([x_star + resid[:, :, 0], y_star + resid[:, :, 1], xe])

        im = implied_moments(p, times, CHANGES)
        emp_mean = obs.mean(axis=0)
        emp_cov = np.cov(obs.T)
        se_mean = np.sqrt(np.diag(im.cov) / n)
        assert np.all(np.abs(emp_mean - im.mean) < 4.0 * se_mean)
        se_cov = np.sqrt((np.outer(np.diag(im.cov), np.diag(im.cov)) + im.cov ** 2) / n)
        assert np.all(np.abs(emp_cov - im.cov) < 4.0 * se_cov)


class TestParameterValidation:
    def test_rejects_bad_covariances(self):
        with pytest.raises(ValueError):
            two_wave_params(psi_eta_y=[[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(ValueError):
            two_wave_params(rho_bl=1.2)
        with pytest.raises(ValueError):
            two_wave_params(theta_xy=1.0)
        with pytest.raises(ValueError):
            two_wave_params(theta_y=-1.0)
        with pytest.raises(ValueError):
            two_wave_params(rates=[0.5])
