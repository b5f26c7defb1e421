import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from flowheat import bounds as bd, flows, geometry as geo, kernels as ker, logsob as ls
from flowheat.geometry import ScalarField

TWO_PI = 2.0 * math.pi


@pytest.fixture(scope="module")
def torus_consts(torus_weighted, static_torus_traj_weighted):
    st = geo.initial_state(
        geo.ManifoldModel("flat_torus", 3, 24, periods=(TWO_PI,) * 3)
    )
    est, _ = ls.estimate_sobolev_constant(st, 48)
    return ls.LogSobConstants.from_state(st, 0.3, est)


@pytest.fixture(scope="module")
def sphere_consts(shrinking_sphere_traj):
    st = shrinking_sphere_traj.state_at(0.0)
    est, _ = ls.estimate_sobolev_constant(st, 48)
    return ls.LogSobConstants.from_state(st, 0.2, est)


class TestDistanceConstants:
    def test_static_torus_gradient_sup_is_one(self, static_torus_traj_weighted):
        mu = bd.max_distance_gradient(
            static_torus_traj_weighted, np.zeros(3), 0.0, 0.2
        )
        assert abs(mu - 1.0) < 1e-6

    def test_shrinking_sphere_gradient_sup_is_one(self, shrinking_sphere_traj):
        # r decreasing: the ratio r(t)/r(lambda) peaks at lambda = t
        mu = bd.max_distance_gradient(shrinking_sphere_traj, 0.0, 0.03, 0.15)
        assert abs(mu - 1.0) < 1e-6

    def test_growth_rate_zero_static_and_shrinking(
        self, static_torus_traj_weighted, shrinking_sphere_traj
    ):
        x = np.array([2.0, 1.0, 0.5])
        assert bd.distance_growth_rate(
            static_torus_traj_weighted, x, np.zeros(3), 0.0, 0.2
        ) == 0.0
        assert bd.distance_growth_rate(
            shrinking_sphere_traj, math.pi, 0.0, 0.03, 0.15
        ) == 0.0

    def test_synthetic_expanding_closed_forms(self, torus):
        beta = 0.4
        traj = flows.synthetic_scaled_trajectory(
            torus, lambda t: 1.0 + beta * t, np.linspace(0.0, 0.5, 41)
        )
        s, t = 0.1, 0.4
        mu = bd.max_distance_gradient(traj, np.zeros(3), s, t)
        assert_allclose(mu, (1 + beta * t) / (1 + beta * s), rtol=1e-5)
        h = TWO_PI / torus.resolution
        x = np.array([8 * h, 4 * h, 2 * h])  # on-grid target point
        eta = bd.distance_growth_rate(traj, x, np.zeros(3), s, t)
        base = geo.distance(geo.initial_state(torus), np.zeros(3), x)
        assert_allclose(eta, 0.25 * beta * base, rtol=1e-5)


class TestVerifiers:
    def test_on_diagonal_passes(self, static_torus_traj_weighted, torus_consts):
        y = np.zeros(3)
        rep = bd.verify_on_diagonal(
            static_torus_traj_weighted, y, 0.0, 0.05, torus_consts
        )
        assert rep.passed
        assert rep.margin_ratio > 1.0

    def test_negative_control_fails(self, static_torus_traj_weighted, torus_consts):
        rep = bd.verify_on_diagonal(
            static_torus_traj_weighted, np.zeros(3), 0.0, 0.05, torus_consts,
            constant_scale=1e-6,
        )
        assert not rep.passed

    def test_weighted_sup_passes(self, static_torus_traj_weighted, torus_weighted,
                                 torus_consts):
        base = ker.coordinate_weight(torus_weighted, 1.0)
        wt = ker.WeightSpec(alpha=1.0, profile=base.profile).certify(
            static_torus_traj_weighted
        )
        rep = bd.verify_weighted_sup(
            static_torus_traj_weighted, wt, np.zeros(3), 0.0, 0.05, torus_consts
        )
        assert rep.passed

    @pytest.mark.parametrize("variant", ["static_weight", "moving_weight"])
    def test_gaussian_bounds_on_sphere_oracle(
        self, shrinking_sphere_traj, sphere_consts, variant
    ):
        rep = bd.verify_gaussian(
            shrinking_sphere_traj, 0.0, 0.02, 0.15, variant, sphere_consts,
            use_oracle=True,
        )
        assert rep.passed
        if variant == "static_weight":
            assert abs(rep.params["grad_sup"] - 1.0) < 1e-6
        else:
            assert rep.params["growth_rate"] == 0.0

    def test_gaussian_stress_near_extinction(self, shrinking_sphere_traj,
                                             sphere_consts):
        # t - s at ninety percent of the remaining time to blow-up
        s = 0.05
        rep = bd.verify_gaussian(
            shrinking_sphere_traj, 0.0, s, s + 0.9 * (0.2 - s), "static_weight",
            sphere_consts, use_oracle=True,
        )
        assert rep.passed

    def test_x_equals_y_reduces_to_on_diagonal(self, static_torus_traj_weighted,
                                               torus_consts):
        rep = bd.verify_gaussian(
            static_torus_traj_weighted, np.zeros(3), 0.0, 0.05, "static_weight",
            torus_consts,
        )
        od = bd.verify_on_diagonal(
            static_torus_traj_weighted, np.zeros(3), 0.0, 0.05, torus_consts
        )
        # the worst point is on-diagonal where the exponential factor is one
        assert rep.diagnostics["worst_distance"] < 1e-9
        assert_allclose(rep.rhs, od.rhs, rtol=1e-12)

    def test_contraction_bounds_constant_data(
        self, static_torus_traj_weighted, torus_weighted, torus_consts
    ):
        u0 = ScalarField(np.full((64,) * 3, 0.7))
        vol = (2 * math.pi) ** 3
        rep = bd.verify_sup_from_l2(
            static_torus_traj_weighted, None, 0.0, 0.05, u0, torus_consts
        )
        assert rep.passed
        assert_allclose(rep.lhs, 0.7, rtol=1e-12)
        assert_allclose(
            rep.rhs,
            ls.l2_to_sup_constant(torus_consts) * 0.05 ** -0.75 * 0.7 * math.sqrt(vol),
            rtol=1e-12,
        )
        rep2 = bd.verify_l2_from_l1(
            static_torus_traj_weighted, None, 0.0, 0.05, u0, torus_consts
        )
        assert rep2.passed

    def test_contraction_bounds_bump_data(
        self, static_torus_traj_weighted, torus_weighted, torus_consts
    ):
        st = geo.initial_state(torus_weighted)
        d = geo.distance_field(st, np.zeros(3)).values
        u0 = ScalarField(np.exp(-(d / 0.3) ** 2))
        base = ker.coordinate_weight(torus_weighted, 1.0)
        for alpha in (0.0, 1.0, -1.0):
            wt = ker.WeightSpec(alpha=alpha, profile=base.profile).certify(
                static_torus_traj_weighted
            )
            r1 = bd.verify_sup_from_l2(
                static_torus_traj_weighted, wt, 0.0, 0.05, u0, torus_consts,
                ker.SolverConfig(dt=1e-3),
            )
            r2 = bd.verify_l2_from_l1(
                static_torus_traj_weighted, wt, 0.0, 0.05, u0, torus_consts,
                ker.SolverConfig(dt=1e-3),
            )
            assert r1.passed and r2.passed

    def test_two_step_chain_matches_direct_constant(self, torus_consts):
        chained, direct = bd.chained_two_step_factor(torus_consts, 1.0, 0.1)
        assert_allclose(chained, direct, rtol=1e-12)


class TestSuite:
    def test_empty_grid_empty_suite(self, static_torus_traj_weighted, torus_consts):
        reports, summary = bd.assemble_report_suite(
            static_torus_traj_weighted, torus_consts, checks=["on_diagonal"],
            alphas=[], pairs=[], y=np.zeros(3),
        )
        assert reports == []
        assert summary["total"] == 0

    def test_suite_collects_failures(self, static_torus_traj_weighted, torus_consts):
        # weighted checks without a weight builder must be collected as
        # failed reports with diagnostics, not raised
        reports, summary = bd.assemble_report_suite(
            static_torus_traj_weighted, torus_consts, checks=["weighted_sup"],
            alphas=[1.0], pairs=[(0.0, 0.05)], y=np.zeros(3),
        )
        assert summary["failed"] == 1
        assert "error" in reports[0].diagnostics

    def test_reports_json_round_trip(self, static_torus_traj_weighted, torus_consts,
                                     tmp_path):
        import json

        reports, _ = bd.assemble_report_suite(
            static_torus_traj_weighted, torus_consts, checks=["on_diagonal"],
            alphas=[0.0], pairs=[(0.0, 0.05)], y=np.zeros(3),
        )
        path = tmp_path / "reports.json"
        bd.reports_to_json(reports, path)
        data = json.loads(path.read_text())
        assert data[0]["kind"] == "on_diagonal"
        assert data[0]["passed"] is True
