import numpy as np
import pytest

from dcpwa import benchmarks
from dcpwa.errors import BadMultiplier
from dcpwa.lifting import (build_chi, build_chi_plus, build_graph_matrices,
                           build_layout, check_membership, check_sprocedure)
from dcpwa.model import (UncertaintySample, eval_convex_part, make_rng,
                         redefine_dc, sample_uncertainty)


def prepared(name):
    sys_r, _ = redefine_dc(benchmarks.by_name(name))
    layout = build_layout(sys_r)
    gm = build_graph_matrices(sys_r, layout)
    return sys_r, layout, gm


class TestLayout:
    def test_pendulum_dimensions(self):
        _, lay, _ = prepared("pendulum")
        assert (lay.n_chi, lay.n_chi_plus, lay.d_y) == (7, 11, 15)

    def test_hr_dimensions(self):
        _, lay, _ = prepared("human-robot")
        assert (lay.n_chi, lay.n_chi_plus, lay.d_y) == (19, 34, 40)

    def test_small_formula(self):
        from dcpwa.lifting import LiftedLayout
        lay = LiftedLayout(n=1, alpha=1, beta=1)
        assert (lay.n_chi, lay.n_chi_plus) == (4, 6)

    def test_slices_partition(self):
        _, lay, _ = prepared("human-robot")
        seen = [0] + list(range(*lay.x_slice.indices(lay.n_chi_plus)))
        for j in range(lay.alpha):
            seen += list(range(*lay.gamma_slice(j).indices(lay.n_chi_plus)))
            seen += list(range(*lay.gamma_plus_slice(j).indices(lay.n_chi_plus)))
        for l in range(lay.beta):
            seen += list(range(*lay.eta_slice(l).indices(lay.n_chi_plus)))
            seen += list(range(*lay.eta_plus_slice(l).indices(lay.n_chi_plus)))
        assert sorted(seen) == list(range(lay.n_chi_plus))


class TestBuildChi:
    def test_pendulum_contact_point(self):
        sys_r, lay, _ = prepared("pendulum")
        s = UncertaintySample.from_weights(sys_r, [1, 0, 0, 0])
        chi = build_chi(sys_r, lay, [0.3, 0.0], s)
        assert np.allclose(chi, [1, 0.3, 0, 0, 0, 0, 0.02], atol=1e-15)

    def test_origin_lift_is_unit_vector(self):
        for name in ("pendulum", "human-robot"):
            sys_r, lay, _ = prepared(name)
            rng = make_rng(0)
            for _ in range(10):
                s = sample_uncertainty(sys_r, rng)
                chi = build_chi(sys_r, lay, np.zeros(sys_r.n), s)
                expect = np.zeros(lay.n_chi)
                expect[0] = 1.0
                assert np.array_equal(chi, expect)

    def test_hr_final_gamma_is_bruteforce_max(self):
        sys_r, lay, _ = prepared("human-robot")
        s = UncertaintySample.from_weights(sys_r, [1, 0, 0, 0])
        x = np.array([1.0, 0.0, 3.5])
        chi = build_chi(sys_r, lay, x, s)
        pieces = [ly.affine(x)[2] for ly in s.gamma_layers]
        # pieces evaluate to 1.25, 1.14, 3.5 at this state
        assert np.allclose(sorted(pieces), [1.14, 1.25, 3.5], atol=1e-12)
        assert abs(chi[lay.gamma_slice(2)][2] - max(pieces)) <= 1e-15


class TestGraphMatrices:
    @pytest.mark.parametrize("name", ["pendulum", "human-robot"])
    def test_selector_identities_on_probes(self, name):
        sys_r, lay, gm = prepared(name)
        rng = make_rng(1)
        for _ in range(1000):
            x = rng.uniform(sys_r.state_box[:, 0], sys_r.state_box[:, 1])
            st = sample_uncertainty(sys_r, rng)
            st1 = sample_uncertainty(sys_r, rng)
            K = rng.uniform(-1, 1, (sys_r.m, sys_r.p))
            chi = build_chi(sys_r, lay, x, st)
            u = K @ sys_r.C @ chi
            _, xp, chip = build_chi_plus(sys_r, lay, x, u, st, st1)
            assert np.array_equal(gm.S @ chip, chi)
            assert np.array_equal(gm.S_x @ chip, np.concatenate([[1.0], x]))
            gam, _ = eval_convex_part(st.gamma_layers, x)
            eta, _ = eval_convex_part(st.eta_layers, x)
            lam = np.concatenate([[1.0], x, gam, eta])
            assert np.max(np.abs(gm.S_lambda @ chi - lam)) == 0.0

    @pytest.mark.parametrize("name", ["pendulum", "human-robot"])
    def test_splus_reproduces_next_lift(self, name):
        sys_r, lay, gm = prepared(name)
        rng = make_rng(2)
        worst = 0.0
        for _ in range(500):
            x = rng.uniform(sys_r.state_box[:, 0], sys_r.state_box[:, 1])
            st = sample_uncertainty(sys_r, rng)
            st1 = sample_uncertainty(sys_r, rng)
            K = rng.uniform(-1, 1, (sys_r.m, sys_r.p))
            chi = build_chi(sys_r, lay, x, st)
            u = K @ sys_r.C @ chi
            _, xp, chip = build_chi_plus(sys_r, lay, x, u, st, st1)
            chi_next = build_chi(sys_r, lay, xp, st1)
            worst = max(worst, np.max(np.abs(gm.S_plus(K) @ chip - chi_next)))
        assert worst <= 1e-10

    def test_splus_with_zero_gain_is_drift_only(self):
        sys_r, lay, gm = prepared("pendulum")
        sp = gm.S_plus(np.zeros((1, 4)))
        xrows = sp[1:3]
        assert np.array_equal(xrows[:, lay.x_slice], sys_r.A)
        assert np.array_equal(xrows[:, lay.eta_slice(1)], -np.eye(2))
        assert not np.any(xrows[:, lay.eta_slice(0)])

    def test_first_layer_selectors_give_ones(self):
        sys_r, lay, gm = prepared("human-robot")
        rng = make_rng(3)
        s = sample_uncertainty(sys_r, rng)
        chi = build_chi(sys_r, lay, rng.uniform(-1, 1, 3), s)
        assert np.array_equal(gm.G_gamma[0] @ chi, np.ones(3))
        assert np.array_equal(gm.G_eta[0] @ chi, np.ones(3))

    def test_alpha_zero_has_no_gamma_blocks(self):
        _, lay, gm = prepared("pendulum")
        assert gm.G_gamma == [] and gm.G_gamma_k == []
        assert lay.d_y == (1 + 3 * 2) + 2 * 2 * 2

    def test_residual_maps_per_vertex(self):
        sys_r, lay, gm = prepared("human-robot")
        rng = make_rng(4)
        for _ in range(200):
            x = rng.uniform(-3, 3, 3)
            s = sample_uncertainty(sys_r, rng)
            chi = build_chi(sys_r, lay, x, s)
            for j in range(lay.alpha):
                for k, vx in enumerate(sys_r.vertices):
                    expect = chi[lay.gamma_slice(j)] - vx.gamma_layers[j].affine(x)
                    got = gm.G_gamma_k[j][k] @ chi
                    assert np.max(np.abs(got - expect)) <= 1e-12


class TestMembership:
    @pytest.mark.parametrize("name", ["pendulum", "human-robot"])
    def test_true_lifts_pass(self, name):
        sys_r, lay, _ = prepared(name)
        rng = make_rng(5)
        for _ in range(1000):
            x = rng.uniform(sys_r.state_box[:, 0], sys_r.state_box[:, 1])
            s = sample_uncertainty(sys_r, rng)
            chi = build_chi(sys_r, lay, x, s)
            rep = check_membership(lay, chi, s)
            assert rep.ok

    def test_inflated_layer_fails_complementarity(self):
        sys_r, lay, _ = prepared("pendulum")
        s = UncertaintySample.from_weights(sys_r, [1, 0, 0, 0])
        chi = build_chi(sys_r, lay, [0.3, 0.0], s)
        chi2 = chi.copy()
        chi2[lay.eta_slice(1)] += 1.0
        rep = check_membership(lay, chi2, s)
        assert not rep.ok
        assert np.max(np.abs(rep.equality)) > 1e-6

    def test_scalar_two_layer_worked_case(self):
        from dcpwa.lifting import LiftedLayout
        from dcpwa.model import DCSystem, MaxAffineLayer, UncertaintyVertex
        vx = UncertaintyVertex(
            (MaxAffineLayer([[1.0]], [0.0]), MaxAffineLayer([[2.0]], [0.0])), ())
        sys = DCSystem([[1.0]], [[1.0]], [vx], [[-2, 2]], [[1.0]], np.eye(4))
        lay = LiftedLayout(n=1, alpha=2, beta=0)
        s = UncertaintySample.from_weights(sys, [1.0])
        chi = build_chi(sys, lay, [1.0], s)
        # layer values 1 and 2: residual product (2-1)*(2-2) = 0
        rep = check_membership(lay, chi, s)
        assert rep.ok
        assert abs(rep.equality[1]) == 0.0


class TestSProcedure:
    def setup_method(self):
        self.sys_r, self.lay, self.gm = prepared("pendulum")
        n = self.lay.n
        self.pairs = []
        for l in range(self.lay.beta):
            self.pairs.append((self.gm.G_eta[l], self.gm.G_eta_k[l][0]))
        self.zero_mults = [(np.zeros((n, n)), np.zeros((n, n)))] * len(self.pairs)

    def test_certificate_sum_itself(self):
        rng = make_rng(6)
        mults = [(np.diag(rng.normal(size=2)), np.abs(rng.normal(size=(2, 2))))
                 for _ in self.pairs]
        P = sum(0.5 * (G.T @ (D + M) @ Gb + (G.T @ (D + M) @ Gb).T)
                for (D, M), (G, Gb) in zip(mults, self.pairs))
        ok, margin = check_sprocedure(P, mults, self.pairs)
        assert ok
        assert abs(margin) <= 1e-9

    def test_identity_with_zero_multipliers(self):
        P = np.eye(self.lay.n_chi)
        ok, margin = check_sprocedure(P, self.zero_mults, self.pairs)
        assert ok and abs(margin - 1.0) <= 1e-9

    def test_negative_identity_fails(self):
        P = -np.eye(self.lay.n_chi)
        ok, margin = check_sprocedure(P, self.zero_mults, self.pairs)
        assert not ok and margin < -0.5

    def test_bad_multipliers_rejected(self):
        n = self.lay.n
        with pytest.raises(BadMultiplier):
            check_sprocedure(np.eye(self.lay.n_chi),
                             [(np.ones((n, n)), np.zeros((n, n)))] * len(self.pairs),
                             self.pairs)
        with pytest.raises(BadMultiplier):
            check_sprocedure(np.eye(self.lay.n_chi),
                             [(np.zeros((n, n)), -np.ones((n, n)))] * len(self.pairs),
                             self.pairs)

    def test_spot_check_runs_on_sampled_lifts(self):
        rng = make_rng(7)

        def sampler():
            x = rng.uniform(self.sys_r.state_box[:, 0], self.sys_r.state_box[:, 1])
            s = sample_uncertainty(self.sys_r, rng)
            return build_chi(self.sys_r, self.lay, x, s)

        ok, _ = check_sprocedure(np.eye(self.lay.n_chi), self.zero_mults,
                                 self.pairs, sampler=sampler, spot_count=200)
        assert ok
