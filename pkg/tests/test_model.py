import numpy as np
import pytest

from dcpwa import benchmarks
from dcpwa.errors import BadWeights, DimensionMismatch, MatchingViolation
from dcpwa.model import (DCSystem, MaxAffineLayer, UncertaintySample,
                         UncertaintyVertex, check_matching, eval_convex_part,
                         load_system, make_rng, norm_bounds, redefine_dc,
                         sample_uncertainty, save_system, step, system_hash)


def scalar_system(gamma_offsets, eta_offsets, gamma_slopes=None, eta_slopes=None):
    gs = gamma_slopes or [1.0] * len(gamma_offsets)
    es = eta_slopes or [1.0] * len(eta_offsets)
    vx = UncertaintyVertex(
        tuple(MaxAffineLayer([[s]], [d]) for s, d in zip(gs, gamma_offsets)),
        tuple(MaxAffineLayer([[s]], [d]) for s, d in zip(es, eta_offsets)),
    )
    alpha, beta = len(gamma_offsets), len(eta_offsets)
    n_chi = 1 + (1 + alpha + beta)
    return DCSystem(A=[[1.0]], B=[[1.0]], vertices=[vx],
                    state_box=[[-1.0, 1.0]], Q_u=[[1.0]], C=np.eye(n_chi))


class TestMatching:
    def test_pendulum_matches_with_zero_offsets(self):
        rep = check_matching(benchmarks.pendulum())
        assert rep.ok
        assert np.allclose(rep.d_star, 0.0)

    def test_equal_constants_match(self):
        vx = UncertaintyVertex(
            (MaxAffineLayer(np.zeros((2, 2)), [1.0, 0.0]),),
            (MaxAffineLayer(np.zeros((2, 2)), [1.0, 0.0]),),
        )
        sys = DCSystem(np.eye(2), np.zeros((2, 1)), [vx],
                       [[-1, 1], [-1, 1]], [[1.0]], np.eye(7))
        assert check_matching(sys).ok

    def test_mismatched_constants_fail_at_dimension_0(self):
        vx = UncertaintyVertex(
            (MaxAffineLayer(np.zeros((2, 2)), [1.0, 0.0]),),
            (MaxAffineLayer(np.zeros((2, 2)), [0.0, 0.0]),),
        )
        sys = DCSystem(np.eye(2), np.zeros((2, 1)), [vx],
                       [[-1, 1], [-1, 1]], [[1.0]], np.eye(7))
        rep = check_matching(sys)
        assert not rep.ok
        assert not rep.agrees[0, 0]
        assert rep.agrees[0, 1]


class TestRedefine:
    def test_pendulum_unchanged(self):
        sys = benchmarks.pendulum()
        sys_r, d_star = redefine_dc(sys)
        assert np.allclose(d_star, 0.0)
        for va, vb in zip(sys.vertices, sys_r.vertices):
            for a, b in zip(va.eta_layers, vb.eta_layers):
                assert np.array_equal(a.d, b.d)
                assert np.array_equal(a.E, b.E)

    def test_common_maximum_subtracted(self):
        sys = scalar_system([2.0, 1.0], [2.0, 0.0])
        sys_r, d_star = redefine_dc(sys)
        assert d_star.tolist() == [[2.0]]
        assert [ly.d[0] for ly in sys_r.vertices[0].gamma_layers] == [0.0, -1.0]
        assert [ly.d[0] for ly in sys_r.vertices[0].eta_layers] == [0.0, -2.0]

    def test_single_layer_both_shifted_to_zero(self):
        sys = scalar_system([3.0], [3.0])
        sys_r, _ = redefine_dc(sys)
        assert sys_r.vertices[0].gamma_layers[0].d[0] == 0.0
        assert sys_r.vertices[0].eta_layers[0].d[0] == 0.0

    def test_violation_raises(self):
        sys = scalar_system([1.0], [0.0])
        with pytest.raises(MatchingViolation):
            redefine_dc(sys)

    def test_shifted_offsets_nonpositive_and_zero_at_origin(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            off_g = rng.uniform(-1, 1, 3)
            off_e = rng.uniform(-1, 1, 2)
            shift = max(off_g.max(), off_e.max())
            off_g[rng.integers(3)] = shift
            off_e[rng.integers(2)] = shift
            sys = scalar_system(list(off_g), list(off_e))
            sys_r, _ = redefine_dc(sys)
            for vx in sys_r.vertices:
                for ly in vx.gamma_layers + vx.eta_layers:
                    assert np.all(ly.d <= 1e-12)
                g0, _ = eval_convex_part(vx.gamma_layers, np.zeros(1))
                e0, _ = eval_convex_part(vx.eta_layers, np.zeros(1))
                assert abs(g0[0]) == 0.0
                assert abs(e0[0]) == 0.0


class TestEval:
    def test_scalar_two_layers(self):
        layers = (MaxAffineLayer([[1.0]], [0.0]), MaxAffineLayer([[2.0]], [0.0]))
        val, lvals = eval_convex_part(layers, [1.0])
        assert [v[0] for v in lvals] == [1.0, 2.0]
        assert val[0] == 2.0

    def test_pendulum_wall_layers(self):
        sys_r, _ = redefine_dc(benchmarks.pendulum())
        s = UncertaintySample.from_weights(sys_r, [1, 0, 0, 0])
        val, lvals = eval_convex_part(s.eta_layers, [0.3, 0.0])
        assert np.allclose(lvals[0], [0.0, 0.0])
        assert np.allclose(lvals[1], [0.0, 0.02])
        assert np.allclose(val, [0.0, 0.02])

    def test_zero_offsets_at_origin(self):
        layers = (MaxAffineLayer(np.eye(3), np.zeros(3)),
                  MaxAffineLayer(-np.eye(3), np.zeros(3)))
        val, lvals = eval_convex_part(layers, np.zeros(3))
        assert np.array_equal(val, np.zeros(3))
        for lv in lvals:
            assert np.array_equal(lv, np.zeros(3))

    def test_empty_stack_is_zero(self):
        val, lvals = eval_convex_part((), np.ones(4))
        assert np.array_equal(val, np.zeros(4))
        assert lvals == []

    def test_nested_max_equals_direct_max(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = rng.integers(1, 4)
            layers = tuple(
                MaxAffineLayer(rng.normal(size=(n, n)), rng.normal(size=n))
                for _ in range(rng.integers(1, 5))
            )
            x = rng.normal(size=n)
            val, _ = eval_convex_part(layers, x)
            direct = np.max(np.stack([ly.affine(x) for ly in layers]), axis=0)
            assert np.max(np.abs(val - direct)) <= 1e-12

    def test_dimension_mismatch(self):
        layers = (MaxAffineLayer(np.eye(2), np.zeros(2)),)
        with pytest.raises(DimensionMismatch):
            eval_convex_part(layers, np.zeros(3))


class TestStep:
    def test_unforced_equilibrium(self):
        sys_r, _ = redefine_dc(benchmarks.pendulum())
        rng = np.random.default_rng(2)
        for _ in range(10):
            s = sample_uncertainty(sys_r, rng)
            x1 = step(sys_r, [0.0, 0.0], [0.0], s)
            assert np.array_equal(x1, np.zeros(2))

    def test_pendulum_contact_step(self):
        sys_r, _ = redefine_dc(benchmarks.pendulum())
        s = UncertaintySample.from_weights(sys_r, [1, 0, 0, 0])
        x1 = step(sys_r, [0.3, 0.0], [0.0], s)
        # A row 2 gives 0.049 * 0.3 = 0.0147; wall term removes 0.02
        expect = benchmarks.pendulum_direct_step([0.3, 0.0], 0.0, 10.0, 2.0)
        assert np.allclose(x1, [0.3, 0.0147 - 0.02], atol=1e-15)
        assert np.allclose(x1, expect, atol=1e-15)

    def test_hr_contact_case(self):
        sys_r, _ = redefine_dc(benchmarks.human_robot())
        s = UncertaintySample.from_weights(sys_r, [1, 0, 0, 0])
        x1 = step(sys_r, [1.0, 0.0, 3.5], [0.0], s)
        assert np.allclose(x1, [1.0, 0.0, 3.25], atol=1e-15)


class TestNormBounds:
    def test_pendulum(self):
        sys_r, _ = redefine_dc(benchmarks.pendulum())
        cg, ce = norm_bounds(sys_r)
        assert cg == 0.0
        assert abs(ce - 0.1) <= 1e-15

    def test_all_zero_layers(self):
        sys = scalar_system([0.0], [0.0], gamma_slopes=[0.0], eta_slopes=[0.0])
        assert norm_bounds(sys) == (0.0, 0.0)

    def test_identity_layer_frobenius(self):
        vx = UncertaintyVertex((MaxAffineLayer(np.eye(2), np.zeros(2)),), ())
        sys = DCSystem(np.eye(2), np.zeros((2, 1)), [vx],
                       [[-1, 1], [-1, 1]], [[1.0]], np.eye(5))
        cg, ce = norm_bounds(sys)
        assert abs(cg - np.sqrt(2.0)) <= 1e-15
        assert ce == 0.0


class TestSampling:
    def test_vertex_only_unit_vector(self):
        sys = benchmarks.pendulum()
        rng = make_rng(123)
        s = sample_uncertainty(sys, rng, "vertex-only")
        assert sorted(s.weights.tolist()) == [0.0, 0.0, 0.0, 1.0]

    def test_fixed_weights_mean_vertex(self):
        sys_r, _ = redefine_dc(benchmarks.pendulum())
        s = sample_uncertainty(sys_r, 0, "fixed-weights", weights=[0.25] * 4)
        # mean spring 7.5, mean offset parameter 1.6875
        assert abs(s.eta_layers[1].E[1, 0] - 0.01 * 7.5) <= 1e-15
        assert abs(s.eta_layers[1].d[1] - (-0.005 * 1.6875)) <= 1e-15

    def test_bad_fixed_weights(self):
        sys = benchmarks.pendulum()
        with pytest.raises(BadWeights):
            sample_uncertainty(sys, 0, "fixed-weights", weights=[0.5, 0.5, 0.5, -0.5])
        with pytest.raises(BadWeights):
            sample_uncertainty(sys, 0, "fixed-weights", weights=[0.5, 0.5, 0.5, 0.5])

    def test_dirichlet_mean_weight(self):
        sys = benchmarks.pendulum()
        rng = make_rng(7)
        acc = np.zeros(4)
        n = 100_000
        for _ in range(n):
            acc += rng.dirichlet(np.ones(4))
        assert np.max(np.abs(acc / n - 0.25)) <= 0.01

    def test_seed_determinism(self):
        sys = benchmarks.pendulum()
        a = [sample_uncertainty(sys, make_rng(9), "dirichlet-uniform").weights
             for _ in range(1)]
        b = [sample_uncertainty(sys, make_rng(9), "dirichlet-uniform").weights
             for _ in range(1)]
        assert np.array_equal(a[0], b[0])

    def test_realized_layers_are_convex_combination(self):
        sys = benchmarks.pendulum()
        rng = make_rng(11)
        for _ in range(50):
            s = sample_uncertainty(sys, rng)
            assert abs(np.sum(s.weights) - 1.0) <= 1e-12
            for j in range(2):
                E = sum(w * sys.vertices[k].eta_layers[j].E
                        for k, w in enumerate(s.weights))
                assert np.max(np.abs(E - s.eta_layers[j].E)) <= 1e-12


class TestLemma2Properties:
    @pytest.mark.parametrize("name", ["pendulum", "human-robot"])
    def test_difference_preserved(self, name):
        sys = benchmarks.by_name(name)
        sys_r, _ = redefine_dc(sys)
        rng = make_rng(3)
        worst = 0.0
        for _ in range(2000):
            x = rng.uniform(sys.state_box[:, 0], sys.state_box[:, 1])
            w = rng.dirichlet(np.ones(sys.n_vertices))
            s0 = UncertaintySample.from_weights(sys, w)
            s1 = UncertaintySample.from_weights(sys_r, w)
            g0, _ = eval_convex_part(s0.gamma_layers, x)
            e0, _ = eval_convex_part(s0.eta_layers, x)
            g1, _ = eval_convex_part(s1.gamma_layers, x)
            e1, _ = eval_convex_part(s1.eta_layers, x)
            worst = max(worst, np.max(np.abs((g0 - e0) - (g1 - e1))))
        assert worst <= 1e-9

    @pytest.mark.parametrize("name", ["pendulum", "human-robot"])
    def test_zero_at_origin(self, name):
        sys_r, _ = redefine_dc(benchmarks.by_name(name))
        rng = make_rng(4)
        for _ in range(100):
            s = sample_uncertainty(sys_r, rng)
            g, _ = eval_convex_part(s.gamma_layers, np.zeros(sys_r.n))
            e, _ = eval_convex_part(s.eta_layers, np.zeros(sys_r.n))
            assert np.all(g == 0.0) and np.all(e == 0.0)

    @pytest.mark.parametrize("name", ["pendulum", "human-robot"])
    def test_growth_bounds(self, name):
        sys_r, _ = redefine_dc(benchmarks.by_name(name))
        cg, ce = norm_bounds(sys_r)
        rng = make_rng(5)
        for _ in range(2000):
            x = rng.uniform(sys_r.state_box[:, 0], sys_r.state_box[:, 1])
            s = sample_uncertainty(sys_r, rng)
            g, _ = eval_convex_part(s.gamma_layers, x)
            e, _ = eval_convex_part(s.eta_layers, x)
            nx = np.linalg.norm(x)
            assert np.linalg.norm(g) <= cg * nx + 1e-9
            assert np.linalg.norm(e) <= ce * nx + 1e-9


class TestSerialization:
    def test_round_trip(self, tmp_path):
        sys = benchmarks.human_robot()
        path = tmp_path / "hr.json"
        save_system(sys, path)
        back = load_system(path)
        assert system_hash(back) == system_hash(sys)
        assert back.meta["name"] == "human-robot"
        assert np.array_equal(back.A, sys.A)
        assert np.array_equal(back.C, sys.C)

    def test_hash_changes_with_content(self):
        a = benchmarks.pendulum()
        b = a.replace(Q_u=np.array([[1.0 / 100**2]]))
        assert system_hash(a) != system_hash(b)
