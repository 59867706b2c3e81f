import numpy as np
import pytest

from dcpwa import benchmarks
from dcpwa.lifting import build_layout
from dcpwa.model import (UncertaintySample, check_matching, eval_convex_part,
                         make_rng, redefine_dc, sample_uncertainty, step)


class TestPendulum:
    def setup_method(self):
        self.sys = benchmarks.pendulum()

    def test_matrices(self):
        assert np.allclose(self.sys.A, [[1.0, 0.01], [0.049, 1.0]])
        assert np.allclose(self.sys.B, [[0.0], [0.0025]])

    def test_wall_offset_per_vertex(self):
        # -dt * kd / (m l) for vertex (10, 2)
        assert abs(self.sys.vertices[0].eta_layers[1].d[1] + 0.01) <= 1e-15

    def test_observation_shape_and_rows(self):
        assert self.sys.C.shape == (4, 7)
        eye = np.eye(7)
        for r, idx in enumerate([0, 1, 2, 6]):
            assert np.array_equal(self.sys.C[r], eye[idx])

    def test_constraints(self):
        assert np.array_equal(self.sys.state_box, [[-0.5, 0.5], [-2.0, 1.0]])
        assert self.sys.Q_u[0, 0] == 1.0 / 200**2

    def test_defaults_and_matching(self):
        assert self.sys.meta["x0_defaults"] == [[0.18, 0.8], [0.1, 1.0], [0.22, 0.0]]
        assert check_matching(self.sys).ok

    def test_layout_size_matches_observation(self):
        sys_r, _ = redefine_dc(self.sys)
        assert build_layout(sys_r).n_chi == 7


class TestHumanRobot:
    def setup_method(self):
        self.sys = benchmarks.human_robot()

    def test_gamma_first_layer_slopes(self):
        # x_R + dt (v_R - K (x_R - x_P)) at K = 10
        assert np.allclose(self.sys.vertices[0].gamma_layers[0].E[2],
                           [0.9, 0.01, 0.1])

    def test_eta_first_layer_slopes(self):
        assert np.allclose(self.sys.vertices[0].eta_layers[0].E[2],
                           [-0.1, 0.0, 0.1])

    def test_rows_one_two_are_zero(self):
        for vx in self.sys.vertices:
            for ly in vx.gamma_layers + vx.eta_layers:
                assert not np.any(ly.E[:2])
                assert not np.any(ly.d)

    def test_observation_shape_and_rows(self):
        assert self.sys.C.shape == (6, 19)
        eye = np.eye(19)
        for r, idx in enumerate([0, 1, 2, 3, 12, 18]):
            assert np.array_equal(self.sys.C[r], eye[idx])

    def test_layout_size_matches_observation(self):
        sys_r, _ = redefine_dc(self.sys)
        assert build_layout(sys_r).n_chi == 19

    def test_matching_and_origin(self):
        assert check_matching(self.sys).ok
        rng = make_rng(0)
        for _ in range(20):
            s = sample_uncertainty(self.sys, rng)
            g, _ = eval_convex_part(s.gamma_layers, np.zeros(3))
            e, _ = eval_convex_part(s.eta_layers, np.zeros(3))
            assert np.all(g == 0.0) and np.all(e == 0.0)


class TestEquivalence:
    def test_hr_dc_form_matches_direct_model(self):
        sys = benchmarks.human_robot()
        sys_r, _ = redefine_dc(sys)
        rng = make_rng(1)
        worst = 0.0
        for _ in range(10_000):
            x = rng.uniform(-5, 5, 3)
            u = rng.uniform(-50, 50, 1)
            s = sample_uncertainty(sys_r, rng)
            Kbar, Kcbar = (sum(w * np.array(v) for w, v in
                               zip(s.weights, sys.meta["w_vertices"])))
            got = step(sys_r, x, u, s)
            want = benchmarks.human_robot_direct_step(x, u, Kbar, Kcbar)
            worst = max(worst, float(np.max(np.abs(got - want))))
        assert worst <= 1e-12

    def test_pendulum_dc_form_matches_direct_model(self):
        sys = benchmarks.pendulum()
        sys_r, _ = redefine_dc(sys)
        rng = make_rng(2)
        worst = 0.0
        for _ in range(5000):
            x = rng.uniform(sys.state_box[:, 0], sys.state_box[:, 1])
            u = rng.uniform(-200, 200, 1)
            s = sample_uncertainty(sys_r, rng)
            k, kd = (sum(w * np.array(v) for w, v in
                         zip(s.weights, sys.meta["w_vertices"])))
            got = step(sys_r, x, u, s)
            want = benchmarks.pendulum_direct_step(x, u, k, kd)
            worst = max(worst, float(np.max(np.abs(got - want))))
        assert worst <= 1e-12

    def test_hr_payload_never_below_robot(self):
        # inelastic contact: x_P+ >= x_R+ pointwise in the model
        sys_r, _ = redefine_dc(benchmarks.human_robot())
        rng = make_rng(3)
        for _ in range(2000):
            x = rng.uniform(-5, 5, 3)
            x[2] = max(x[2], x[0])
            s = sample_uncertainty(sys_r, rng)
            xn = step(sys_r, x, rng.uniform(-50, 50, 1), s)
            assert xn[2] >= xn[0] - 1e-12
