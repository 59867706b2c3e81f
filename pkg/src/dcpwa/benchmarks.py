"""The two built-in uncertain PWA benchmark systems.

Both are expressed directly in DC form.  Each builder also has a direct
(max/case-split) evaluator of the original dynamics that shares no code
with the DC machinery, used as an independent cross-check.
"""

from __future__ import annotations

import numpy as np

from .model import DCSystem, MaxAffineLayer, UncertaintyVertex

__all__ = [
    "pendulum",
    "pendulum_direct_step",
    "human_robot",
    "human_robot_direct_step",
    "by_name",
]


def pendulum(dt=0.01, m=1.0, length=2.0, g=9.8):
    """Inverted pendulum next to a soft wall with uncertain stiffness/offset.

    State x = [angle from vertical, angular rate].  The wall exerts a
    restoring moment max(0, k*(l*theta - d)) scaled by dt/(m*l); the pair
    (k, k*d) ranges over the convex hull of four vertices.  The wall term
    enters as the eta part; gamma is empty.
    """
    A = np.array([[1.0, dt], [dt * g / length, 1.0]])
    B = np.array([[0.0], [dt / (m * length**2)]])

    w_vertices = [(10.0, 2.0), (10.0, 2.5), (5.0, 1.0), (5.0, 1.25)]
    vertices = []
    for k, kd in w_vertices:
        eta1 = MaxAffineLayer(np.zeros((2, 2)), np.zeros(2))
        E2 = np.zeros((2, 2))
        E2[1, 0] = dt * k * length / (m * length)
        d2 = np.array([0.0, -dt * kd / (m * length)])
        eta2 = MaxAffineLayer(E2, d2)
        vertices.append(UncertaintyVertex((), (eta1, eta2)))

    state_box = np.array([[-0.5, 0.5], [-2.0, 1.0]])
    u_max = 200.0
    Q_u = np.array([[1.0 / u_max**2]])

    # observe [1, theta, theta_dot, second component of the final eta layer]
    n_chi = 1 + 2 * (1 + 0 + 2)
    C = np.eye(n_chi)[[0, 1, 2, 6], :]

    meta = {
        "name": "pendulum",
        "dt": dt,
        "params": {"m": m, "l": length, "g": g, "u_max": u_max},
        "w_vertices": [list(w) for w in w_vertices],
        "x0_defaults": [[0.18, 0.8], [0.1, 1.0], [0.22, 0.0]],
    }
    return DCSystem(A, B, vertices, state_box, Q_u, C, meta=meta)


def pendulum_direct_step(x, u, k, kd, dt=0.01, m=1.0, length=2.0, g=9.8):
    """Original pendulum update, evaluated without the layer machinery."""
    theta, theta_dot = float(x[0]), float(x[1])
    u = float(np.atleast_1d(u)[0])
    wall = max(0.0, k * length * theta - kd)
    x1 = theta + dt * theta_dot
    x2 = dt * g / length * theta + theta_dot + dt / (m * length**2) * u \
        - dt / (m * length) * wall
    return np.array([x1, x2])


def human_robot(dt=0.01, u_max=50.0, box_half_width=5.0):
    """Robot and human jointly transporting a payload, inelastic contact.

    State x = [x_R, v_R, x_P] (robot position/velocity, payload position).
    The human imparts velocity K*(x_R - x_P) when c*x_P > x_R and
    K*(c - 1)*x_P otherwise, with (K, K*c) in the hull of four vertices;
    the payload position additionally saturates at the robot position
    (inelastic contact).  Rewriting the position update through
    max(a, b + c) = max(a - b, c) + b yields three gamma and two eta
    layers, all supported on the third state dimension.

    The paper-style model fixes dt and the uncertainty set; the state box
    and input bound are audit defaults, not model data.
    """
    A = np.array([[1.0, dt, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    B = np.array([[0.0], [dt], [0.0]])

    w_vertices = [(10.0, 6.0), (5.0, 3.0), (10.0, 8.0), (5.0, 4.0)]
    vertices = []
    for K, Kc in w_vertices:
        def row3(vals):
            E = np.zeros((3, 3))
            E[2, :] = vals
            return E

        zero3 = np.zeros(3)
        g1 = MaxAffineLayer(row3([1.0 - dt * K, dt, dt * K]), zero3)
        g2 = MaxAffineLayer(row3([1.0, dt, dt * (K - Kc)]), zero3)
        g3 = MaxAffineLayer(row3([0.0, 0.0, 1.0]), zero3)
        e1 = MaxAffineLayer(row3([-dt * K, 0.0, dt * K]), zero3)
        e2 = MaxAffineLayer(row3([0.0, 0.0, dt * (K - Kc)]), zero3)
        vertices.append(UncertaintyVertex((g1, g2, g3), (e1, e2)))

    state_box = np.array([[-box_half_width, box_half_width]] * 3)
    Q_u = np.array([[1.0 / u_max**2]])

    # observe [1, x, third component of final gamma layer, third of final eta]
    n_chi = 1 + 3 * (1 + 3 + 2)
    C = np.eye(n_chi)[[0, 1, 2, 3, 12, 18], :]

    meta = {
        "name": "human-robot",
        "dt": dt,
        "params": {"u_max": u_max},
        "w_vertices": [list(w) for w in w_vertices],
        "x0_defaults": [[1.0, 0.0, 3.5], [-3.0, -2.0, 1.5]],
        "invariant": "xr_le_xp",
    }
    return DCSystem(A, B, vertices, state_box, Q_u, C, meta=meta)


def human_robot_direct_step(x, u, K, Kc, dt=0.01):
    """Original human-robot update with the explicit human case split."""
    x_r, v_r, x_p = float(x[0]), float(x[1]), float(x[2])
    u = float(np.atleast_1d(u)[0])
    c = Kc / K if K != 0.0 else 0.0
    if c * x_p > x_r:
        lam = K * (x_r - x_p)
    else:
        lam = K * (c - 1.0) * x_p
    x_r_next = x_r + dt * v_r
    v_r_next = v_r + dt * u
    x_p_next = max(x_r + dt * v_r, x_p + dt * lam)
    return np.array([x_r_next, v_r_next, x_p_next])


def by_name(name):
    builders = {"pendulum": pendulum, "human-robot": human_robot}
    if name not in builders:
        raise KeyError(f"unknown benchmark {name!r}; choose from {sorted(builders)}")
    return builders[name]()
