"""Closed-loop rollout and Monte-Carlo certificate auditing.

The audit draws random (state, uncertainty-now, uncertainty-next)
triples plus an exhaustive vertex-pair sweep on a deterministic state
grid, and checks the three certified statements pointwise: Lyapunov
decrease at rate rho3, the two-sided growth bounds rho1/rho2, and the
input ellipsoid.  Violations are reported as signed slacks; witnesses
are kept for the worst case of each kind.
"""

from __future__ import annotations

import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DCPWAError, DimensionMismatch
from .lifting import build_chi, build_layout
from .model import (DCSystem, UncertaintySample, make_rng, redefine_dc,
                    sample_uncertainty, step, system_hash)
from .synthesis import ControllerArtifact, eval_V, eval_policy

__all__ = [
    "TrajectoryRecord",
    "AuditReport",
    "rollout",
    "audit",
    "export_csv",
    "read_csv",
    "plot_svg",
    "envelope_bound",
]


class ArtifactMismatch(DCPWAError):
    """The artifact does not certify the given system."""


def _prepare(sys: DCSystem, artifact: ControllerArtifact):
    sys_r, _ = redefine_dc(sys)
    if artifact.system_hash != system_hash(sys_r):
        raise ArtifactMismatch("artifact system hash does not match this system")
    return sys_r, build_layout(sys_r)


@dataclass
class TrajectoryRecord:
    """One closed-loop run; u[-1] is the policy value at the final state,
    never applied."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    weights: np.ndarray
    lam: np.ndarray
    V: np.ndarray
    box_flag: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return self.x.shape[0] - 1


def rollout(sys: DCSystem, artifact: ControllerArtifact, x0, horizon, seed,
            strategy="dirichlet-uniform", fixed_weights=None) -> TrajectoryRecord:
    """Simulate u = K C chi under i.i.d. uncertainty; deterministic per seed."""
    sys_r, layout = _prepare(sys, artifact)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != sys_r.n:
        raise DimensionMismatch(f"x0 has dimension {x0.shape[0]}, expected {sys_r.n}")

    rng = make_rng(seed)
    h = int(horizon)
    n, m, n_v = sys_r.n, sys_r.m, sys_r.n_vertices
    obs_tail = max(0, sys_r.p - (1 + n))

    xs = np.zeros((h + 1, n))
    us = np.zeros((h + 1, m))
    vs = np.zeros((h + 1, n_v))
    lams = np.zeros((h + 1, obs_tail))
    Vs = np.zeros(h + 1)
    flags = np.zeros(h + 1, dtype=bool)

    x = x0
    for t in range(h + 1):
        sample = sample_uncertainty(sys_r, rng, strategy, weights=fixed_weights)
        chi = build_chi(sys_r, layout, x, sample)
        y = sys_r.C @ chi
        u = artifact.K @ y
        xs[t] = x
        us[t] = u
        vs[t] = sample.weights
        if obs_tail:
            lams[t] = y[1 + n:]
        Vs[t] = eval_V(artifact, sys_r, layout, x, sample)
        flags[t] = not sys_r.contains_state(x)
        if t < h:
            x = step(sys_r, x, u, sample)

    return TrajectoryRecord(
        t=np.arange(h + 1), x=xs, u=us, weights=vs, lam=lams, V=Vs,
        box_flag=flags,
        meta={"seed": int(seed), "strategy": strategy, "horizon": h,
              "x0": x0.tolist()},
    )


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

@dataclass
class AuditReport:
    samples: int
    max_decrease_violation: float
    max_lower_violation: float
    max_upper_violation: float
    max_input_violation: float
    witnesses: dict
    tol: float

    @property
    def ok(self):
        return max(self.max_decrease_violation, self.max_lower_violation,
                   self.max_upper_violation, self.max_input_violation) <= self.tol

    def summary(self):
        state = "pass" if self.ok else "FAIL"
        return (
            f"audit {state}: {self.samples} checks; "
            f"decrease {self.max_decrease_violation:.3e}, "
            f"lower {self.max_lower_violation:.3e}, "
            f"upper {self.max_upper_violation:.3e}, "
            f"input {self.max_input_violation:.3e} (tol {self.tol:.1e})"
        )


def _uniform_state(sys_r, rng):
    lo, hi = sys_r.state_box[:, 0], sys_r.state_box[:, 1]
    for _ in range(1000):
        x = lo + (hi - lo) * rng.random(sys_r.n)
        if sys_r.meta.get("invariant") == "xr_le_xp" and x[0] > x[2]:
            continue
        return x
    return lo + (hi - lo) * rng.random(sys_r.n)


def _check_triple(sys_r, layout, artifact, x, s_now, s_next, worst):
    V_now = eval_V(artifact, sys_r, layout, x, s_now)
    u = eval_policy(artifact, sys_r, layout, x, s_now)
    x_next = step(sys_r, x, u, s_now)
    V_next = eval_V(artifact, sys_r, layout, x_next, s_next)
    nx2 = float(x @ x)

    checks = {
        "decrease": V_next - artifact.rho3 * V_now,
        "lower": artifact.rho1 * nx2 - V_now,
        "upper": V_now - artifact.rho2 * nx2,
        "input": float(u @ sys_r.Q_u @ u) - 1.0,
    }
    for key, val in checks.items():
        if val > worst[key][0]:
            worst[key] = (val, {"x": x.tolist(),
                                "v_now": s_now.weights.tolist(),
                                "v_next": s_next.weights.tolist()})
    return 1


def _grid_states(sys_r, per_dim, cap):
    n = sys_r.n
    g = per_dim
    while g > 2 and g**n > cap:
        g -= 1
    axes = [np.linspace(lo, hi, g) for lo, hi in sys_r.state_box]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    if sys_r.meta.get("invariant") == "xr_le_xp":
        pts = pts[pts[:, 0] <= pts[:, 2]]
    return pts


def audit(sys: DCSystem, artifact: ControllerArtifact, n_samples, seed,
          strategies=("dirichlet-uniform", "vertex-only"), grid_per_dim=21,
          grid_cap=10_000, tol=1e-7, threads=None) -> AuditReport:
    """Sample-based check of the certified decrease/bound/input statements.

    Random triples per strategy plus every (vertex-now, vertex-next) pair
    on a deterministic state grid.  Batches run on a thread pool sized by
    ``threads`` or DCPWA_THREADS; worst-case aggregation is order
    independent.
    """
    sys_r, layout = _prepare(sys, artifact)
    if threads is None:
        threads = int(os.environ.get("DCPWA_THREADS", "1"))
    worst = {k: (-np.inf, None) for k in ("decrease", "lower", "upper", "input")}
    total = 0

    def run_batch(batch_seed, count, strategy):
        local = {k: (-np.inf, None) for k in worst}
        rng = make_rng(seed, stream=batch_seed)
        done = 0
        for _ in range(count):
            x = _uniform_state(sys_r, rng)
            s_now = sample_uncertainty(sys_r, rng, strategy)
            s_next = sample_uncertainty(sys_r, rng, strategy)
            done += _check_triple(sys_r, layout, artifact, x, s_now, s_next, local)
        return done, local

    jobs = []
    n_batches = max(1, min(threads * 4, 32))
    for s_idx, strategy in enumerate(strategies):
        per = int(np.ceil(n_samples / n_batches))
        remaining = int(n_samples)
        for bi in range(n_batches):
            count = min(per, remaining)
            if count <= 0:
                break
            remaining -= count
            jobs.append((1000 * (s_idx + 1) + bi, count, strategy))

    def merge(local):
        nonlocal total
        done, loc = local
        total += done
        for k, (val, wit) in loc.items():
            if val > worst[k][0]:
                worst[k] = (val, wit)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for result in pool.map(lambda j: run_batch(*j), jobs):
                merge(result)
    else:
        for job in jobs:
            merge(run_batch(*job))

    # exhaustive vertex pairs on the grid
    pts = _grid_states(sys_r, grid_per_dim, grid_cap)
    vertex_samples = [
        UncertaintySample.from_weights(sys_r, np.eye(sys_r.n_vertices)[k])
        for k in range(sys_r.n_vertices)
    ]
    for x in pts:
        for s_now in vertex_samples:
            for s_next in vertex_samples:
                total += _check_triple(sys_r, layout, artifact, x, s_now,
                                       s_next, worst)

    return AuditReport(
        samples=total,
        max_decrease_violation=float(worst["decrease"][0]),
        max_lower_violation=float(worst["lower"][0]),
        max_upper_violation=float(worst["upper"][0]),
        max_input_violation=float(worst["input"][0]),
        witnesses={k: v[1] for k, v in worst.items()},
        tol=tol,
    )


def envelope_bound(artifact: ControllerArtifact, t, x0_norm):
    """Certified decay envelope sqrt(rho2/rho1) rho3^(t/2) ||x0||."""
    return np.sqrt(artifact.rho2 / artifact.rho1) \
        * artifact.rho3 ** (np.asarray(t) / 2.0) * x0_norm


# ---------------------------------------------------------------------------
# CSV / SVG output
# ---------------------------------------------------------------------------

def _columns(record: TrajectoryRecord):
    n = record.x.shape[1]
    m = record.u.shape[1]
    n_v = record.weights.shape[1]
    r = record.lam.shape[1]
    header = (["t"]
              + [f"x_{i + 1}" for i in range(n)]
              + [f"u_{i + 1}" for i in range(m)]
              + [f"v_{i + 1}" for i in range(n_v)]
              + (["lambda"] if r == 1 else [f"lambda_{i + 1}" for i in range(r)])
              + ["V", "box_flag"])
    return header


def export_csv(record: TrajectoryRecord) -> str:
    out = io.StringIO()
    out.write(",".join(_columns(record)) + "\n")
    for i in range(record.x.shape[0]):
        row = [str(int(record.t[i]))]
        row += [repr(float(v)) for v in record.x[i]]
        row += [repr(float(v)) for v in record.u[i]]
        row += [repr(float(v)) for v in record.weights[i]]
        row += [repr(float(v)) for v in record.lam[i]]
        row += [repr(float(record.V[i])), str(int(record.box_flag[i]))]
        out.write(",".join(row) + "\n")
    return out.getvalue()


def read_csv(text: str) -> TrajectoryRecord:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")

    def count(prefix):
        return sum(1 for h in header if h == prefix or h.startswith(prefix + "_"))

    n, m, n_v = count("x"), count("u"), count("v")
    r = count("lambda")
    rows = [ln.split(",") for ln in lines[1:]]
    data = np.array([[float(tok) for tok in row] for row in rows])
    c = 1
    x = data[:, c:c + n]; c += n
    u = data[:, c:c + m]; c += m
    w = data[:, c:c + n_v]; c += n_v
    lam = data[:, c:c + r]; c += r
    V = data[:, c]; c += 1
    flag = data[:, c].astype(bool)
    return TrajectoryRecord(t=data[:, 0].astype(int), x=x, u=u, weights=w,
                            lam=lam, V=V, box_flag=flag)


def plot_svg(record: TrajectoryRecord, path):
    """State / input / observed-lambda traces as one SVG figure."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    for i in range(record.x.shape[1]):
        axes[0].plot(record.t, record.x[:, i], label=f"x_{i + 1}")
    axes[0].set_ylabel("state")
    axes[0].legend(loc="best", fontsize=8)
    for i in range(record.u.shape[1]):
        axes[1].plot(record.t, record.u[:, i], label=f"u_{i + 1}")
    axes[1].set_ylabel("input")
    if record.lam.shape[1]:
        for i in range(record.lam.shape[1]):
            axes[2].plot(record.t, record.lam[:, i])
        axes[2].set_ylabel("observed lambda")
    else:
        axes[2].plot(record.t, record.V)
        axes[2].set_ylabel("V")
    axes[2].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
