"""Uncertain PWA systems in difference-of-convex form.

A system is

    x(t+1) = A x(t) + gamma(t, x(t)) - eta(t, x(t)) + B u(t)

where gamma and eta are elementwise max-affine functions whose affine
pieces (slope matrix, offset vector) are drawn, i.i.d. in time, from the
convex hull of a finite set of vertices.  Both convex parts share the
piece counts alpha (gamma) and beta (eta) across vertices; an empty layer
list represents a convex part that is identically zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BadWeights, DimensionMismatch, MatchingViolation

__all__ = [
    "MaxAffineLayer",
    "UncertaintyVertex",
    "DCSystem",
    "UncertaintySample",
    "MatchingReport",
    "check_matching",
    "redefine_dc",
    "eval_convex_part",
    "step",
    "norm_bounds",
    "sample_uncertainty",
    "make_rng",
    "system_to_dict",
    "system_from_dict",
    "save_system",
    "load_system",
    "system_hash",
]

MATCHING_TOL = 1e-12


def _as_matrix(M, rows, cols, name):
    M = np.asarray(M, dtype=float)
    if M.shape != (rows, cols):
        raise DimensionMismatch(f"{name}: expected shape {(rows, cols)}, got {M.shape}")
    return M


@dataclass(frozen=True)
class MaxAffineLayer:
    """One affine piece (slope E, offset d) of a nested max-affine function."""

    E: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        E = np.atleast_2d(np.asarray(self.E, dtype=float))
        d = np.asarray(self.d, dtype=float).reshape(-1)
        if E.shape[0] != d.shape[0]:
            raise DimensionMismatch(
                f"layer slope has {E.shape[0]} rows but offset has {d.shape[0]}"
            )
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "d", d)

    @property
    def n(self):
        return self.d.shape[0]

    def affine(self, x):
        return self.E @ x + self.d


@dataclass(frozen=True)
class UncertaintyVertex:
    """One vertex of the uncertainty polytope: a full set of gamma/eta pieces."""

    gamma_layers: tuple
    eta_layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "gamma_layers", tuple(self.gamma_layers))
        object.__setattr__(self, "eta_layers", tuple(self.eta_layers))
        dims = {ly.n for ly in self.gamma_layers + self.eta_layers}
        if len(dims) > 1:
            raise DimensionMismatch(f"layers disagree on state dimension: {sorted(dims)}")

    @property
    def alpha(self):
        return len(self.gamma_layers)

    @property
    def beta(self):
        return len(self.eta_layers)


class DCSystem:
    """Uncertain DC-form PWA system with constraint sets and observation map.

    Parameters
    ----------
    A, B : drift and input matrices, shapes (n, n) and (n, m).
    vertices : list of UncertaintyVertex, all with the same (alpha, beta).
    state_box : (n, 2) array of [low, high] per state dimension.
    Q_u : symmetric positive-definite (m, m) matrix; the admissible input
        set is {u : u^T Q_u u <= 1}.
    C : (p, N_chi) observation matrix acting on the lifted vector
        [1, x, gamma layers, eta layers]; N_chi = 1 + n(1 + alpha + beta).
    meta : free-form metadata (name, dt, default initial states, ...).
    """

    def __init__(self, A, B, vertices, state_box, Q_u, C, meta=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(n, 1)
        if B.shape[0] != n:
            raise DimensionMismatch(f"B has {B.shape[0]} rows, expected {n}")
        m = B.shape[1]

        vertices = tuple(vertices)
        if not vertices:
            raise DimensionMismatch("at least one uncertainty vertex is required")
        alpha = vertices[0].alpha
        beta = vertices[0].beta
        for k, v in enumerate(vertices):
            if (v.alpha, v.beta) != (alpha, beta):
                raise DimensionMismatch(
                    f"vertex {k} has (alpha, beta)=({v.alpha}, {v.beta}), "
                    f"expected ({alpha}, {beta})"
                )
            for ly in v.gamma_layers + v.eta_layers:
                if ly.n != n:
                    raise DimensionMismatch("layer dimension differs from state dimension")
                if ly.E.shape != (n, n):
                    raise DimensionMismatch(f"layer slope must be {(n, n)}, got {ly.E.shape}")

        state_box = _as_matrix(state_box, n, 2, "state_box")
        if np.any(state_box[:, 0] > state_box[:, 1]):
            raise DimensionMismatch("state_box has low > high in some dimension")

        Q_u = _as_matrix(Q_u, m, m, "Q_u")
        if not np.allclose(Q_u, Q_u.T, atol=1e-12):
            raise DimensionMismatch("Q_u must be symmetric")
        if np.min(np.linalg.eigvalsh(Q_u)) <= 0:
            raise DimensionMismatch("Q_u must be positive definite")

        n_chi = 1 + n * (1 + alpha + beta)
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if C.shape[1] != n_chi:
            raise DimensionMismatch(f"C has {C.shape[1]} columns, expected {n_chi}")

        self.A = A
        self.B = B
        self.vertices = vertices
        self.state_box = state_box
        self.Q_u = Q_u
        self.C = C
        self.meta = dict(meta or {})

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def alpha(self):
        return self.vertices[0].alpha

    @property
    def beta(self):
        return self.vertices[0].beta

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_chi(self):
        return 1 + self.n * (1 + self.alpha + self.beta)

    @property
    def p(self):
        return self.C.shape[0]

    def contains_state(self, x, inflation=0.0):
        x = np.asarray(x, dtype=float).reshape(-1)
        lo = self.state_box[:, 0] - inflation
        hi = self.state_box[:, 1] + inflation
        return bool(np.all(x >= lo) and np.all(x <= hi))

    def replace(self, **kwargs):
        fields = dict(
            A=self.A, B=self.B, vertices=self.vertices,
            state_box=self.state_box, Q_u=self.Q_u, C=self.C, meta=self.meta,
        )
        fields.update(kwargs)
        return DCSystem(**fields)


@dataclass(frozen=True)
class UncertaintySample:
    """A realized convex combination of the uncertainty vertices."""

    weights: np.ndarray
    gamma_layers: tuple
    eta_layers: tuple

    @staticmethod
    def from_weights(sys: DCSystem, weights) -> "UncertaintySample":
        v = np.asarray(weights, dtype=float).reshape(-1)
        if v.shape[0] != sys.n_vertices:
            raise BadWeights(f"expected {sys.n_vertices} weights, got {v.shape[0]}")
        if np.any(v < -1e-12) or abs(float(np.sum(v)) - 1.0) > 1e-12:
            raise BadWeights(f"weights must be nonnegative and sum to 1, got {v}")
        v = np.clip(v, 0.0, None)
        gamma = _combine_layers([vx.gamma_layers for vx in sys.vertices], v)
        eta = _combine_layers([vx.eta_layers for vx in sys.vertices], v)
        return UncertaintySample(weights=v, gamma_layers=gamma, eta_layers=eta)


def _combine_layers(per_vertex, weights):
    if not per_vertex or not per_vertex[0]:
        return ()
    out = []
    for j in range(len(per_vertex[0])):
        E = sum(w * per_vertex[k][j].E for k, w in enumerate(weights))
        d = sum(w * per_vertex[k][j].d for k, w in enumerate(weights))
        out.append(MaxAffineLayer(E, d))
    return tuple(out)


# ---------------------------------------------------------------------------
# matching condition and DC redefinition
# ---------------------------------------------------------------------------

@dataclass
class MatchingReport:
    """Per-vertex, per-dimension agreement of the two offset maxima."""

    ok: bool
    agrees: np.ndarray        # (n_V, n) bool
    gamma_max: np.ndarray     # (n_V, n) max_j d_j per dimension (0 if alpha = 0)
    eta_max: np.ndarray       # (n_V, n) max_l f_l per dimension (0 if beta = 0)

    @property
    def d_star(self):
        # only meaningful when ok; defined as the common offset maximum
        return self.gamma_max if self.gamma_max.size else self.eta_max


def _offset_max(layers, n):
    if not layers:
        return np.zeros(n)
    return np.max(np.stack([ly.d for ly in layers]), axis=0)


def check_matching(sys: DCSystem, tol: float = MATCHING_TOL) -> MatchingReport:
    """Check that max_j d_j^k = max_l f_l^k per vertex and dimension.

    An empty layer stack contributes an offset maximum of zero, which is
    consistent with that convex part being identically zero.
    """
    n, n_v = sys.n, sys.n_vertices
    gmax = np.zeros((n_v, n))
    emax = np.zeros((n_v, n))
    for k, vx in enumerate(sys.vertices):
        gmax[k] = _offset_max(vx.gamma_layers, n)
        emax[k] = _offset_max(vx.eta_layers, n)
    agrees = np.abs(gmax - emax) <= tol
    return MatchingReport(ok=bool(np.all(agrees)), agrees=agrees,
                          gamma_max=gmax, eta_max=emax)


def redefine_dc(sys: DCSystem):
    """Shift every vertex's offsets by the common offset maximum d*.

    Returns (shifted system, d_star) with d_star of shape (n_V, n).  The
    shifted offsets are all <= 0, both convex parts vanish at the origin
    for every vertex, and gamma - eta is unchanged.
    """
    report = check_matching(sys)
    if not report.ok:
        bad = np.argwhere(~report.agrees)
        k, i = bad[0]
        raise MatchingViolation(
            f"offset maxima disagree at vertex {k}, dimension {i}: "
            f"{report.gamma_max[k, i]} vs {report.eta_max[k, i]}"
        )
    d_star = report.gamma_max if sys.alpha > 0 else report.eta_max
    new_vertices = []
    for k, vx in enumerate(sys.vertices):
        shift = d_star[k]
        g = tuple(MaxAffineLayer(ly.E, ly.d - shift) for ly in vx.gamma_layers)
        e = tuple(MaxAffineLayer(ly.E, ly.d - shift) for ly in vx.eta_layers)
        new_vertices.append(UncertaintyVertex(g, e))
    return sys.replace(vertices=tuple(new_vertices)), d_star


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def eval_convex_part(layers, x):
    """Evaluate a nested max-affine stack at x.

    Returns (value, layer_values) where layer_values[j] is the running
    elementwise maximum of pieces 0..j and value is the final one.  An
    empty stack evaluates to the zero vector with an empty layer list.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if not layers:
        return np.zeros(x.shape[0]), []
    if layers[0].E.shape[1] != x.shape[0]:
        raise DimensionMismatch(
            f"layer expects state dimension {layers[0].E.shape[1]}, got {x.shape[0]}"
        )
    running = layers[0].affine(x)
    values = [running]
    for ly in layers[1:]:
        running = np.maximum(running, ly.affine(x))
        values.append(running)
    return values[-1], values


def step(sys: DCSystem, x, u, sample: UncertaintySample, box_inflation=np.inf):
    """One closed-form update x+ = A x + gamma(x) - eta(x) + B u.

    The realized gamma/eta come from the sample's convex combination of
    vertex layers.  States outside the (inflated) state box are allowed;
    callers that care flag the violation themselves.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(-1)
    if x.shape[0] != sys.n:
        raise DimensionMismatch(f"state has dimension {x.shape[0]}, expected {sys.n}")
    if u.shape[0] != sys.m:
        raise DimensionMismatch(f"input has dimension {u.shape[0]}, expected {sys.m}")
    if np.isfinite(box_inflation) and not sys.contains_state(x, inflation=box_inflation):
        raise DimensionMismatch(f"state {x} outside inflated state box")
    gamma, _ = eval_convex_part(sample.gamma_layers, x)
    eta, _ = eval_convex_part(sample.eta_layers, x)
    return sys.A @ x + gamma - eta + sys.B @ u


def norm_bounds(sys: DCSystem):
    """Frobenius-norm growth constants (C_gamma, C_eta) of the two parts.

    C_gamma is the largest Frobenius norm of any gamma slope matrix over
    all vertices and layers (0 for an empty stack); C_eta likewise.
    """
    def fmax(select):
        norms = [np.linalg.norm(ly.E) for vx in sys.vertices for ly in select(vx)]
        return float(max(norms)) if norms else 0.0

    return fmax(lambda v: v.gamma_layers), fmax(lambda v: v.eta_layers)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def make_rng(seed, stream=0):
    """Deterministic generator; distinct streams from one master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


def sample_uncertainty(sys: DCSystem, rng, strategy="dirichlet-uniform",
                       weights=None) -> UncertaintySample:
    """Draw one realization of the uncertainty.

    strategy:
      "dirichlet-uniform" -- weights ~ Dirichlet(1, ..., 1) (uniform on the simplex)
      "vertex-only"       -- a uniformly random vertex (weights are a unit vector)
      "fixed-weights"     -- the given weights, validated against the simplex

    ``rng`` may be a numpy Generator or an integer seed.
    """
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(rng)
    n_v = sys.n_vertices
    if strategy == "dirichlet-uniform":
        v = rng.dirichlet(np.ones(n_v))
        v = v / np.sum(v)
    elif strategy == "vertex-only":
        v = np.zeros(n_v)
        v[rng.integers(n_v)] = 1.0
    elif strategy == "fixed-weights":
        if weights is None:
            raise BadWeights("fixed-weights strategy requires explicit weights")
        v = np.asarray(weights, dtype=float)
    else:
        raise BadWeights(f"unknown sampling strategy {strategy!r}")
    return UncertaintySample.from_weights(sys, v)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _layer_to_dict(ly: MaxAffineLayer):
    return {"E": ly.E.tolist(), "d": ly.d.tolist()}


def _layer_from_dict(obj):
    return MaxAffineLayer(np.array(obj["E"], dtype=float), np.array(obj["d"], dtype=float))


def system_to_dict(sys: DCSystem) -> dict:
    return {
        "n": sys.n,
        "m": sys.m,
        "A": sys.A.tolist(),
        "B": sys.B.tolist(),
        "vertices": [
            {
                "gamma": [_layer_to_dict(ly) for ly in vx.gamma_layers],
                "eta": [_layer_to_dict(ly) for ly in vx.eta_layers],
            }
            for vx in sys.vertices
        ],
        "state_box": sys.state_box.tolist(),
        "Q_u": sys.Q_u.tolist(),
        "C": sys.C.tolist(),
        "meta": sys.meta,
    }


def system_from_dict(obj: dict) -> DCSystem:
    vertices = [
        UncertaintyVertex(
            tuple(_layer_from_dict(d) for d in vx["gamma"]),
            tuple(_layer_from_dict(d) for d in vx["eta"]),
        )
        for vx in obj["vertices"]
    ]
    return DCSystem(
        A=np.array(obj["A"], dtype=float),
        B=np.array(obj["B"], dtype=float),
        vertices=vertices,
        state_box=np.array(obj["state_box"], dtype=float),
        Q_u=np.array(obj["Q_u"], dtype=float),
        C=np.array(obj["C"], dtype=float),
        meta=obj.get("meta", {}),
    )


def save_system(sys: DCSystem, path):
    with open(path, "w") as fh:
        json.dump(system_to_dict(sys), fh, indent=2)
        fh.write("\n")


def load_system(path) -> DCSystem:
    with open(path) as fh:
        return system_from_dict(json.load(fh))


def system_hash(sys: DCSystem) -> str:
    """Stable content hash used to tie controller artifacts to a system."""
    payload = json.dumps(system_to_dict(sys), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()
