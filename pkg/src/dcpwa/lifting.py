"""Lifted representation of the DC dynamics and its graph certificates.

The lifted vector stacks the constant 1, the state, and every nested-max
layer value of both convex parts:

    chi(t, x)  = [1, x, g_1(t,x), ..., g_a(t,x), e_1(t,x), ..., e_b(t,x)]
    chi+(t, x) = [chi(t, x), g_1(t+1,x+), ..., e_b(t+1,x+)]

with x+ the closed-loop next state.  Every selection and residual matrix
used by the certificate LMIs is an exact sparse selection or difference
on these coordinates, built here once per system.

Each layer value g_j satisfies, relative to its predecessor, two vector
inequalities and one scalar complementarity equality; weighting those by
a nonnegative matrix M and a free diagonal D and summing yields quadratic
forms that vanish or are nonnegative on every true lift.  That is the
relaxation the synthesis module consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadMultiplier, DimensionMismatch
from .model import DCSystem, UncertaintySample, eval_convex_part, step

__all__ = [
    "LiftedLayout",
    "GraphMatrices",
    "build_layout",
    "build_chi",
    "build_chi_plus",
    "build_graph_matrices",
    "check_membership",
    "check_sprocedure",
    "MembershipReport",
]


@dataclass(frozen=True)
class LiftedLayout:
    """Index bookkeeping for chi and chi+."""

    n: int
    alpha: int
    beta: int

    @property
    def n_chi(self):
        return 1 + self.n * (1 + self.alpha + self.beta)

    @property
    def n_chi_plus(self):
        return self.n_chi + self.n * (self.alpha + self.beta)

    @property
    def n_lam(self):
        # size of [1, x, gamma, eta]; also the side of the Lyapunov matrix
        return 1 + 3 * self.n

    @property
    def d_y(self):
        return (1 + 3 * self.n) + 2 * self.n * (self.alpha + self.beta)

    @property
    def x_slice(self):
        return slice(1, 1 + self.n)

    def gamma_slice(self, j):
        if not 0 <= j < self.alpha:
            raise IndexError(f"gamma layer {j} out of range")
        start = 1 + self.n * (1 + j)
        return slice(start, start + self.n)

    def eta_slice(self, l):
        if not 0 <= l < self.beta:
            raise IndexError(f"eta layer {l} out of range")
        start = 1 + self.n * (1 + self.alpha + l)
        return slice(start, start + self.n)

    def gamma_plus_slice(self, j):
        if not 0 <= j < self.alpha:
            raise IndexError(f"gamma layer {j} out of range")
        start = self.n_chi + self.n * j
        return slice(start, start + self.n)

    def eta_plus_slice(self, l):
        if not 0 <= l < self.beta:
            raise IndexError(f"eta layer {l} out of range")
        start = self.n_chi + self.n * (self.alpha + l)
        return slice(start, start + self.n)


def build_layout(sys: DCSystem) -> LiftedLayout:
    return LiftedLayout(n=sys.n, alpha=sys.alpha, beta=sys.beta)


def build_chi(sys: DCSystem, layout: LiftedLayout, x, sample: UncertaintySample):
    """Lift a state under a realized uncertainty sample."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != layout.n:
        raise DimensionMismatch(f"state has dimension {x.shape[0]}, expected {layout.n}")
    chi = np.zeros(layout.n_chi)
    chi[0] = 1.0
    chi[layout.x_slice] = x
    _, gvals = eval_convex_part(sample.gamma_layers, x)
    for j, val in enumerate(gvals):
        chi[layout.gamma_slice(j)] = val
    _, evals = eval_convex_part(sample.eta_layers, x)
    for l, val in enumerate(evals):
        chi[layout.eta_slice(l)] = val
    return chi


def build_chi_plus(sys: DCSystem, layout: LiftedLayout, x, u,
                   sample_t: UncertaintySample, sample_t1: UncertaintySample):
    """Lift one transition: returns (chi, x_plus, chi_plus).

    chi is built at (x, sample_t); x_plus applies the given input under
    sample_t; the appended blocks of chi_plus hold the layer values of
    sample_t1 at x_plus.
    """
    chi = build_chi(sys, layout, x, sample_t)
    x_plus = step(sys, x, u, sample_t)
    chi_plus = np.zeros(layout.n_chi_plus)
    chi_plus[: layout.n_chi] = chi
    _, gvals = eval_convex_part(sample_t1.gamma_layers, x_plus)
    for j, val in enumerate(gvals):
        chi_plus[layout.gamma_plus_slice(j)] = val
    _, evals = eval_convex_part(sample_t1.eta_layers, x_plus)
    for l, val in enumerate(evals):
        chi_plus[layout.eta_plus_slice(l)] = val
    return chi, x_plus, chi_plus


@dataclass
class GraphMatrices:
    """All constant selection/difference/residual matrices of one system.

    Conventions:
      * S selects chi out of chi+.
      * S_lambda maps chi to [1, x, gamma_final, eta_final]; when a convex
        part is empty its rows are zero (the part is the zero function).
      * The first-layer difference selectors G_gamma[0] / G_eta[0] map chi
        to the all-ones vector: the first layer carries an equality
        constraint, and pairing ones with its residual keeps multiplier
        dimensions uniform across layers.
      * G_gamma_k[j][k] maps chi to (layer j value) - E_j^k x - d_j^k for
        vertex k, and analogously for eta.
    """

    layout: LiftedLayout
    S: np.ndarray
    S_lambda: np.ndarray
    S_x: np.ndarray
    G_gamma: list
    G_eta: list
    G_gamma_k: list
    G_eta_k: list
    _splus_const: np.ndarray
    _B: np.ndarray
    _C: np.ndarray

    def S_plus(self, K):
        """Map chi+ to chi(t+1, x+) for feedback gain K (affine in K)."""
        K = np.atleast_2d(np.asarray(K, dtype=float))
        m, p = self._B.shape[1], self._C.shape[0]
        if K.shape != (m, p):
            raise DimensionMismatch(f"K must be {(m, p)}, got {K.shape}")
        out = self._splus_const.copy()
        out[1: 1 + self.layout.n, : self.layout.n_chi] += self._B @ K @ self._C
        return out

    def bundle(self, q):
        """Columns [S_lambda^T, G_1^T, G_1^(q)T, ...] used by the decrease
        certificate; shape (n_chi, d_y)."""
        cols = [self.S_lambda.T]
        for j in range(self.layout.alpha):
            cols.append(self.G_gamma[j].T)
            cols.append(self.G_gamma_k[j][q].T)
        for l in range(self.layout.beta):
            cols.append(self.G_eta[l].T)
            cols.append(self.G_eta_k[l][q].T)
        return np.hstack(cols)


def build_graph_matrices(sys: DCSystem, layout: LiftedLayout) -> GraphMatrices:
    n, alpha, beta = layout.n, layout.alpha, layout.beta
    n_chi, n_chi_plus = layout.n_chi, layout.n_chi_plus

    S = np.zeros((n_chi, n_chi_plus))
    S[:, :n_chi] = np.eye(n_chi)

    S_lambda = np.zeros((layout.n_lam, n_chi))
    S_lambda[0, 0] = 1.0
    S_lambda[1: 1 + n, layout.x_slice] = np.eye(n)
    if alpha > 0:
        S_lambda[1 + n: 1 + 2 * n, layout.gamma_slice(alpha - 1)] = np.eye(n)
    if beta > 0:
        S_lambda[1 + 2 * n: 1 + 3 * n, layout.eta_slice(beta - 1)] = np.eye(n)

    S_x = np.zeros((1 + n, n_chi_plus))
    S_x[0, 0] = 1.0
    S_x[1:, layout.x_slice] = np.eye(n)

    def first_layer_selector():
        G = np.zeros((n, n_chi))
        G[:, 0] = 1.0
        return G

    def diff_selector(sl_j, sl_prev):
        G = np.zeros((n, n_chi))
        G[:, sl_j] = np.eye(n)
        G[:, sl_prev] = -np.eye(n)
        return G

    def residual_map(sl_j, layer):
        G = np.zeros((n, n_chi))
        G[:, sl_j] = np.eye(n)
        G[:, layout.x_slice] = -layer.E
        G[:, 0] = -layer.d
        return G

    G_gamma, G_gamma_k = [], []
    for j in range(alpha):
        if j == 0:
            G_gamma.append(first_layer_selector())
        else:
            G_gamma.append(diff_selector(layout.gamma_slice(j), layout.gamma_slice(j - 1)))
        G_gamma_k.append([
            residual_map(layout.gamma_slice(j), vx.gamma_layers[j]) for vx in sys.vertices
        ])

    G_eta, G_eta_k = [], []
    for l in range(beta):
        if l == 0:
            G_eta.append(first_layer_selector())
        else:
            G_eta.append(diff_selector(layout.eta_slice(l), layout.eta_slice(l - 1)))
        G_eta_k.append([
            residual_map(layout.eta_slice(l), vx.eta_layers[l]) for vx in sys.vertices
        ])

    # constant part of S_plus: next-step constant, drift rows, appended blocks
    splus = np.zeros((n_chi, n_chi_plus))
    splus[0, 0] = 1.0
    xrows = slice(1, 1 + n)
    splus[xrows, layout.x_slice] = sys.A
    if alpha > 0:
        splus[xrows, layout.gamma_slice(alpha - 1)] += np.eye(n)
    if beta > 0:
        splus[xrows, layout.eta_slice(beta - 1)] -= np.eye(n)
    for j in range(alpha):
        splus[layout.gamma_slice(j), layout.gamma_plus_slice(j)] = np.eye(n)
    for l in range(beta):
        splus[layout.eta_slice(l), layout.eta_plus_slice(l)] = np.eye(n)

    gm = GraphMatrices(
        layout=layout, S=S, S_lambda=S_lambda, S_x=S_x,
        G_gamma=G_gamma, G_eta=G_eta, G_gamma_k=G_gamma_k, G_eta_k=G_eta_k,
        _splus_const=splus, _B=sys.B, _C=sys.C,
    )
    _assert_selector_identities(gm)
    return gm


def _assert_selector_identities(gm: GraphMatrices):
    lay = gm.layout
    ones = np.ones(lay.n)
    for G in gm.G_gamma[:1] + gm.G_eta[:1]:
        probe = np.zeros(lay.n_chi)
        probe[0] = 1.0
        assert np.array_equal(G @ probe, ones)
    assert np.array_equal(gm.S[:, : lay.n_chi], np.eye(lay.n_chi))


# ---------------------------------------------------------------------------
# graph membership and S-procedure checks
# ---------------------------------------------------------------------------

@dataclass
class MembershipReport:
    """Per-layer complementarity/inequality residuals of a lifted vector."""

    ok: bool
    equality: np.ndarray       # one scalar per layer (gamma layers then eta)
    min_difference: np.ndarray
    min_residual: np.ndarray
    eq_tol: float
    ineq_tol: float


def check_membership(layout: LiftedLayout, chi, sample: UncertaintySample,
                     eq_tol=1e-9, ineq_tol=1e-9) -> MembershipReport:
    """Check that a candidate chi lies in the graph relaxation set.

    For each layer j >= 2 the checks are: layer differences nonnegative,
    affine residuals nonnegative, and their inner product zero.  The first
    layer carries an equality, encoded with the all-ones difference.
    """
    chi = np.asarray(chi, dtype=float).reshape(-1)
    if chi.shape[0] not in (layout.n_chi, layout.n_chi_plus):
        raise DimensionMismatch(
            f"chi has dimension {chi.shape[0]}, expected {layout.n_chi}"
        )
    chi = chi[: layout.n_chi]
    x = chi[layout.x_slice]

    eqs, dmins, rmins = [], [], []

    def check_stack(layers, sl):
        for j, layer in enumerate(layers):
            val = chi[sl(j)]
            resid = val - layer.affine(x)
            if j == 0:
                diff = np.ones(layout.n)
            else:
                diff = val - chi[sl(j - 1)]
            eqs.append(float(diff @ resid))
            dmins.append(float(np.min(diff)))
            rmins.append(float(np.min(resid)) if j > 0 else float(-np.max(np.abs(resid))))

    check_stack(sample.gamma_layers, layout.gamma_slice)
    check_stack(sample.eta_layers, layout.eta_slice)

    eqs = np.array(eqs) if eqs else np.zeros(0)
    dmins = np.array(dmins) if dmins else np.zeros(0)
    rmins = np.array(rmins) if rmins else np.zeros(0)
    ok = bool(
        np.all(np.abs(eqs) <= eq_tol)
        and np.all(dmins >= -ineq_tol)
        and np.all(rmins >= -ineq_tol)
    )
    return MembershipReport(ok=ok, equality=eqs, min_difference=dmins,
                            min_residual=rmins, eq_tol=eq_tol, ineq_tol=ineq_tol)


def _he(M):
    return 0.5 * (M + M.T)


def check_sprocedure(P, multipliers, pairs, sampler=None, psd_tol=1e-9,
                     spot_tol=1e-7, spot_count=1000):
    """Verify a multiplier certificate P - sum He(G^T (D + M) Gbar) >= 0.

    multipliers: list of (D, M) with D diagonal and M elementwise
    nonnegative; pairs: matching list of (G, Gbar) graph matrices.  When
    the certificate matrix is PSD and a sampler is given, also spot-check
    chi^T P chi >= -spot_tol on sampled lifted vectors.

    Returns (ok, margin) with margin the smallest eigenvalue of the
    certificate matrix.
    """
    from .conic import eig_sym

    P = np.asarray(P, dtype=float)
    cert = P.copy()
    if len(multipliers) != len(pairs):
        raise BadMultiplier("one (D, M) pair per graph-matrix pair is required")
    for (D, M), (G, Gbar) in zip(multipliers, pairs):
        D = np.asarray(D, dtype=float)
        M = np.asarray(M, dtype=float)
        if np.any(np.abs(D - np.diag(np.diag(D))) > 1e-12):
            raise BadMultiplier("D multiplier must be diagonal")
        if np.any(M < -1e-12):
            raise BadMultiplier("M multiplier must be elementwise nonnegative")
        cert -= _he(G.T @ (D + M) @ Gbar)

    evals, _ = eig_sym(_he(cert))
    margin = float(evals[0])
    ok = margin >= -psd_tol
    if ok and sampler is not None:
        for _ in range(spot_count):
            chi = sampler()
            if float(chi @ P @ chi) < -spot_tol:
                ok = False
                break
    return ok, margin
