"""Certificate assembly and policy synthesis.

Decision variables and certificate families
-------------------------------------------
For a redefined system with lifted layout of size N (chi) and N+ (chi+),
the synthesis searches over

  * P: the (1+3n) x (1+3n) Lyapunov matrix of V = z^T P z with
    z = [1, x, gamma_final, eta_final]; the entire first row/column is
    pinned to zero so V is purely quadratic in [x, gamma, eta] and the
    upper growth bound lam_max(P) (1 + C_g^2 + C_e^2) ||x||^2 is valid.
  * K: the feedback gain of u = K C chi; the column of K that multiplies
    the constant observation is pinned to zero so the origin stays a
    closed-loop equilibrium exactly.
  * per-family graph multipliers (free diagonal D, nonnegative M), one
    independent family per certificate group, plus nonnegative box
    multipliers for the input family.

Families (each per uncertainty vertex k, decrease also per next-step
vertex q):

  positivity   S_l^T P S_l - diag(0, rho1 I, 0) - cert_k  >=  t * mask
  input        [[E_11 - sum_i mu_i Box_i - cert_k, (Qu^1/2 K C)^T],
                [Qu^1/2 K C, I]]                          >=  t * I
  decrease     rho3 * (S_l S)^T P (S_l S) - cert_k - U_q Y U_q^T
                                                          >=  t * mask

with U_q = S_plus(K)^T [S_l^T, G_1^T, G_1^(q)T, ...] and Y the block
diagonal of P and the next-step multiplier couplings.  Conjugating the
decrease family with a lifted transition vector and averaging over the
realized vertex weights yields exactly V(t+1) <= rho3 V(t) minus
nonnegative graph terms; the sampled audit in sim-verify checks that
statement directly.  The mask exempts only the constant-coordinate
direction, where any certificate pinned at the equilibrium is tight by
construction (the cone constraint itself still enforces plain PSD
there).

The decrease family is bilinear in (K, P and the next-step multipliers).
With K fixed it is jointly linear in everything else; that form is the
final certificate.  For updating K we use an equivalent slack-coupled
form with fixed coupling matrices (T, V): feasibility of

  [[rho3 L^T P L - cert_k - He(V U_q^T),  V - U_q T^T],
   [*,                                    T + T^T - Y]]  >=  0

implies the decrease inequality for any fixed (T, V) (conjugate with
[zeta, Ubar^T zeta]; the T, V terms cancel), and it is jointly linear in
(P, K, multipliers).  synthesize() alternates: certify at fixed K,
refresh (T, V) from the solution, improve K, re-certify, keeping the
best margin.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .conic import (MARGIN_VAR, ConicFeasibility, SolveSettings, block_margins,
                    eig_sym, evaluate_block, solve)
from .errors import DimensionMismatch, Infeasible, NumericalFailure, ParseError
from .lifting import GraphMatrices, LiftedLayout, build_chi, build_graph_matrices, build_layout
from .model import DCSystem, UncertaintySample, norm_bounds, redefine_dc, system_hash

__all__ = [
    "SynthesisProblem",
    "ControllerArtifact",
    "make_problem",
    "assemble_posdef",
    "assemble_input",
    "assemble_decrease",
    "assemble_decrease_coupled",
    "synthesize",
    "alternate_bmi",
    "certify_gain",
    "init_gain",
    "eval_policy",
    "eval_V",
    "observe",
    "grid_search",
    "save_artifact",
    "load_artifact",
]


# ---------------------------------------------------------------------------
# problem container and variable naming
# ---------------------------------------------------------------------------

@dataclass
class SynthesisProblem:
    """A redefined system plus synthesis parameters and lifted matrices."""

    sys: DCSystem                 # redefined (shifted offsets)
    d_star: np.ndarray
    layout: LiftedLayout
    gm: GraphMatrices
    rho1: float
    rho3: float
    eps: float
    c_gamma: float
    c_eta: float

    def __post_init__(self):
        if not self.rho1 > 0:
            raise DimensionMismatch(f"rho1 must be positive, got {self.rho1}")
        if not 0.0 < self.rho3 < 1.0:
            raise DimensionMismatch(f"rho3 must lie in (0, 1), got {self.rho3}")

    @property
    def n_lam(self):
        return self.layout.n_lam

    def pinned_obs_column(self):
        """Observation column multiplying the constant lift entry, if the
        constant is observed through a pure selector row of C."""
        col = self.sys.C[:, 0]
        nz = np.nonzero(col)[0]
        if len(nz) == 1 and col[nz[0]] == 1.0 and \
                np.allclose(self.sys.C[nz[0]], np.eye(self.layout.n_chi)[0]):
            return int(nz[0])
        return None

    def k_var_names(self):
        pinned = self.pinned_obs_column()
        names = []
        for i in range(self.sys.m):
            for j in range(self.sys.p):
                if j == pinned:
                    continue
                names.append((f"K_{i}_{j}", i, j))
        return names

    def p_var_names(self):
        # slots of [1, x, gamma_final, eta_final] that are structurally zero
        # (an empty convex part) carry no Lyapunov mass
        n = self.layout.n
        dead = set()
        if self.layout.alpha == 0:
            dead.update(range(1 + n, 1 + 2 * n))
        if self.layout.beta == 0:
            dead.update(range(1 + 2 * n, 1 + 3 * n))
        names = []
        for a in range(1, self.n_lam):
            for b in range(a, self.n_lam):
                if a in dead or b in dead:
                    continue
                names.append((f"P_{a}_{b}", a, b))
        return names

    def stacks(self):
        """Uniform view of the layer stacks: (tag, index, G, [G_k per vertex])."""
        out = []
        for j in range(self.layout.alpha):
            out.append(("g", j, self.gm.G_gamma[j], self.gm.G_gamma_k[j]))
        for l in range(self.layout.beta):
            out.append(("e", l, self.gm.G_eta[l], self.gm.G_eta_k[l]))
        return out


def make_problem(sys: DCSystem, rho1=1e-3, rho3=0.995, eps=1e-6) -> SynthesisProblem:
    sys_r, d_star = redefine_dc(sys)
    layout = build_layout(sys_r)
    gm = build_graph_matrices(sys_r, layout)
    cg, ce = norm_bounds(sys_r)
    return SynthesisProblem(sys=sys_r, d_star=d_star, layout=layout, gm=gm,
                            rho1=rho1, rho3=rho3, eps=eps, c_gamma=cg, c_eta=ce)


def values_to_P(problem: SynthesisProblem, values: dict) -> np.ndarray:
    P = np.zeros((problem.n_lam, problem.n_lam))
    for name, a, b in problem.p_var_names():
        P[a, b] = P[b, a] = values[name]
    return P


def values_to_K(problem: SynthesisProblem, values: dict) -> np.ndarray:
    K = np.zeros((problem.sys.m, problem.sys.p))
    for name, i, j in problem.k_var_names():
        K[i, j] = values[name]
    return K


def multiplier_values(problem: SynthesisProblem, values: dict, fam: str):
    """Realized multipliers of one family.

    For the first layer of each stack (an equality constraint) the
    multiplier is a free matrix F pairing F chi with the layer residual;
    returned as {"F": (n, n_chi)}.  For deeper layers it is
    {"theta": D + M}.  The next-step family additionally carries a PSD
    residual-quadratic block {"R": (n, n)} per layer.
    """
    n = problem.layout.n
    n_chi = problem.layout.n_chi
    out = {}
    for tag, idx, _G, _Gk in problem.stacks():
        entry = {}

        def theta():
            th = np.zeros((n, n))
            for i in range(n):
                th[i, i] += values[f"{fam}D_{tag}{idx}_{i}"]
                for l in range(n):
                    th[i, l] += values[f"{fam}M_{tag}{idx}_{i}_{l}"]
            return th

        if fam == "nxt":
            if idx == 0:
                W = np.zeros((n, n))
                for i in range(n):
                    for l in range(n):
                        W[i, l] = values[f"nxtW_{tag}{idx}_{i}_{l}"]
                entry["cross"] = W
                depth = problem.layout.alpha if tag == "g" else problem.layout.beta
                if depth > 1:
                    Fp = np.zeros((n, problem.layout.n_chi_plus))
                    for i in range(n):
                        for c in range(problem.layout.n_chi_plus):
                            Fp[i, c] = values[f"nxtF_{tag}{idx}_{i}_{c}"]
                    entry["F_plus"] = Fp
            else:
                entry["theta"] = theta()
                entry["cross"] = entry["theta"]
        elif idx == 0:
            F = np.zeros((n, n_chi))
            for i in range(n):
                for c in range(n_chi):
                    F[i, c] = values[f"{fam}F_{tag}{idx}_{i}_{c}"]
            entry["F"] = F
        else:
            entry["theta"] = theta()
        out[(tag, idx)] = entry
    return out


def cert_value(problem: SynthesisProblem, values: dict, fam: str, chi,
               weights):
    """Value of one family's graph certificate at a realized lift."""
    total = 0.0
    mults = multiplier_values(problem, values, fam)
    for tag, idx, G, Gk in problem.stacks():
        Gbar = sum(w * Gk[k] for k, w in enumerate(weights))
        resid = Gbar @ chi
        entry = mults[(tag, idx)]
        if idx == 0:
            total += float((entry["F"] @ chi[: problem.layout.n_chi]) @ resid)
        else:
            total += float((G @ chi) @ entry["theta"] @ resid)
    return total


def cert_value_next(problem: SynthesisProblem, values: dict, chi_plus,
                    chi_next, weights_next):
    """Next-step certificate value: the coupling products plus the free
    first-layer residual pairings."""
    total = 0.0
    mults = multiplier_values(problem, values, "nxt")
    for tag, idx, G, Gk in problem.stacks():
        entry = mults[(tag, idx)]
        Gbar = sum(w * Gk[q] for q, w in enumerate(weights_next))
        resid = Gbar @ chi_next
        total += float((G @ chi_next) @ entry["cross"] @ resid)
        if "F_plus" in entry:
            total += float((entry["F_plus"] @ chi_plus) @ resid)
    return total


# ---------------------------------------------------------------------------
# block assembly helpers
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, dim):
        self.dim = dim
        self.const = np.zeros((dim, dim))
        self.coeffs = {}

    def add_const(self, mat, r0=0, c0=0):
        d = mat.shape[0]
        self.const[r0:r0 + d, c0:c0 + mat.shape[1]] += mat
        if r0 != c0:
            self.const[c0:c0 + mat.shape[1], r0:r0 + d] += mat.T

    def add(self, name, mat, r0=0, c0=0):
        full = self.coeffs.setdefault(name, np.zeros((self.dim, self.dim)))
        d0, d1 = mat.shape
        full[r0:r0 + d0, c0:c0 + d1] += mat
        if r0 != c0:
            full[c0:c0 + d1, r0:r0 + d0] += mat.T

    def symmetrized(self):
        const = 0.5 * (self.const + self.const.T)
        coeffs = {k: 0.5 * (v + v.T) for k, v in self.coeffs.items()}
        return const, coeffs


def _he(M):
    return 0.5 * (M + M.T)


def _add_p_sandwich(builder: _Builder, problem, L, scale=1.0, r0=0):
    """Add scale * L^T P L (L maps the block space into the P space)."""
    for name, a, b in problem.p_var_names():
        coef = np.outer(L[a], L[b])
        if a != b:
            coef = coef + np.outer(L[b], L[a])
        else:
            coef = 0.5 * (coef + coef.T)
        builder.add(name, scale * coef, r0, r0)


def _add_cert(builder: _Builder, problem, k, fam, sign=-1.0, rows=None):
    """Add one family's certificate terms for vertex k.

    First layers contribute sign * He(F^T G_1^(k)) with F a free matrix
    (an equality constraint admits arbitrary pairings); deeper layers
    contribute sign * He(G_j^T (D_j + M_j) G_j^(k)).  rows: optional index
    array restricting the chi-space matrix to a subset of coordinates
    (used by the reduced coupled form).
    """
    n = problem.layout.n
    n_chi = problem.layout.n_chi

    def place(mat):
        return mat if rows is None else mat[np.ix_(rows, rows)]

    for tag, idx, G, Gk in problem.stacks():
        Gb = Gk[k]
        if idx == 0:
            for i in range(n):
                for c in range(n_chi):
                    base = np.zeros((n_chi, n_chi))
                    base[c, :] += 0.5 * Gb[i]
                    base[:, c] += 0.5 * Gb[i]
                    builder.add(f"{fam}F_{tag}{idx}_{i}_{c}", sign * place(base))
            continue
        for i in range(n):
            base = _he(np.outer(G[i], Gb[i]))
            builder.add(f"{fam}D_{tag}{idx}_{i}", sign * place(base))
            for l in range(n):
                base = _he(np.outer(G[i], Gb[l]))
                builder.add(f"{fam}M_{tag}{idx}_{i}_{l}", sign * place(base))


def _register_family(cf: ConicFeasibility, problem, fam):
    n = problem.layout.n
    n_chi = problem.layout.n_chi
    for tag, idx, _G, _Gk in problem.stacks():
        if idx == 0:
            for i in range(n):
                for c in range(n_chi):
                    cf.ensure_var(f"{fam}F_{tag}{idx}_{i}_{c}")
            continue
        for i in range(n):
            cf.ensure_var(f"{fam}D_{tag}{idx}_{i}")
            for l in range(n):
                cf.add_nonneg(f"{fam}M_{tag}{idx}_{i}_{l}")


def _box_quadratics(problem):
    """Per-dimension interval certificates (hi - x_i)(x_i - lo) on chi."""
    lay = problem.layout
    out = []
    for i in range(lay.n):
        lo, hi = problem.sys.state_box[i]
        Bq = np.zeros((lay.n_chi, lay.n_chi))
        xi = 1 + i
        Bq[0, 0] = -hi * lo
        Bq[0, xi] = Bq[xi, 0] = 0.5 * (hi + lo)
        Bq[xi, xi] = -1.0
        out.append(Bq)
    return out


def _const_mask(dim):
    mask = np.eye(dim)
    mask[0, 0] = 0.0
    return mask


def _decrease_mask(layout):
    """Margin mask of the decrease family: strictness is required on the
    state, the leading layer blocks, and the final appended blocks.  The
    constant and the non-final appended blocks are equality-pinned along
    every lift, so no sound certificate can be strict there (plain PSD is
    still enforced by the cone constraint)."""
    mask = np.eye(layout.n_chi_plus)
    mask[0, 0] = 0.0
    for j in range(layout.alpha - 1):
        s = layout.gamma_plus_slice(j)
        mask[s, s] = 0.0
    for l in range(layout.beta - 1):
        s = layout.eta_plus_slice(l)
        mask[s, s] = 0.0
    return mask


def _couple_mask(layout):
    """Margin mask of the coupled (gain-step) family on the reduced space."""
    full = np.diag(_decrease_mask(layout))[1:]
    mask = np.eye(layout.n_chi_plus - 1 + layout.d_y)
    mask[: layout.n_chi_plus - 1, : layout.n_chi_plus - 1] = np.diag(full)
    return mask


def _u_q(problem: SynthesisProblem, K, q):
    return problem.gm.S_plus(K).T @ problem.gm.bundle(q)


def _y_offsets(problem):
    """Column offsets of the multiplier couplings inside the bundle space."""
    offs = {}
    pos = problem.n_lam
    for tag, idx, _G, _Gk in problem.stacks():
        offs[(tag, idx)] = pos
        pos += 2 * problem.layout.n
    return offs


def _add_y_sandwich(builder: _Builder, problem, U, sign=-1.0):
    """Add sign * U Y U^T with Y = blkdiag(P, next-step couplings).

    The coupling block of each layer is [[0, C/2], [C^T/2, 0]]: C pairs
    the layer difference with the vertex residual, so the conjugated
    value contributes exactly one graph product per layer.  On the first
    (equality) layer C is a free matrix W; deeper it is D + M.
    """
    n = problem.layout.n
    Wp = U[:, : problem.n_lam]
    for name, a, b in problem.p_var_names():
        coef = np.outer(Wp[:, a], Wp[:, b])
        if a != b:
            coef = coef + np.outer(Wp[:, b], Wp[:, a])
        builder.add(name, sign * _he(coef))
    offs = _y_offsets(problem)
    for tag, idx, _G, _Gk in problem.stacks():
        o = offs[(tag, idx)]

        def cross(i, l):
            return 0.5 * (np.outer(U[:, o + i], U[:, o + n + l])
                          + np.outer(U[:, o + n + l], U[:, o + i]))

        if idx == 0:
            for i in range(n):
                for l in range(n):
                    builder.add(f"nxtW_{tag}{idx}_{i}_{l}", sign * cross(i, l))
        else:
            for i in range(n):
                builder.add(f"nxtD_{tag}{idx}_{i}", sign * cross(i, i))
                for l in range(n):
                    builder.add(f"nxtM_{tag}{idx}_{i}_{l}", sign * cross(i, l))


def _register_nxt(cf: ConicFeasibility, problem):
    """Variables of the next-step coupling family.

    Besides the per-layer couplings inside Y, every multi-layer stack
    carries a free matrix multiplier F+ pairing a chi+ functional with
    the next-step first-layer equality residual (the residual map
    conjugated through the transition, G_1^(q) S_plus)."""
    n = problem.layout.n
    for tag, idx, _G, _Gk in problem.stacks():
        if idx == 0:
            for i in range(n):
                for l in range(n):
                    cf.ensure_var(f"nxtW_{tag}{idx}_{i}_{l}")
                if _stack_depth(problem, tag) > 1:
                    for c in range(problem.layout.n_chi_plus):
                        cf.ensure_var(f"nxtF_{tag}{idx}_{i}_{c}")
        else:
            for i in range(n):
                cf.ensure_var(f"nxtD_{tag}{idx}_{i}")
                for l in range(n):
                    cf.add_nonneg(f"nxtM_{tag}{idx}_{i}_{l}")


def _stack_depth(problem, tag):
    return problem.layout.alpha if tag == "g" else problem.layout.beta


def _add_next_first_layer_cert(builder: _Builder, problem, q, splus,
                               sign=-1.0, fixed_F=None, rows=None):
    """Add sign * He(F+^T G_1^(q) S_plus) per multi-layer stack.

    With fixed_F the term is folded as data times the (possibly
    K-affine) residual map; otherwise F+ entries are decision variables
    (requires a numeric S_plus)."""
    n = problem.layout.n
    dim = splus.shape[1]

    def place(mat):
        return mat if rows is None else mat[np.ix_(rows, rows)]

    for tag, idx, _G, Gk in problem.stacks():
        if idx != 0 or _stack_depth(problem, tag) < 2:
            continue
        Rq = Gk[q] @ splus             # n x n_chi_plus residual map at t+1
        if fixed_F is not None:
            F = fixed_F[(tag, idx)]
            builder.add_const(sign * place(_he(F.T @ Rq)))
            continue
        for i in range(n):
            for c in range(dim):
                base = np.zeros((dim, dim))
                base[c, :] += 0.5 * Rq[i]
                base[:, c] += 0.5 * Rq[i]
                builder.add(f"nxtF_{tag}{idx}_{i}_{c}", sign * place(base))


# ---------------------------------------------------------------------------
# the three certificate families
# ---------------------------------------------------------------------------

def assemble_posdef(problem: SynthesisProblem, cf: ConicFeasibility):
    """Positivity family: V - rho1 ||x||^2 dominates the graph certificate."""
    lay = problem.layout
    _register_family(cf, problem, "pos")
    lower = np.zeros((lay.n_chi, lay.n_chi))
    lower[lay.x_slice, lay.x_slice] = problem.rho1 * np.eye(lay.n)
    for k in range(problem.sys.n_vertices):
        b = _Builder(lay.n_chi)
        _add_p_sandwich(b, problem, problem.gm.S_lambda)
        b.add_const(-lower)
        _add_cert(b, problem, k, "pos")
        const, coeffs = b.symmetrized()
        cf.add_block(f"posdef[{k}]", const, coeffs, mask=_const_mask(lay.n_chi))


def assemble_input(problem: SynthesisProblem, cf: ConicFeasibility, K=None):
    """Input family, Schur form: certified u^T Q_u u <= 1 on the state box.

    K may be None (symbolic: the gain enters linearly through the
    off-diagonal block) or a numeric gain (folded into the constants).
    """
    lay = problem.layout
    sys = problem.sys
    _register_family(cf, problem, "inp")
    boxes = _box_quadratics(problem)
    for i in range(lay.n):
        cf.add_nonneg(f"box_{i}")

    w, Vq = np.linalg.eigh(sys.Q_u)
    qu_sqrt = (Vq * np.sqrt(w)) @ Vq.T
    dim = lay.n_chi + sys.m
    e00 = np.zeros((lay.n_chi, lay.n_chi))
    e00[0, 0] = 1.0

    for k in range(sys.n_vertices):
        b = _Builder(dim)
        b.add_const(e00)
        for i, Bq in enumerate(boxes):
            b.add(f"box_{i}", -Bq)
        _add_cert(b, problem, k, "inp")
        b.add_const(np.eye(sys.m), lay.n_chi, lay.n_chi)
        if K is None:
            for name, i, j in problem.k_var_names():
                coef = qu_sqrt @ np.eye(sys.m)[:, [i]] @ sys.C[[j], :]
                b.add(name, coef, lay.n_chi, 0)
        else:
            b.add_const(qu_sqrt @ np.atleast_2d(K) @ sys.C, lay.n_chi, 0)
        const, coeffs = b.symmetrized()
        cf.add_block(f"input[{k}]", const, coeffs, mask=None)


def assemble_decrease(problem: SynthesisProblem, cf: ConicFeasibility, K):
    """Exact decrease family at a fixed gain, per vertex pair (k, q)."""
    lay = problem.layout
    _register_family(cf, problem, "dec")
    _register_nxt(cf, problem)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    L = problem.gm.S_lambda @ problem.gm.S
    splus = problem.gm.S_plus(K)
    for q in range(problem.sys.n_vertices):
        Uq = splus.T @ problem.gm.bundle(q)
        for k in range(problem.sys.n_vertices):
            b = _Builder(lay.n_chi_plus)
            _add_p_sandwich(b, problem, L, scale=problem.rho3)
            # certificate terms act on the leading chi coordinates
            _add_cert(b, problem, k, "dec")
            _add_y_sandwich(b, problem, Uq, sign=-1.0)
            _add_next_first_layer_cert(b, problem, q, splus)
            const, coeffs = b.symmetrized()
            cf.add_block(f"decrease[{k},{q}]", const, coeffs,
                         mask=_const_mask(lay.n_chi_plus))


def assemble_decrease_coupled(problem: SynthesisProblem, cf: ConicFeasibility,
                              T, V, F_plus=None):
    """Slack-coupled decrease family, jointly linear in (P, K, multipliers).

    T (d_y x d_y) and V (n_chi_plus x d_y) are fixed coupling matrices;
    F_plus, when given, maps (tag, 0) to a fixed next-step first-layer
    multiplier whose residual pairing is affine in K.  The chi+ part is
    reduced by the constant coordinate; the exact family re-checks the
    full certificate after the gain update.
    """
    lay = problem.layout
    sys = problem.sys
    _register_family(cf, problem, "dec")
    _register_nxt(cf, problem)
    for name, *_ in problem.k_var_names():
        cf.ensure_var(name)

    n1 = lay.n_chi_plus - 1
    dim = n1 + lay.d_y
    L_full = problem.gm.S_lambda @ problem.gm.S
    Lr = L_full[:, 1:]
    CS = sys.C @ problem.gm.S               # p x n_chi_plus
    Lobs = CS[:, 1:].T                      # n1 x p
    Vr = np.asarray(V, dtype=float)[1:, :]  # n1 x d_y
    T = np.asarray(T, dtype=float)

    # chi-space certificates restricted to the non-constant coordinates
    cert_rows = np.arange(1, lay.n_chi)
    red_rows = np.arange(1, lay.n_chi_plus)
    K0 = np.zeros((sys.m, sys.p))
    splus0 = problem.gm.S_plus(K0)
    CSfull = sys.C @ problem.gm.S           # p x n_chi_plus

    for q in range(sys.n_vertices):
        U0 = _u_q(problem, K0, q)[1:, :]    # gain-free part of the reduced U_q
        Wq = problem.gm.bundle(q)
        Rq = sys.B.T @ Wq[1:1 + lay.n, :]   # m x d_y
        VRt = Vr @ Rq.T                     # n1 x m
        RqTt = Rq @ T.T                     # m x d_y
        for k in range(sys.n_vertices):
            b = _Builder(dim)
            _add_p_sandwich(b, problem, Lr, scale=problem.rho3)
            _add_cert(b, problem, k, "dec", rows=cert_rows)
            b.add_const(-(Vr @ U0.T + U0 @ Vr.T))
            b.add_const(Vr - U0 @ T.T, 0, n1)
            b.add_const(T + T.T, n1, n1)
            for name, i, j in problem.k_var_names():
                cross = np.outer(VRt[:, i], Lobs[:, j])
                b.add(name, -(cross + cross.T))
                b.add(name, -np.outer(Lobs[:, j], RqTt[i, :]), 0, n1)
            if F_plus:
                # fixed next-step first-layer multipliers; their residual
                # maps are affine in K through the transition rows
                sub = _Builder(lay.n_chi_plus)
                _add_next_first_layer_cert(sub, problem, q, splus0,
                                           fixed_F=F_plus)
                sconst, _ = sub.symmetrized()
                b.add_const(sconst[np.ix_(red_rows, red_rows)])
                for tag, idx, _G, Gk in problem.stacks():
                    if idx != 0 or _stack_depth(problem, tag) < 2:
                        continue
                    H1q = -Gk[q][:, lay.x_slice]
                    WF = F_plus[(tag, idx)].T @ H1q @ sys.B   # n_chi_plus x m
                    for name, i, j in problem.k_var_names():
                        kc = _he(np.outer(WF[:, i], CSfull[j]))
                        b.add(name, kc[np.ix_(red_rows, red_rows)])
            # -Y in the coupling corner
            sub = _Builder(lay.d_y)
            _add_y_sandwich(sub, problem, np.eye(lay.d_y), sign=-1.0)
            sconst, scoeffs = sub.symmetrized()
            b.add_const(sconst, n1, n1)
            for name, mat in scoeffs.items():
                b.add(name, mat, n1, n1)
            const, coeffs = b.symmetrized()
            cf.add_block(f"couple[{k},{q}]", const, coeffs,
                         mask=_couple_mask(lay))


# ---------------------------------------------------------------------------
# artifact
# ---------------------------------------------------------------------------

@dataclass
class ControllerArtifact:
    """A solved certificate: Lyapunov matrix, gain, rates, and margins."""

    P: np.ndarray
    K: np.ndarray
    rho1: float
    rho2: float
    rho3: float
    eps: float
    margin: float
    block_report: dict
    multipliers: dict
    system_hash: str
    solver: dict
    provenance: dict = field(default_factory=dict)

    def to_payload(self):
        return {
            "P": self.P.tolist(),
            "K": self.K.tolist(),
            "rho1": self.rho1,
            "rho2": self.rho2,
            "rho3": self.rho3,
            "eps": self.eps,
            "margin": self.margin,
            "block_report": {k: list(v) for k, v in self.block_report.items()},
            "multipliers": self.multipliers,
            "system_hash": self.system_hash,
            "solver": self.solver,
            "provenance": self.provenance,
        }

    @staticmethod
    def from_payload(obj):
        return ControllerArtifact(
            P=np.array(obj["P"], dtype=float),
            K=np.array(obj["K"], dtype=float),
            rho1=float(obj["rho1"]), rho2=float(obj["rho2"]), rho3=float(obj["rho3"]),
            eps=float(obj["eps"]), margin=float(obj["margin"]),
            block_report={k: tuple(v) for k, v in obj["block_report"].items()},
            multipliers=dict(obj["multipliers"]),
            system_hash=obj["system_hash"],
            solver=dict(obj["solver"]),
            provenance=dict(obj.get("provenance", {})),
        )


def save_artifact(artifact: ControllerArtifact, path):
    payload = artifact.to_payload()
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(blob.encode()).hexdigest()
    with open(path, "w") as fh:
        json.dump({"payload": payload, "sha256": digest}, fh, indent=2)
        fh.write("\n")


def load_artifact(path) -> ControllerArtifact:
    try:
        with open(path) as fh:
            obj = json.load(fh)
        payload = obj["payload"]
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        digest = hashlib.sha256(blob.encode()).hexdigest()
        if digest != obj.get("sha256"):
            raise ParseError("artifact hash mismatch")
        return ControllerArtifact.from_payload(payload)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"artifact hash mismatch (unreadable file: {exc})")


# ---------------------------------------------------------------------------
# solve orchestration
# ---------------------------------------------------------------------------

def _certify_problem(problem: SynthesisProblem, K) -> ConicFeasibility:
    cf = ConicFeasibility(t_cap=1.0)
    for name, *_ in problem.p_var_names():
        cf.ensure_var(name)
    assemble_posdef(problem, cf)
    assemble_input(problem, cf, K=np.atleast_2d(K))
    assemble_decrease(problem, cf, K)
    return cf


def certify_gain(problem: SynthesisProblem, K, settings=None):
    """Solve the full certificate at a fixed gain, in two phases.

    Phase 1 maximizes the margin; when the achieved margin clears the
    target, phase 2 re-solves the problem as pure feasibility with the
    margin frozen at half the achieved value (a strict interior point,
    where the splitting converges to high accuracy).  Returns (report,
    values, cf, margins) with margins re-checked independently of the
    solver by the Jacobi eigensolver.
    """
    cf = _certify_problem(problem, K)
    settings = settings or SolveSettings()
    report, values = solve(cf, settings)
    margins = block_margins(cf, values)
    t_hat = report.margin
    if t_hat > 2.0 * problem.eps:
        target = 0.5 * t_hat
        polish = SolveSettings(
            max_iters=settings.max_iters, tol_abs=1e-11, tol_rel=1e-10,
            sigma=settings.sigma, over_relax=settings.over_relax)
        rep2, vals2 = solve(cf.freeze_margin(target), polish)
        if rep2.status != "numerical-failure":
            vals2[MARGIN_VAR] = target
            margins2 = block_margins(cf, vals2)
            if min(m for m, _ in margins2.values()) >= \
                    min(m for m, _ in margins.values()):
                rep2.margin = target
                return rep2, vals2, cf, margins2
    return report, values, cf, margins


def _artifact_from_solution(problem, K, values, margins, report):
    P = values_to_P(problem, values)
    assert P[0, 0] == 0.0
    evals, _ = eig_sym(P)
    lam_max = float(evals[-1])
    rho2 = lam_max * (1.0 + problem.c_gamma**2 + problem.c_eta**2)
    masked = min(m for m, _ in margins.values())
    mults = {k: v for k, v in sorted(values.items()) if not k.startswith(("P_", "K_"))}
    return ControllerArtifact(
        P=P, K=np.atleast_2d(K), rho1=problem.rho1, rho2=rho2, rho3=problem.rho3,
        eps=problem.eps, margin=float(masked),
        block_report={k: (float(a), float(b)) for k, (a, b) in margins.items()},
        multipliers=mults, system_hash=system_hash(problem.sys),
        solver={
            "status": report.status,
            "iterations": report.iterations,
            "primal_residual": report.primal_residual,
            "dual_residual": report.dual_residual,
        },
    )


def _slope_cover(sys: DCSystem, cap=256):
    """Covering family of affine drift matrices: per-dimension selections
    of gamma/eta slope rows at every vertex."""
    n = sys.n
    covers = set()
    for vx in sys.vertices:
        per_dim = []
        for i in range(n):
            rows = set()
            grows = [tuple(ly.E[i]) for ly in vx.gamma_layers] or [tuple(np.zeros(n))]
            erows = [tuple(ly.E[i]) for ly in vx.eta_layers] or [tuple(np.zeros(n))]
            for gr in set(grows):
                for er in set(erows):
                    rows.add(tuple(np.array(gr) - np.array(er)))
            per_dim.append(sorted(rows))
        combos = [[]]
        for rows in per_dim:
            combos = [c + [r] for c in combos for r in rows]
            if len(combos) > cap:
                return None
        for combo in combos:
            covers.add(tuple(np.round(np.array(combo).reshape(-1), 12)))
    return [sys.A + np.array(c).reshape(n, n) for c in sorted(covers)]


def init_gain(problem: SynthesisProblem, settings=None):
    """Deterministic, input-aware initial gain from a common-quadratic design.

    Enumerates the per-dimension slope selections of both convex parts at
    every vertex (a covering family of affine dynamics) and solves the
    classical robust state-feedback LMI in (Q, Z = F Q), with the state
    box inside the ellipsoid {x^T Q^-1 x <= 1} and the gain image inside
    the input ellipsoid, so the initial policy respects the input set on
    the box.  F = Z Q^-1 is embedded into the state-observation columns
    of K.  Falls back to zero when the cover is too large, the LMI is
    infeasible, or the state is not directly observed.
    """
    sys = problem.sys
    n, m = sys.n, sys.m
    A_list = _slope_cover(sys)
    if A_list is None:
        return np.zeros((m, sys.p))

    cf = ConicFeasibility(t_cap=1.0)
    qn = [(f"Q_{a}_{b}", a, b) for a in range(n) for b in range(a, n)]
    zn = [(f"Z_{i}_{j}", i, j) for i in range(m) for j in range(n)]
    for name, *_ in qn + zn:
        cf.ensure_var(name)

    def q_basis(a, bb):
        E = np.zeros((n, n))
        E[a, bb] = E[bb, a] = 1.0
        return E

    for idx, Ai in enumerate(A_list):
        b = _Builder(2 * n)
        for name, a, bb in qn:
            E = q_basis(a, bb)
            b.add(name, problem.rho3 * E)
            b.add(name, E, n, n)
            b.add(name, Ai @ E, n, 0)
        for name, i, j in zn:
            E = np.zeros((m, n))
            E[i, j] = 1.0
            b.add(name, sys.B @ E, n, 0)
        const, coeffs = b.symmetrized()
        cf.add_block(f"cover[{idx}]", const, coeffs, mask=None)

    # state box inside the ellipsoid {x^T Q^-1 x <= 1}
    corners = [np.array(c) for c in
               np.array(np.meshgrid(*[problem.sys.state_box[i] for i in range(n)],
                                    indexing="ij")).reshape(n, -1).T]
    for idx, corner in enumerate(corners):
        b = _Builder(1 + n)
        cmat = np.array([[1.0]])
        b.add_const(cmat)
        b.add_const(corner.reshape(n, 1), 1, 0)
        for name, a, bb in qn:
            b.add(name, q_basis(a, bb), 1, 1)
        const, coeffs = b.symmetrized()
        cf.add_block(f"corner[{idx}]", const, coeffs, mask=np.array(0.0))

    # gain image inside the input ellipsoid on that set
    w, Vq = np.linalg.eigh(sys.Q_u)
    qu_sqrt = (Vq * np.sqrt(w)) @ Vq.T
    b = _Builder(n + m)
    b.add_const(np.eye(m), n, n)
    for name, a, bb in qn:
        b.add(name, q_basis(a, bb))
    for name, i, j in zn:
        E = np.zeros((m, n))
        E[i, j] = 1.0
        b.add(name, qu_sqrt @ E, n, 0)
    const, coeffs = b.symmetrized()
    cf.add_block("input-image", const, coeffs, mask=np.array(0.0))

    # scale normalization keeps the margin problem bounded
    kappa = 4.0 * max(1.0, max(float(c @ c) for c in corners))
    b = _Builder(n)
    b.add_const(kappa * np.eye(n))
    for name, a, bb in qn:
        b.add(name, -q_basis(a, bb))
    const, coeffs = b.symmetrized()
    cf.add_block("normalize", const, coeffs, mask=np.array(0.0))

    report, values = solve(cf, settings or SolveSettings(max_iters=40_000))
    if report.status != "optimal-margin" or report.margin <= 1e-9:
        return np.zeros((m, sys.p))
    Q = np.zeros((n, n))
    for name, a, bb in qn:
        Q[a, bb] = Q[bb, a] = values[name]
    Z = np.zeros((m, n))
    for name, i, j in zn:
        Z[i, j] = values[name]
    try:
        F = Z @ np.linalg.inv(Q)
    except np.linalg.LinAlgError:
        return np.zeros((m, sys.p))

    K0 = np.zeros((m, sys.p))
    eye = np.eye(problem.layout.n_chi)
    for i in range(n):
        match = [r for r in range(sys.p) if np.array_equal(sys.C[r], eye[1 + i])]
        if not match:
            return np.zeros((m, sys.p))
        K0[:, match[0]] = F[:, i]
    return K0


def refresh_coupling(problem: SynthesisProblem, K, values):
    """Closed-form (T, V) from a solved point, for the gain-update step.

    T = Y/2 + nu I and V = Ubar Y / 2 with Ubar the vertex-average of
    U_q(K); at a single vertex this choice makes the coupled form exactly
    as tight as the direct one.
    """
    d_y = problem.layout.d_y
    Y = np.zeros((d_y, d_y))
    P = values_to_P(problem, values)
    Y[: problem.n_lam, : problem.n_lam] = P
    offs = _y_offsets(problem)
    mults = multiplier_values(problem, values, "nxt")
    n = problem.layout.n
    for key, o in offs.items():
        C = mults[key]["cross"]
        Y[o:o + n, o + n:o + 2 * n] = 0.5 * C
        Y[o + n:o + 2 * n, o:o + n] = 0.5 * C.T
    Us = [_u_q(problem, K, q) for q in range(problem.sys.n_vertices)]
    Ubar = sum(Us) / len(Us)
    nu = 1e-3 * max(1.0, float(np.linalg.norm(Y, 2)))
    T = 0.5 * Y + nu * np.eye(d_y)
    V = 0.5 * (Ubar @ Y)
    F_plus = {key: entry["F_plus"] for key, entry in mults.items()
              if "F_plus" in entry}
    return T, V, F_plus


def _gain_step(problem: SynthesisProblem, T, V, F_plus=None, settings=None):
    """Solve the coupled families for an improved gain."""
    cf = ConicFeasibility(t_cap=1.0)
    for name, *_ in problem.p_var_names():
        cf.ensure_var(name)
    for name, *_ in problem.k_var_names():
        cf.ensure_var(name)
    assemble_posdef(problem, cf)
    assemble_input(problem, cf, K=None)
    assemble_decrease_coupled(problem, cf, T, V, F_plus=F_plus)
    report, values = solve(cf, settings)
    return report, values


def alternate_bmi(problem: SynthesisProblem, init_K, rounds, settings=None,
                  trace=None):
    """Alternating refinement of (certificate, gain); accept-only-improving.

    Each round: certify the current gain exactly; refresh the coupling
    matrices from the solution; solve the coupled (jointly linear) form
    for a new gain; keep whichever certified margin is best.  With
    rounds=0 this is a single certification of init_K.
    """
    best = None

    def consider(K):
        nonlocal best
        report, values, cf, margins = certify_gain(problem, K, settings)
        masked = min(m for m, _ in margins.values())
        if trace is not None:
            trace.append(("certify", report.status, masked))
        if report.status == "numerical-failure":
            return None
        cand = (masked, K, values, margins, report)
        if best is None or masked > best[0] + 1e-12:
            best = cand
        return cand

    current = consider(np.atleast_2d(init_K))
    for _ in range(max(0, int(rounds))):
        if best is None:
            break
        if best[0] >= problem.eps:
            break
        _, K_cur, vals_cur, _, _ = best
        T, V, F_plus = refresh_coupling(problem, K_cur, vals_cur)
        rep, vals = _gain_step(problem, T, V, F_plus, settings)
        if trace is not None:
            trace.append(("gain-step", rep.status, rep.margin))
        if rep.status == "numerical-failure":
            continue
        K_new = values_to_K(problem, vals)
        cand = consider(K_new)
        if cand is None:
            continue

    if best is None:
        raise NumericalFailure("certificate solves failed on every attempt")
    masked, K, values, margins, report = best
    return _artifact_from_solution(problem, K, values, margins, report)


def synthesize(problem: SynthesisProblem, settings=None, rounds=6,
               init_K=None) -> ControllerArtifact:
    """Full synthesis: deterministic init, alternation, margin gate.

    Raises Infeasible when no certificate reaches the requested margin
    within the round budget.
    """
    if init_K is None:
        init_K = init_gain(problem, settings)
    artifact = alternate_bmi(problem, init_K, rounds, settings)
    if artifact.margin < problem.eps:
        raise Infeasible(
            f"best certified margin {artifact.margin:.3e} below target "
            f"{problem.eps:.1e}; consider relaxing rho1/rho3 or the input set"
        )
    return artifact


def grid_search(sys: DCSystem, rho1=1e-3, eps=1e-6,
                rho3_values=(0.995, 0.999, 0.99),
                u_max_values=(None, 100.0, 200.0), settings=None, rounds=4):
    """Scan (rho3, input-bound) pairs until synthesis succeeds.

    Returns (artifact, chosen, trace) with chosen = {"rho3":..., "u_max":...};
    u_max None keeps the system's own input ellipsoid.  Raises Infeasible
    when the whole grid fails.
    """
    trace = []
    for u_max in u_max_values:
        trial_sys = sys if u_max is None else sys.replace(
            Q_u=np.eye(sys.m) / float(u_max) ** 2)
        for rho3 in rho3_values:
            problem = make_problem(trial_sys, rho1=rho1, rho3=rho3, eps=eps)
            try:
                art = synthesize(problem, settings=settings, rounds=rounds)
                trace.append((rho3, u_max, "feasible", art.margin))
                return art, {"rho3": rho3, "u_max": u_max}, trace
            except (Infeasible, NumericalFailure) as exc:
                trace.append((rho3, u_max, "infeasible", str(exc)))
    raise Infeasible(f"grid exhausted without a feasible point: {trace}")


# ---------------------------------------------------------------------------
# policy / Lyapunov evaluation
# ---------------------------------------------------------------------------

def observe(sys: DCSystem, layout: LiftedLayout, x, sample: UncertaintySample):
    return sys.C @ build_chi(sys, layout, x, sample)


def eval_policy(artifact: ControllerArtifact, sys: DCSystem, layout: LiftedLayout,
                x, sample: UncertaintySample):
    y = observe(sys, layout, x, sample)
    if artifact.K.shape[1] != y.shape[0]:
        raise DimensionMismatch(
            f"gain expects {artifact.K.shape[1]} observations, got {y.shape[0]}")
    return artifact.K @ y


def eval_V(artifact: ControllerArtifact, sys: DCSystem, layout: LiftedLayout,
           x, sample: UncertaintySample):
    chi = build_chi(sys, layout, x, sample)
    z = np.zeros(1 + 3 * layout.n)
    z[0] = 1.0
    z[1:1 + layout.n] = chi[layout.x_slice]
    if layout.alpha > 0:
        z[1 + layout.n:1 + 2 * layout.n] = chi[layout.gamma_slice(layout.alpha - 1)]
    if layout.beta > 0:
        z[1 + 2 * layout.n:] = chi[layout.eta_slice(layout.beta - 1)]
    return float(z @ artifact.P @ z)
