"""Joint LMI feasibility problems and an embedded first-order solver.

A problem is a set of scalar decision variables, affine PSD blocks

    Const_b + sum_i z_i Coef_bi  >=  t * Mask_b,

scalar bounds, and the margin objective "maximize t" with t capped.  The
mask is the identity by default; certificate families whose value is
structurally pinned to zero along the equilibrium lift direction use a
mask that exempts exactly that coordinate (the cone constraint itself
still enforces plain positive semidefiniteness there).

The solver is ADMM on the slack form A_b(z) = X_b, X_b PSD: a cached
Cholesky solve for the affine step, batched eigendecompositions for the
cone projections, over-relaxation, and residual-balanced penalty updates
(the normal matrix does not depend on the penalty, so rebalancing is
free).  Everything is deterministic for fixed settings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionMismatch, NotSymmetric, NumericalFailure

__all__ = [
    "ConicBlock",
    "ConicFeasibility",
    "SolveSettings",
    "SolveReport",
    "solve",
    "eig_sym",
    "psd_project",
    "MARGIN_VAR",
]

MARGIN_VAR = "margin"


# ---------------------------------------------------------------------------
# symmetric eigendecomposition (cyclic Jacobi)
# ---------------------------------------------------------------------------

def eig_sym(M, tol=1e-13, max_sweeps=60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, orthonormal eigenvectors as columns).
    Kept free of LAPACK so it can serve as an independent re-check of
    solver output.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {M.shape}")
    scale = np.linalg.norm(M)
    if np.max(np.abs(M - M.T)) > 1e-12 * max(1.0, scale):
        raise NotSymmetric("matrix is not symmetric to 1e-12")

    n = M.shape[0]
    A = 0.5 * (M + M.T)
    Q = np.eye(n)
    if n == 1:
        return A[0, 0].reshape(1), Q

    for _ in range(max_sweeps):
        off = np.sqrt(max(0.0, np.sum(A**2) - np.sum(np.diag(A) ** 2)))
        if off <= tol * max(1.0, scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = 0.5 * (A[q, q] - A[p, p]) / apq
                # hypot avoids overflow for extreme rotation angles
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) \
                    if theta != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * A[:, p] - s * A[:, q]
                rot_q = s * A[:, p] + c * A[:, q]
                A[:, p], A[:, q] = rot_p, rot_q
                rot_p = c * A[p, :] - s * A[q, :]
                rot_q = s * A[p, :] + c * A[q, :]
                A[p, :], A[q, :] = rot_p, rot_q
                rot_p = c * Q[:, p] - s * Q[:, q]
                rot_q = s * Q[:, p] + c * Q[:, q]
                Q[:, p], Q[:, q] = rot_p, rot_q

    evals = np.diag(A).copy()
    order = np.argsort(evals, kind="stable")
    return evals[order], Q[:, order]


def psd_project(M):
    """Projection onto the PSD cone (LAPACK path, used inside the solver)."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    w = np.maximum(w, 0.0)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# problem container
# ---------------------------------------------------------------------------

@dataclass
class ConicBlock:
    name: str
    dim: int
    const: np.ndarray
    coeffs: dict                       # var name -> symmetric coefficient matrix
    mask: np.ndarray | None = None     # None = identity; 0-dim array 0 = no margin

    def materialize_mask(self):
        if self.mask is None:
            return np.eye(self.dim)
        m = np.asarray(self.mask, dtype=float)
        if m.ndim == 0:
            return np.zeros((self.dim, self.dim)) if float(m) == 0.0 else float(m) * np.eye(self.dim)
        return m


class ConicFeasibility:
    """Margin-form LMI feasibility problem over named scalar variables."""

    def __init__(self, t_cap=1.0):
        self.var_names: list[str] = []
        self._index: dict[str, int] = {}
        self.blocks: list[ConicBlock] = []
        self.nonneg: list[str] = []
        self.t_cap = float(t_cap)
        self.objective: dict[str, float] | None = None   # None = maximize margin

    # -- variables ---------------------------------------------------------
    def add_var(self, name):
        if name in self._index:
            raise ValueError(f"duplicate variable {name!r}")
        self._index[name] = len(self.var_names)
        self.var_names.append(name)

    def ensure_var(self, name):
        if name not in self._index:
            self.add_var(name)

    def index(self, name):
        return self._index[name]

    @property
    def n_vars(self):
        return len(self.var_names)

    # -- constraints -------------------------------------------------------
    def add_block(self, name, const, coeffs, mask=None):
        const = np.asarray(const, dtype=float)
        dim = const.shape[0]
        if const.shape != (dim, dim):
            raise DimensionMismatch(f"block {name}: constant must be square")
        clean = {}
        for var, mat in coeffs.items():
            mat = np.asarray(mat, dtype=float)
            if mat.shape != (dim, dim):
                raise DimensionMismatch(f"block {name}: coefficient of {var} has wrong shape")
            if np.max(np.abs(mat - mat.T)) > 1e-9 * max(1.0, np.max(np.abs(mat))):
                raise DimensionMismatch(f"block {name}: coefficient of {var} not symmetric")
            self.ensure_var(var)
            if np.any(mat):
                clean[var] = 0.5 * (mat + mat.T)
        self.blocks.append(ConicBlock(name=name, dim=dim,
                                      const=0.5 * (const + const.T),
                                      coeffs=clean, mask=mask))

    def add_nonneg(self, name):
        self.ensure_var(name)
        self.nonneg.append(name)

    def freeze_margin(self, t_value):
        """Copy of the problem with the margin fixed to a constant: every
        block constant absorbs -t * mask and the objective becomes pure
        feasibility.  Used to polish an interior point once the achievable
        margin is known."""
        out = ConicFeasibility(t_cap=self.t_cap)
        for nm in self.var_names:
            out.add_var(nm)
        out.nonneg = list(self.nonneg)
        out.objective = {}
        for b in self.blocks:
            out.add_block(b.name, b.const - t_value * b.materialize_mask(),
                          dict(b.coeffs), mask=b.mask)
        return out

    # -- lowering to plain arrays ------------------------------------------
    def lower(self):
        """Return (names, c, blocks) with the margin variable and scalar
        bound blocks materialized; blocks are (name, const, dense coef map)."""
        names = list(self.var_names)
        use_margin = self.objective is None
        if use_margin:
            names = names + [MARGIN_VAR]
        idx = {nm: i for i, nm in enumerate(names)}
        d = len(names)

        c = np.zeros(d)
        if use_margin:
            c[idx[MARGIN_VAR]] = -1.0
        else:
            for nm, w in self.objective.items():
                c[idx[nm]] = w

        lowered = []
        for b in self.blocks:
            coeffs = {idx[v]: m for v, m in b.coeffs.items()}
            if use_margin:
                mask = b.materialize_mask()
                if np.any(mask):
                    coeffs[idx[MARGIN_VAR]] = -mask
            lowered.append((b.name, b.const, coeffs, b.dim))
        for nm in self.nonneg:
            lowered.append((f"nonneg:{nm}", np.zeros((1, 1)),
                            {idx[nm]: np.ones((1, 1))}, 1))
        if use_margin:
            lowered.append(("margin-cap", np.array([[self.t_cap]]),
                            {idx[MARGIN_VAR]: -np.ones((1, 1))}, 1))
        return names, c, lowered


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

@dataclass
class SolveSettings:
    max_iters: int = 200_000
    tol_abs: float = 1e-9
    tol_rel: float = 1e-8
    sigma: float = 1.0
    over_relax: float = 1.6
    check_every: int = 25
    balance_every: int = 250
    stagnation_window: int = 10_000
    stagnation_level: float = 1e-4
    ridge: float = 1e-12


@dataclass
class SolveReport:
    status: str                 # optimal-margin | infeasible-budget | numerical-failure
    margin: float
    primal_residual: float
    dual_residual: float
    iterations: int
    wall_time: float
    block_names: list = field(default_factory=list)


class _Group:
    """Blocks of one dimension, stacked for batched linear algebra."""

    def __init__(self, dim, entries, d):
        self.dim = dim
        self.count = len(entries)
        rows = self.count * dim * dim
        self.A = np.zeros((rows, d))
        self.const = np.zeros(rows)
        ss = dim * dim
        for b, (const, coeffs, scale) in enumerate(entries):
            self.const[b * ss:(b + 1) * ss] = (const / scale).reshape(-1)
            for j, mat in coeffs.items():
                self.A[b * ss:(b + 1) * ss, j] = (mat / scale).reshape(-1)
        self.X = np.zeros(rows)
        self.U = np.zeros(rows)

    def project(self, vec):
        if self.dim == 1:
            return np.maximum(vec, 0.0)
        mats = vec.reshape(self.count, self.dim, self.dim)
        mats = 0.5 * (mats + np.transpose(mats, (0, 2, 1)))
        w, V = np.linalg.eigh(mats)
        w = np.maximum(w, 0.0)
        out = (V * w[:, None, :]) @ np.transpose(V, (0, 2, 1))
        out = 0.5 * (out + np.transpose(out, (0, 2, 1)))
        return out.reshape(-1)


def solve(problem: ConicFeasibility, settings: SolveSettings | None = None,
          stop_check=None, stop_every=5000):
    """Run the operator-splitting iteration; returns (report, values dict).

    stop_check: optional callable taking the current variable dict; when
    it returns True the iteration exits with status "target-reached"
    (used to stop as soon as an eigenvalue re-check certifies a target
    margin, independent of residual levels).
    """
    settings = settings or SolveSettings()
    names, c, lowered = problem.lower()
    d = len(names)
    block_names = [b[0] for b in lowered]

    by_dim = {}
    for _, const, coeffs, dim in lowered:
        scale = max([1.0, float(np.linalg.norm(const))]
                    + [float(np.linalg.norm(m)) for m in coeffs.values()])
        by_dim.setdefault(dim, []).append((const, coeffs, scale))
    groups = [_Group(dim, entries, d) for dim, entries in sorted(by_dim.items())]

    # column (variable) equilibration: unit-norm stacked coefficient columns
    col_sq = np.zeros(d)
    for g in groups:
        col_sq += np.sum(g.A**2, axis=0)
    col_scale = 1.0 / np.sqrt(np.maximum(col_sq, 1e-12))
    for g in groups:
        g.A = g.A * col_scale
    c = c * col_scale

    gram = np.zeros((d, d))
    for g in groups:
        gram += g.A.T @ g.A
    gram += settings.ridge * max(1.0, float(np.trace(gram)) / d) * np.eye(d)
    try:
        cho = cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded by ridge
        raise NumericalFailure(f"normal matrix not positive definite: {exc}")

    sigma = settings.sigma
    alpha = settings.over_relax
    z = np.zeros(d)

    start = time.perf_counter()
    rp = rd = np.inf
    best_stall = np.inf
    stall_since = 0
    status = "infeasible-budget"
    it = 0
    total_rows = sum(g.A.shape[0] for g in groups)
    for it in range(1, settings.max_iters + 1):
        rhs = -c / sigma
        for g in groups:
            rhs += g.A.T @ (g.X - g.U - g.const)
        z = cho_solve(cho, rhs)

        rp_sq = 0.0
        do_check = (it % settings.check_every == 0 or it == settings.max_iters)
        X_prev = [g.X for g in groups] if do_check else None
        for g in groups:
            az = g.A @ z + g.const
            rp_sq += float(np.sum((az - g.X) ** 2))
            az_r = alpha * az + (1.0 - alpha) * g.X
            Xn = g.project(az_r + g.U)
            g.U = g.U + az_r - Xn
            g.X = Xn

        if stop_check is not None and it % stop_every == 0:
            z_probe = z * col_scale
            if stop_check({nm: float(z_probe[i]) for i, nm in enumerate(names)}):
                status = "target-reached"
                rp = np.sqrt(rp_sq)
                break

        if do_check:
            rp = np.sqrt(rp_sq)
            dvec = np.zeros(d)
            for g, Xp in zip(groups, X_prev):
                dvec += g.A.T @ (g.X - Xp)
            rd = sigma * float(np.linalg.norm(dvec))
            x_norm = np.sqrt(sum(float(np.sum(g.X**2)) for g in groups))
            dual_scale = sigma * np.sqrt(sum(float(np.sum(g.U**2)) for g in groups))
            eps_p = settings.tol_abs * np.sqrt(total_rows) \
                + settings.tol_rel * max(x_norm, 1.0)
            eps_d = settings.tol_abs * np.sqrt(d) + settings.tol_rel * max(dual_scale, 1.0)
            if rp <= eps_p and rd <= eps_d:
                status = "optimal-margin"
                break

            level = max(rp / max(x_norm, 1.0), rd / max(dual_scale, 1.0))
            if level < best_stall * 0.999:
                best_stall = level
                stall_since = it
            elif level > settings.stagnation_level and \
                    it - stall_since > settings.stagnation_window:
                status = "numerical-failure"
                break

            if it % settings.balance_every < settings.check_every:
                rp_rel = rp / max(x_norm, 1.0)
                rd_rel = rd / max(dual_scale, 1.0)
                ratio = rp_rel / max(rd_rel, 1e-16)
                if ratio > 50.0 or ratio < 0.02:
                    factor = 2.0 if ratio > 1.0 else 0.5
                    new_sigma = float(np.clip(sigma * factor, 1e-6, 1e6))
                    if new_sigma != sigma:
                        rescale = sigma / new_sigma
                        sigma = new_sigma
                        for g in groups:
                            g.U = g.U * rescale

    wall = time.perf_counter() - start
    z = z * col_scale
    values = {nm: float(z[i]) for i, nm in enumerate(names)}
    margin = values.get(MARGIN_VAR, 0.0)
    report = SolveReport(status=status, margin=margin,
                         primal_residual=float(rp), dual_residual=float(rd),
                         iterations=it, wall_time=wall, block_names=block_names)
    return report, values


def evaluate_block(problem: ConicFeasibility, block: ConicBlock, values: dict):
    """Dense value of one block at a variable assignment (margin excluded)."""
    out = block.const.copy()
    for var, mat in block.coeffs.items():
        out = out + values[var] * mat
    return out


def block_margins(problem: ConicFeasibility, values: dict, use_jacobi=True):
    """Mask-aware certified margin of every block at the given assignment.

    For each block with mask P returns the largest t with value >= t P on
    the masked subspace, i.e. min over masked eigdirections; coordinates
    exempted by the mask only need plain PSD, reported separately as the
    block's smallest eigenvalue.
    """
    eig = eig_sym if use_jacobi else (lambda M: np.linalg.eigh(M))
    out = {}
    for b in problem.blocks:
        val = evaluate_block(problem, b, values)
        mask = b.materialize_mask()
        evals, _ = eig(0.5 * (val + val.T))
        lam_min = float(evals[0])
        if not np.any(mask):
            out[b.name] = (np.inf, lam_min)
            continue
        if np.array_equal(mask, np.eye(b.dim)):
            out[b.name] = (lam_min, lam_min)
            continue
        # generalized margin on the masked subspace: value - t*mask >= 0
        keep = np.where(np.diag(mask) > 0.5)[0]
        sub = val[np.ix_(keep, keep)]
        evals_sub, _ = eig(0.5 * (sub + sub.T))
        out[b.name] = (float(evals_sub[0]), lam_min)
    return out
