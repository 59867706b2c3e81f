"""SDPA sparse format (".dat-s") export and import.

The emitted problem is

    minimize    c^T x
    subject to  sum_i x_i F_bi - F_b0  >=  0   for every block b,

which is the documented semantics of the format.  Margin-form problems
are lowered first, so the margin variable appears as an ordinary column
and external solvers reproduce the same optimum.

Canonical output: no comment lines, one entry per line as
"matno blkno i j value" with 1-based upper-triangle indices sorted by
(block, matrix, row, column), zeros omitted, values in shortest
round-trip decimal form.  export(import(text)) is byte-identical for
text produced by export.
"""

from __future__ import annotations

import numpy as np

from .conic import ConicFeasibility
from .errors import ParseError

__all__ = ["export_sdpa", "import_sdpa"]


def _fmt(v: float) -> str:
    return repr(float(v))


def export_sdpa(problem: ConicFeasibility) -> str:
    names, c, lowered = problem.lower()
    mdim = len(names)
    lines = [str(mdim), str(len(lowered))]
    lines.append(" ".join(str(dim) for *_rest, dim in lowered))
    lines.append(" ".join(_fmt(ci) for ci in c))

    entries = []
    for b, (_name, const, coeffs, dim) in enumerate(lowered, start=1):
        # constant side: F_0 = -const so that sum x_i F_i - F_0 = const + sum x_i Coef_i
        f0 = -const
        for i in range(dim):
            for j in range(i, dim):
                if f0[i, j] != 0.0:
                    entries.append((0, b, i + 1, j + 1, f0[i, j]))
        for var_idx in sorted(coeffs):
            mat = coeffs[var_idx]
            for i in range(dim):
                for j in range(i, dim):
                    if mat[i, j] != 0.0:
                        entries.append((var_idx + 1, b, i + 1, j + 1, mat[i, j]))

    entries.sort(key=lambda e: (e[1], e[0], e[2], e[3]))
    for k, b, i, j, v in entries:
        lines.append(f"{k} {b} {i} {j} {_fmt(v)}")
    return "\n".join(lines) + "\n"


def import_sdpa(text: str) -> ConicFeasibility:
    raw = text.splitlines()
    lines = []
    for lineno, content in enumerate(raw, start=1):
        stripped = content.strip()
        if not stripped or stripped.startswith("*") or stripped.startswith('"'):
            continue
        lines.append((lineno, stripped))
    if len(lines) < 4:
        raise ParseError("file too short: need mDIM, nBLOCK, blockStruct, objective")

    def parse_int(lineno, token, what):
        try:
            return int(token)
        except ValueError:
            raise ParseError(f"expected integer {what}, got {token!r}", line=lineno)

    lineno, tok = lines[0]
    mdim = parse_int(lineno, tok.split()[0], "mDIM")
    lineno, tok = lines[1]
    nblock = parse_int(lineno, tok.split()[0], "nBLOCK")
    if mdim < 1 or nblock < 1:
        raise ParseError("mDIM and nBLOCK must be positive", line=lines[1][0])

    lineno, tok = lines[2]
    struct_tokens = tok.replace(",", " ").replace("(", " ").replace(")", " ").split()
    if len(struct_tokens) != nblock:
        raise ParseError(
            f"blockStruct has {len(struct_tokens)} entries, expected {nblock}",
            line=lineno,
        )
    dims = []
    for t in struct_tokens:
        s = parse_int(lineno, t, "blockStruct entry")
        if s == 0:
            raise ParseError("blockStruct entry must be nonzero", line=lineno)
        dims.append(abs(s))

    lineno, tok = lines[3]
    obj_tokens = tok.replace(",", " ").split()
    if len(obj_tokens) != mdim:
        raise ParseError(f"objective row has {len(obj_tokens)} entries, expected {mdim}",
                         line=lineno)
    try:
        c = [float(t) for t in obj_tokens]
    except ValueError:
        raise ParseError("objective row contains a non-numeric entry", line=lineno)

    consts = [np.zeros((s, s)) for s in dims]
    coeffs = [dict() for _ in dims]
    for lineno, tok in lines[4:]:
        parts = tok.replace(",", " ").split()
        if len(parts) != 5:
            raise ParseError(f"entry line needs 5 fields, got {len(parts)}", line=lineno)
        k = parse_int(lineno, parts[0], "matrix number")
        b = parse_int(lineno, parts[1], "block number")
        i = parse_int(lineno, parts[2], "row index")
        j = parse_int(lineno, parts[3], "column index")
        try:
            v = float(parts[4])
        except ValueError:
            raise ParseError(f"non-numeric value {parts[4]!r}", line=lineno)
        if not 0 <= k <= mdim:
            raise ParseError(f"matrix number {k} out of range [0, {mdim}]", line=lineno)
        if not 1 <= b <= nblock:
            raise ParseError(f"block number {b} out of range [1, {nblock}]", line=lineno)
        s = dims[b - 1]
        if not (1 <= i <= j <= s):
            raise ParseError(f"indices ({i}, {j}) invalid for upper triangle of size {s}",
                             line=lineno)
        if k == 0:
            consts[b - 1][i - 1, j - 1] = v
            consts[b - 1][j - 1, i - 1] = v
        else:
            mat = coeffs[b - 1].setdefault(k - 1, np.zeros((s, s)))
            mat[i - 1, j - 1] = v
            mat[j - 1, i - 1] = v

    problem = ConicFeasibility()
    var_names = [f"x{i + 1}" for i in range(mdim)]
    for nm in var_names:
        problem.add_var(nm)
    problem.objective = {nm: ci for nm, ci in zip(var_names, c)}
    for b in range(nblock):
        problem.add_block(
            f"block{b + 1}",
            -consts[b],   # stored F_0; our block constant is -F_0
            {var_names[k]: mat for k, mat in sorted(coeffs[b].items())},
            mask=np.array(0.0),
        )
    return problem
