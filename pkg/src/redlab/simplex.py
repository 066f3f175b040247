"""Dense exact simplex for the small stability LPs.

Two-phase primal simplex over ``fractions.Fraction`` with Bland's rule, so
results are exact and deterministic (no float pivots, no cycling).  Meant
for the tiny instances this package generates (hundreds of variables);
everything is O(rows * cols) per pivot on Python rationals.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

__all__ = ["LpResult", "solve_lp_max"]

_ZERO = Fraction(0)
_ONE = Fraction(1)


@dataclass(frozen=True)
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    objective: Fraction | None
    x: tuple[Fraction, ...] | None


def _frac(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(v)


def _pivot(rows, zrow, basis, r, c):
    piv = rows[r][c]
    rows[r] = [v / piv for v in rows[r]]
    prow = rows[r]
    for i, row in enumerate(rows):
        if i != r and row[c]:
            f = row[c]
            rows[i] = [a - f * b for a, b in zip(row, prow)]
    if zrow[c]:
        f = zrow[c]
        zrow[:] = [a - f * b for a, b in zip(zrow, prow)]
    basis[r] = c


def _iterate(rows, zrow, basis, ncols):
    """Pivot to optimality (Bland's rule). Returns False when unbounded."""
    while True:
        col = next((j for j in range(ncols) if zrow[j] > 0), None)
        if col is None:
            return True
        best_r, best_key = None, None
        for r, row in enumerate(rows):
            if row[col] > 0:
                key = (row[-1] / row[col], basis[r])
                if best_key is None or key < best_key:
                    best_r, best_key = r, key
        if best_r is None:
            return False
        _pivot(rows, zrow, basis, best_r, col)


def _reduced_costs(rows, basis, costs):
    """zrow[j] = c_j - c_B B^-1 A_j; the trailing entry tracks -objective."""
    zrow = list(costs) + [_ZERO]
    for r, b in enumerate(basis):
        f = costs[b]
        if f:
            zrow = [a - f * v for a, v in zip(zrow, rows[r])]
    return zrow


def solve_lp_max(
    c: Sequence,
    a_ub: Sequence[Sequence] = (),
    b_ub: Sequence = (),
    a_eq: Sequence[Sequence] = (),
    b_eq: Sequence = (),
) -> LpResult:
    """Maximize c.x subject to a_ub.x <= b_ub, a_eq.x = b_eq, x >= 0."""
    n = len(c)
    c = [_frac(v) for v in c]

    bodies = []
    rhs = []
    kinds = []
    for row, b in zip(a_eq, b_eq):
        bodies.append([_frac(v) for v in row])
        rhs.append(_frac(b))
        kinds.append("eq")
    for row, b in zip(a_ub, b_ub):
        bodies.append([_frac(v) for v in row])
        rhs.append(_frac(b))
        kinds.append("ub")
    m = len(bodies)

    # Layout: x (n) | slacks (one per ub row) | artificials (as needed).
    n_slack = sum(1 for k in kinds if k == "ub")
    width = n + n_slack
    rows = []
    seed_basis = []  # column seeding the basis for each row, or None
    s = 0
    for r in range(m):
        body = bodies[r] + [_ZERO] * n_slack
        if kinds[r] == "ub":
            slack_col = n + s
            s += 1
            body[slack_col] = _ONE
        else:
            slack_col = None
        b = rhs[r]
        if b < 0:
            body = [-v for v in body]
            b = -b
            slack_col = None  # slack coefficient is now -1, cannot seed basis
        rows.append(body + [b])
        seed_basis.append(slack_col)

    art_cols = []
    basis = []
    for r in range(m):
        if seed_basis[r] is None:
            art_cols.append(width)
            basis.append(width)
            width += 1
        else:
            basis.append(seed_basis[r])
    for r in range(m):
        body, b = rows[r][:-1], rows[r][-1]
        body += [_ZERO] * (width - len(body))
        if basis[r] >= n + n_slack:
            body[basis[r]] = _ONE
        rows[r] = body + [b]

    if art_cols:
        phase1 = [_ZERO] * width
        for col in art_cols:
            phase1[col] = Fraction(-1)
        zrow = _reduced_costs(rows, basis, phase1)
        if not _iterate(rows, zrow, basis, width):
            raise RuntimeError("phase 1 cannot be unbounded")
        art_set = set(art_cols)
        if any(rows[r][-1] != 0 for r in range(m) if basis[r] in art_set):
            return LpResult("infeasible", None, None)
        # Drive remaining zero-valued artificials out of the basis.
        for r in range(m):
            if basis[r] in art_set:
                col = next((j for j in range(n + n_slack) if rows[r][j] != 0), None)
                if col is not None:
                    _pivot(rows, zrow, basis, r, col)
        keep = [r for r in range(m) if basis[r] not in art_set]
        rows = [rows[r][: n + n_slack] + [rows[r][-1]] for r in keep]
        basis = [basis[r] for r in keep]
        m = len(rows)
        width = n + n_slack

    costs = c + [_ZERO] * (width - n)
    zrow = _reduced_costs(rows, basis, costs)
    if not _iterate(rows, zrow, basis, width):
        return LpResult("unbounded", None, None)

    x = [_ZERO] * n
    for r, b in enumerate(basis):
        if b < n:
            x[b] = rows[r][-1]
    objective = sum((ci * xi for ci, xi in zip(c, x)), _ZERO)
    return LpResult("optimal", objective, tuple(x))
