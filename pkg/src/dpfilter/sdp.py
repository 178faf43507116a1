"""Small dense semidefinite programs.

A problem is written with :class:`AffineExpr` matrix expressions over named
matrix variables and a list of linear matrix inequalities. Solving goes
through a primal-dual interior-point cone solver (cvxopt); every returned
solution is re-checked by eigenvalues before it is handed back.

Problems can be written to and read back from a plain-text triplet format
(see :func:`dump_triplets`) to cross-check against external solvers.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError

__all__ = [
    "AffineExpr",
    "bmat",
    "SdpProblem",
    "SdpSolution",
    "SdpInfeasible",
    "SdpNumericalError",
    "solve_sdp",
    "dump_triplets",
    "load_triplets",
]


class AffineExpr:
    """Matrix ``const + sum_j x_j * terms[j]`` affine in the scalar unknowns."""

    __array_ufunc__ = None  # make ndarray @ expr dispatch to __rmatmul__

    def __init__(self, const, terms=None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.terms = {} if terms is None else terms

    @property
    def shape(self):
        return self.const.shape

    @property
    def T(self):
        return AffineExpr(self.const.T, {j: M.T for j, M in self.terms.items()})

    def _combine(self, other, sign):
        other = as_expr(other, self.shape)
        if other.shape != self.shape:
            raise DimensionError(f"shape mismatch {self.shape} vs {other.shape}")
        terms = dict(self.terms)
        for j, M in other.terms.items():
            terms[j] = terms[j] + sign * M if j in terms else sign * M
        return AffineExpr(self.const + sign * other.const, terms)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return as_expr(other, self.shape)._combine(self, -1.0)

    def __neg__(self):
        return AffineExpr(-self.const, {j: -M for j, M in self.terms.items()})

    def __mul__(self, a):
        if isinstance(a, AffineExpr):
            raise TypeError("product of two affine expressions is not affine")
        if np.ndim(a) == 2:
            if self.shape != (1, 1):
                raise TypeError("use @ for matrix products")
            M = np.asarray(a, dtype=float)
            return AffineExpr(self.const[0, 0] * M,
                              {j: T[0, 0] * M for j, T in self.terms.items()})
        a = float(a)
        return AffineExpr(a * self.const, {j: a * M for j, M in self.terms.items()})

    __rmul__ = __mul__

    def __truediv__(self, a):
        return self * (1.0 / float(a))

    def __matmul__(self, M):
        if isinstance(M, AffineExpr):
            raise TypeError("product of two affine expressions is not affine")
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return AffineExpr(self.const @ M, {j: T @ M for j, T in self.terms.items()})

    def __rmatmul__(self, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return AffineExpr(M @ self.const, {j: M @ T for j, T in self.terms.items()})

    def trace(self):
        return AffineExpr(np.trace(self.const),
                          {j: np.atleast_2d(np.trace(M)) for j, M in self.terms.items()})

    def value(self, x):
        out = self.const.copy()
        for j, M in self.terms.items():
            out += x[j] * M
        return out

    def __repr__(self):
        return f"AffineExpr(shape={self.shape}, n_terms={len(self.terms)})"


def as_expr(x, shape=None):
    if isinstance(x, AffineExpr):
        return x
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 and shape is not None:
        if arr != 0 and shape[0] != shape[1]:
            raise DimensionError("scalar can only be broadcast as zero here")
        arr = float(arr) * np.eye(shape[0]) if arr != 0 else np.zeros(shape)
    return AffineExpr(arr)


def bmat(blocks):
    """Assemble a block matrix of expressions.

    ``None`` or ``0`` entries become zero blocks sized from their row and
    column neighbours.
    """
    nr, nc = len(blocks), len(blocks[0])
    rows = [None] * nr
    cols = [None] * nc
    for i, row in enumerate(blocks):
        if len(row) != nc:
            raise DimensionError("ragged block rows")
        for j, b in enumerate(row):
            if b is None or (np.isscalar(b) and b == 0):
                continue
            shp = as_expr(b).shape
            if rows[i] is None:
                rows[i] = shp[0]
            if cols[j] is None:
                cols[j] = shp[1]
            if (rows[i], cols[j]) != shp:
                raise DimensionError(f"block ({i},{j}) has shape {shp}, "
                                     f"expected {(rows[i], cols[j])}")
    if any(r is None for r in rows) or any(c is None for c in cols):
        raise DimensionError("cannot infer the size of an all-zero block row/column")
    roff = np.r_[0, np.cumsum(rows)]
    coff = np.r_[0, np.cumsum(cols)]
    const = np.zeros((roff[-1], coff[-1]))
    terms = {}
    for i, row in enumerate(blocks):
        for j, b in enumerate(row):
            if b is None or (np.isscalar(b) and b == 0):
                continue
            e = as_expr(b)
            rs, cs = slice(roff[i], roff[i + 1]), slice(coff[j], coff[j + 1])
            const[rs, cs] = e.const
            for k, M in e.terms.items():
                if k not in terms:
                    terms[k] = np.zeros_like(const)
                terms[k][rs, cs] += M
    return AffineExpr(const, terms)


@dataclass
class _Variable:
    name: str
    shape: tuple
    symmetric: bool
    offset: int
    size: int


@dataclass
class _Constraint:
    expr: AffineExpr
    strict: bool
    name: str


class SdpProblem:
    """Linear objective over matrix variables subject to LMIs ``expr >= 0``.

    Strict inequalities are enforced as ``expr >= margin * I`` with
    ``margin = strict_tol * max(1, ||const||_F)`` of that block.
    """

    def __init__(self, strict_tol=1e-8):
        self.strict_tol = strict_tol
        self.variables: dict[str, _Variable] = {}
        self.constraints: list[_Constraint] = []
        self.objective: AffineExpr | None = None
        self.n_scalars = 0

    def variable(self, name, shape, symmetric=False) -> AffineExpr:
        if name in self.variables:
            raise ValueError(f"duplicate variable {name!r}")
        if isinstance(shape, int):
            shape = (shape, shape) if symmetric else (shape, 1)
        m, k = shape
        if symmetric and m != k:
            raise DimensionError("symmetric variables must be square")
        terms = {}
        j = self.n_scalars
        if symmetric:
            for a in range(m):
                for b in range(a, m):
                    E = np.zeros((m, m))
                    E[a, b] = E[b, a] = 1.0
                    terms[j] = E
                    j += 1
        else:
            for a in range(m):
                for b in range(k):
                    E = np.zeros((m, k))
                    E[a, b] = 1.0
                    terms[j] = E
                    j += 1
        self.variables[name] = _Variable(name, (m, k), symmetric,
                                         self.n_scalars, j - self.n_scalars)
        self.n_scalars = j
        return AffineExpr(np.zeros((m, k)), terms)

    def scalar(self, name) -> AffineExpr:
        return self.variable(name, (1, 1))

    def psd(self, expr, strict=True, name=None):
        """Require the symmetric expression to be positive (semi)definite."""
        expr = as_expr(expr)
        m, k = expr.shape
        if m != k:
            raise DimensionError(f"LMI block must be square, got {expr.shape}")
        asym = np.max(np.abs(expr.const - expr.const.T), initial=0.0)
        for M in expr.terms.values():
            asym = max(asym, np.max(np.abs(M - M.T), initial=0.0))
        if asym > 1e-12 * max(1.0, np.max(np.abs(expr.const), initial=0.0)):
            raise DimensionError(f"LMI {name or len(self.constraints)} is not symmetric")
        expr = AffineExpr(0.5 * (expr.const + expr.const.T),
                          {j: 0.5 * (M + M.T) for j, M in expr.terms.items()})
        self.constraints.append(_Constraint(expr, strict, name or f"c{len(self.constraints)}"))

    def le(self, lhs, rhs, strict=False, name=None):
        """Scalar inequality ``lhs <= rhs``."""
        diff = as_expr(rhs) - as_expr(lhs)
        if diff.shape != (1, 1):
            raise DimensionError("le() takes scalar expressions")
        self.psd(diff, strict=strict, name=name)

    def minimize(self, expr):
        expr = as_expr(expr)
        if expr.shape != (1, 1):
            raise DimensionError("objective must be scalar")
        self.objective = expr

    def margin(self, c: _Constraint) -> float:
        if not c.strict:
            return 0.0
        return self.strict_tol * max(1.0, float(np.linalg.norm(c.expr.const)))

    def values(self, x) -> dict:
        out = {}
        for v in self.variables.values():
            seg = x[v.offset:v.offset + v.size]
            m, k = v.shape
            if v.symmetric:
                M = np.zeros((m, m))
                M[np.triu_indices(m)] = seg
                M = M + np.triu(M, 1).T
            else:
                M = np.asarray(seg).reshape(m, k)
            out[v.name] = M
        return out


@dataclass
class SdpSolution:
    x: np.ndarray
    values: dict
    objective: float
    status: str
    iterations: int
    gap: float
    min_eigs: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]


class SdpInfeasible(Exception):
    """No point satisfies the constraints.

    ``best_min_eig`` is the largest achievable minimum eigenvalue over all
    blocks (negative for an infeasible problem).
    """

    def __init__(self, message, best_min_eig=None, status=None):
        super().__init__(message)
        self.best_min_eig = best_min_eig
        self.status = status


class SdpNumericalError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


def _cone_data(problem: SdpProblem, shift=None):
    """cvxopt ``G x + s = h`` data; scalar blocks go to the linear cone."""
    N = problem.n_scalars + (1 if shift is not None else 0)
    lin_G, lin_h, sdp_G, sdp_h, sizes = [], [], [], [], []
    for c in problem.constraints:
        m = c.expr.shape[0]
        Gc = np.zeros((m * m, N))
        for j, M in c.expr.terms.items():
            Gc[:, j] = -M.ravel(order="F")
        const = c.expr.const - problem.margin(c) * np.eye(m)
        if shift is not None:
            Gc[:, -1] = np.eye(m).ravel(order="F")
        if m == 1:
            lin_G.append(Gc)
            lin_h.append(const.ravel())
        else:
            sdp_G.append(Gc)
            sdp_h.append(const.ravel(order="F"))
            sizes.append(m)
    G = np.vstack(lin_G + sdp_G) if (lin_G or sdp_G) else np.zeros((0, N))
    h = np.concatenate(lin_h + sdp_h) if (lin_h or sdp_h) else np.zeros(0)
    dims = {"l": len(lin_G), "q": [], "s": sizes}
    return G, h, dims


def _objective_vector(problem):
    c = np.zeros(problem.n_scalars)
    off = 0.0
    if problem.objective is not None:
        off = float(problem.objective.const[0, 0])
        for j, M in problem.objective.terms.items():
            c[j] = M[0, 0]
    return c, off


# KKT factorisations tried in order when the interior-point iteration breaks
# down; the last entry also relaxes the tolerance. Certificates are checked
# afterwards regardless of which attempt succeeded.
_ATTEMPTS = ((None, 1.0), ("chol", 1.0), ("ldl", 10.0), (None, 100.0))


def _run_conelp(c, G, h, dims, tol, max_iter, kktsolver=None):
    from cvxopt import matrix, solvers

    opts = {"show_progress": False, "abstol": tol, "reltol": tol,
            "feastol": tol, "maxiters": max_iter}
    kw = {} if kktsolver is None else {"kktsolver": kktsolver}
    return solvers.conelp(matrix(c), matrix(G), matrix(h), dims, options=opts, **kw)


def _run_robust(c, G, h, dims, tol, max_iter):
    err, stalled = None, None
    for kkt, relax in _ATTEMPTS:
        try:
            sol = _run_conelp(c, G, h, dims, tol * relax, max_iter, kkt)
        except (ArithmeticError, ValueError) as exc:
            err = exc
            continue
        if sol["status"] == "unknown":
            if sol["x"] is not None:
                stalled = sol
            continue
        return sol
    if stalled is not None:
        return stalled
    raise SdpNumericalError(f"cone solver failed: {err}", {"error": str(err)})


def _min_eigs(problem, x):
    out = {}
    for c in problem.constraints:
        M = c.expr.value(x)
        out[c.name] = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    return out


def _phase_one(problem, tol, max_iter, box=1e6):
    """Largest ``t`` with every block ``>= t I`` (``t <= 1``, ``|x| <= box``)."""
    N = problem.n_scalars
    G, h, dims = _cone_data(problem, shift=True)
    extra_G = np.zeros((2 * N + 1, N + 1))
    extra_h = np.zeros(2 * N + 1)
    extra_G[:N, :N] = np.eye(N)
    extra_G[N:2 * N, :N] = -np.eye(N)
    extra_h[:2 * N] = box
    extra_G[2 * N, N] = 1.0
    extra_h[2 * N] = 1.0
    nl = dims["l"]
    G = np.vstack([extra_G, G])
    h = np.concatenate([extra_h, h])
    dims = {"l": nl + 2 * N + 1, "q": [], "s": dims["s"]}
    cvec = np.zeros(N + 1)
    cvec[-1] = -1.0
    try:
        sol = _run_robust(cvec, G, h, dims, tol, max_iter)
    except SdpNumericalError:
        return None
    if sol["x"] is None:
        return None
    return float(np.array(sol["x"]).ravel()[-1])


def solve_sdp(problem: SdpProblem, tol=1e-9, max_iter=200, cert_tol=1e-7,
              stall_tol=1e-4) -> SdpSolution:
    """Solve ``problem``; raise :class:`SdpInfeasible` if it has no solution.

    A returned solution satisfies every block with minimum eigenvalue at
    least ``-cert_tol * (1 + ||block||)``. Its duality gap is below ``tol``
    when ``status == "optimal"``; an iteration that stalls is accepted only
    if its relative gap is below ``stall_tol`` (``status == "unknown"``, gap
    reported in ``SdpSolution.gap``).
    """
    if not problem.constraints:
        raise DimensionError("problem has no constraints")
    used = set()
    for c in problem.constraints:
        used.update(c.expr.terms)
    if problem.objective is not None:
        used.update(problem.objective.terms)
    unused = set(range(problem.n_scalars)) - used
    if unused:
        raise DimensionError(f"{len(unused)} scalar unknowns appear nowhere")

    c, off = _objective_vector(problem)
    G, h, dims = _cone_data(problem)
    sol = _run_robust(c, G, h, dims, tol, max_iter)
    status = sol["status"]
    if status in ("primal infeasible", "dual infeasible") or sol["x"] is None:
        if status == "dual infeasible":
            raise SdpNumericalError("objective is unbounded below",
                                    {"status": status})
        best = _phase_one(problem, tol, max_iter)
        raise SdpInfeasible(
            f"LMIs are infeasible (best attainable min eigenvalue {best})",
            best_min_eig=best, status=status)
    x = np.array(sol["x"]).ravel()
    mins = _min_eigs(problem, x)
    worst = 0.0
    for cons in problem.constraints:
        scale = 1.0 + np.linalg.norm(cons.expr.value(x))
        worst = min(worst, mins[cons.name] / scale)
    gap = sol.get("relative gap")
    gap = float(gap) if gap is not None else math.nan
    report = {"status": status, "iterations": sol.get("iterations"),
              "relative_gap": gap, "worst_scaled_min_eig": worst,
              "primal_infeasibility": sol.get("primal infeasibility")}
    if worst < -cert_tol:
        if status != "optimal":
            best = _phase_one(problem, tol, max_iter)
            if best is not None and best < 0:
                raise SdpInfeasible(
                    f"LMIs are infeasible (best attainable min eigenvalue {best})",
                    best_min_eig=best, status=status)
        raise SdpNumericalError("solution violates an LMI beyond tolerance", report)
    if status != "optimal":
        obj_scale = 1.0 + abs(float(c @ x))
        abs_gap = sol.get("gap")
        if not ((gap == gap and gap <= stall_tol) or
                (abs_gap is not None and abs(abs_gap) <= stall_tol * obj_scale)):
            raise SdpNumericalError("interior-point method stalled", report)
    return SdpSolution(x=x, values=problem.values(x), objective=float(c @ x) + off,
                       status=status, iterations=int(sol.get("iterations") or 0),
                       gap=gap, min_eigs=mins)


def dump_triplets(problem: SdpProblem, fh=None) -> str:
    """Serialize ``problem`` in the sparse triplet text format.

    Layout (one record per line, ``#`` starts a comment)::

        dpfilter-sdp 1
        scalars N
        var NAME ROWS COLS sym|full OFFSET      # OFFSET: first scalar, 1-based
        objective ENTRY COEF                    # ENTRY 0 is the constant term
        block K SIZE STRICT MARGIN              # K is 1-based
        K ROW COL COEF ENTRY                    # lower triangle, 1-based

    Block ``K`` reads ``sum_entries COEF * x[ENTRY] >= MARGIN * I`` with
    ``x[0] = 1``; ``MARGIN`` is already resolved from the strictness flag.
    """
    out = io.StringIO()
    out.write("dpfilter-sdp 1\n")
    out.write(f"scalars {problem.n_scalars}\n")
    for v in problem.variables.values():
        kind = "sym" if v.symmetric else "full"
        out.write(f"var {v.name} {v.shape[0]} {v.shape[1]} {kind} {v.offset + 1}\n")
    if problem.objective is not None:
        out.write(f"objective 0 {float(problem.objective.const[0, 0])!r}\n")
        for j, M in sorted(problem.objective.terms.items()):
            out.write(f"objective {j + 1} {float(M[0, 0])!r}\n")
    for k, c in enumerate(problem.constraints, start=1):
        m = c.expr.shape[0]
        out.write(f"block {k} {m} {int(c.strict)} {float(problem.margin(c))!r}\n")
        mats = [(0, c.expr.const)] + [(j + 1, M) for j, M in sorted(c.expr.terms.items())]
        for entry, M in mats:
            for r in range(m):
                for col in range(r + 1):
                    if M[r, col] != 0.0:
                        out.write(f"{k} {r + 1} {col + 1} {float(M[r, col])!r} {entry}\n")
    text = out.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def load_triplets(text: str) -> SdpProblem:
    """Rebuild a problem written by :func:`dump_triplets`."""
    lines = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0][:2] != ["dpfilter-sdp", "1"]:
        raise ValueError("not a dpfilter-sdp v1 file")
    prob = SdpProblem()
    blocks = {}
    obj = {}
    for ln in lines[1:]:
        tag = ln[0]
        if tag == "scalars":
            n_expected = int(ln[1])
        elif tag == "var":
            name, m, k, kind = ln[1], int(ln[2]), int(ln[3]), ln[4]
            prob.variable(name, (m, k), symmetric=(kind == "sym"))
        elif tag == "objective":
            obj[int(ln[1])] = float(ln[2])
        elif tag == "block":
            k, m, strict, margin = int(ln[1]), int(ln[2]), bool(int(ln[3])), float(ln[4])
            blocks[k] = (m, strict, margin, {})
        else:
            k, r, col, coef, entry = int(ln[0]), int(ln[1]) - 1, int(ln[2]) - 1, \
                float(ln[3]), int(ln[4])
            mats = blocks[k][3]
            M = mats.setdefault(entry, np.zeros((blocks[k][0],) * 2))
            M[r, col] = M[col, r] = coef
    if prob.n_scalars != n_expected:
        raise ValueError("scalar count does not match the variable table")
    if obj:
        prob.objective = AffineExpr(
            np.array([[obj.get(0, 0.0)]]),
            {j - 1: np.array([[v]]) for j, v in obj.items() if j > 0})
    for k in sorted(blocks):
        m, strict, margin, mats = blocks[k]
        const = mats.pop(0, np.zeros((m, m)))
        expr = AffineExpr(const, {j - 1: M for j, M in mats.items()})
        prob.constraints.append(_Constraint(expr, strict, f"c{k - 1}"))
    return prob
