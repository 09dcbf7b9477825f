"""Small modeling layer for LMI families with shared matrix variables.

Expressions are affine maps of one stacked decision vector.  A
:class:`Program` collects named variables, symmetric LMIs, linear
constraints and a linear objective, then compiles them to the standard
conic form::

    minimize    c @ x
    subject to  b - A @ x  in  K1 x K2 x ...

with cones ``("zero", k)``, ``("nonneg", k)`` and ``("psd", k)``.  PSD rows
use the scaled upper-triangular, column-major packing (off-diagonal entries
multiplied by sqrt(2)).  Backends receive exactly this data.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

SQRT2 = math.sqrt(2.0)


def strict_margin(*matrices, rel: float = 1e-7) -> float:
    """Scale-aware margin used to turn ``> 0`` into ``>= eps * I``."""
    scale = max((np.linalg.norm(np.atleast_2d(M)) for M in matrices), default=0.0)
    return rel * (1.0 + scale)


@dataclass(frozen=True)
class Variable:
    name: str
    shape: tuple
    symmetric: bool
    offset: int

    @property
    def size(self) -> int:
        r, c = self.shape
        return r * (r + 1) // 2 if self.symmetric else r * c

    def unpack(self, x: np.ndarray) -> np.ndarray:
        chunk = np.asarray(x[self.offset:self.offset + self.size], dtype=float)
        r, c = self.shape
        if not self.symmetric:
            return chunk.reshape(r, c)
        out = np.zeros((r, r))
        out[np.tril_indices(r)] = chunk
        return out + np.tril(out, -1).T

    def pack(self, value) -> np.ndarray:
        """Inverse of :meth:`unpack` (lower triangle, row by row, for symmetric variables)."""
        value = np.asarray(value, dtype=float).reshape(self.shape)
        if not self.symmetric:
            return value.ravel()
        return value[np.tril_indices(self.shape[0])]

    def coefficient(self) -> np.ndarray:
        """Map from packed unknowns to the row-major entries of the matrix."""
        r, c = self.shape
        if not self.symmetric:
            return np.eye(r * c)
        coef = np.zeros((r * r, self.size))
        k = 0
        for i in range(r):
            for j in range(i + 1):
                coef[i * r + j, k] = 1.0
                coef[j * r + i, k] = 1.0
                k += 1
        return coef


class Affine:
    """Affine matrix expression ``const + sum_v coef_v @ x_v`` (row-major vec)."""

    __array_ufunc__ = None

    def __init__(self, const, terms=None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.terms = terms or {}

    @property
    def shape(self) -> tuple:
        return self.const.shape

    @property
    def T(self) -> "Affine":
        r, c = self.shape
        perm = np.arange(r * c).reshape(r, c).T.ravel()
        return Affine(self.const.T, {v: C[perm] for v, C in self.terms.items()})

    def _coerce(self, other) -> "Affine":
        if isinstance(other, Affine):
            return other
        other = np.asarray(other, dtype=float)
        if other.ndim == 0:
            other = np.full(self.shape, float(other))
        return Affine(other)

    def __add__(self, other) -> "Affine":
        other = self._coerce(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} + {other.shape}")
        terms = dict(self.terms)
        for v, C in other.terms.items():
            terms[v] = terms[v] + C if v in terms else C
        return Affine(self.const + other.const, terms)

    __radd__ = __add__

    def __neg__(self) -> "Affine":
        return Affine(-self.const, {v: -C for v, C in self.terms.items()})

    def __sub__(self, other) -> "Affine":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Affine":
        return (-self) + other

    def __mul__(self, other) -> "Affine":
        if np.isscalar(other):
            return Affine(self.const * other, {v: C * other for v, C in self.terms.items()})
        M = np.atleast_2d(np.asarray(other, dtype=float))
        if self.shape != (1, 1):
            raise ValueError("only scalar expressions can multiply a matrix")
        col = M.reshape(-1, 1)
        return Affine(self.const[0, 0] * M, {v: col @ C for v, C in self.terms.items()})

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Affine":
        N = np.atleast_2d(np.asarray(other, dtype=float))
        r, c = self.shape
        if N.shape[0] != c:
            raise ValueError(f"shape mismatch {self.shape} @ {N.shape}")
        K = np.kron(np.eye(r), N.T)
        return Affine(self.const @ N, {v: K @ C for v, C in self.terms.items()})

    def __rmatmul__(self, other) -> "Affine":
        M = np.atleast_2d(np.asarray(other, dtype=float))
        r, c = self.shape
        if M.shape[1] != r:
            raise ValueError(f"shape mismatch {M.shape} @ {self.shape}")
        K = np.kron(M, np.eye(c))
        return Affine(M @ self.const, {v: K @ C for v, C in self.terms.items()})

    def trace(self) -> "Affine":
        r, c = self.shape
        if r != c:
            raise ValueError("trace of a non-square expression")
        idx = np.arange(r) * (r + 1)
        return Affine([[np.trace(self.const)]],
                      {v: C[idx].sum(axis=0, keepdims=True) for v, C in self.terms.items()})

    def value(self, values: dict) -> np.ndarray:
        """Evaluate given packed values keyed by variable."""
        out = self.const.ravel().copy()
        for v, C in self.terms.items():
            out += C @ values[v]
        return out.reshape(self.shape)


def block(grid) -> Affine:
    """Symmetric block matrix from its lower triangle.

    ``grid[i][j]`` for ``j <= i`` is an :class:`Affine`, an array, or ``None``
    (zero block); entries above the diagonal are ignored and filled in as
    transposes (the star convention).  Diagonal blocks must be given.
    """
    k = len(grid)
    sizes = []
    for i in range(k):
        d = grid[i][i]
        if d is None:
            raise ValueError(f"diagonal block {i} must be given")
        shp = d.shape if isinstance(d, Affine) else np.atleast_2d(d).shape
        if shp[0] != shp[1]:
            raise ValueError(f"diagonal block {i} is not square")
        sizes.append(shp[0])
    H = sum(sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    const = np.zeros((H, H))
    terms: dict = {}

    def place(expr, r0, c0):
        if not isinstance(expr, Affine):
            expr = Affine(expr)
        h, w = expr.shape
        const[r0:r0 + h, c0:c0 + w] += expr.const
        rows = ((r0 + np.arange(h))[:, None] * H + (c0 + np.arange(w))[None, :]).ravel()
        for v, C in expr.terms.items():
            if v not in terms:
                terms[v] = np.zeros((H * H, C.shape[1]))
            terms[v][rows] += C

    for i in range(k):
        for j in range(i + 1):
            e = grid[i][j]
            if e is None:
                continue
            shp = e.shape if isinstance(e, Affine) else np.atleast_2d(e).shape
            if shp != (sizes[i], sizes[j]):
                raise ValueError(f"block ({i},{j}) has shape {shp}, expected {(sizes[i], sizes[j])}")
            place(e, starts[i], starts[j])
            if i != j:
                place(e.T if isinstance(e, Affine) else np.atleast_2d(e).T, starts[j], starts[i])
    return Affine(const, terms)


def _svec_rows(k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-major indices ``(i, j)``, ``(j, i)`` and scales of the packed triangle."""
    ij, ji, scale = [], [], []
    for j in range(k):
        for i in range(j + 1):
            ij.append(i * k + j)
            ji.append(j * k + i)
            scale.append(0.5 if i == j else SQRT2 / 2.0)
    return np.array(ij), np.array(ji), np.array(scale)


def svec(S: np.ndarray) -> np.ndarray:
    k = S.shape[0]
    ij, ji, scale = _svec_rows(k)
    flat = np.asarray(S, dtype=float).ravel()
    return scale * (flat[ij] + flat[ji])


def smat(v: np.ndarray, k: int) -> np.ndarray:
    S = np.zeros((k, k))
    n = 0
    for j in range(k):
        for i in range(j + 1):
            S[i, j] = S[j, i] = v[n] if i == j else v[n] / SQRT2
            n += 1
    return S


@dataclass(frozen=True)
class LmiRecord:
    label: str
    expr: Affine
    margin: float
    rows: tuple


@dataclass(frozen=True, eq=False)
class ConicProgram:
    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: tuple
    variables: dict
    lmis: tuple
    objective_offset: float = 0.0

    @property
    def n_unknowns(self) -> int:
        return self.c.size

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.c, self.A.data, self.A.indices, self.A.indptr, self.b):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(self.cones).encode())
        h.update(repr([(v.name, v.shape, v.symmetric, v.offset) for v in self.variables.values()]).encode())
        return h.hexdigest()

    def to_cbf(self) -> str:
        """Conic benchmark format text (minimize, cones in order)."""
        lines = ["VER", "3", "", "OBJSENSE", "MIN", ""]
        n = self.n_unknowns
        lines += ["VAR", f"{n} 1", f"F {n}", ""]
        scalar_cones = [(k, d) for k, d in self.cones]
        m = self.A.shape[0]
        lines += ["CON", f"{m} {len(scalar_cones)}"]
        tag = {"zero": "L=", "nonneg": "L+", "psd": "SVEC"}
        for kind, d in scalar_cones:
            size = d * (d + 1) // 2 if kind == "psd" else d
            lines.append(f"{tag[kind]} {size}")
        lines.append("")
        nz = np.flatnonzero(self.c)
        lines += ["OBJACOORD", str(nz.size)] + [f"{i} {self.c[i]!r}" for i in nz] + [""]
        # CBF rows are A x + b' in K, so use -A and b
        coo = (-self.A).tocoo()
        order = np.lexsort((coo.col, coo.row))
        lines += ["ACOORD", str(coo.nnz)]
        lines += [f"{coo.row[t]} {coo.col[t]} {coo.data[t]!r}" for t in order]
        lines.append("")
        bz = np.flatnonzero(self.b)
        lines += ["BCOORD", str(bz.size)] + [f"{i} {self.b[i]!r}" for i in bz]
        return "\n".join(lines) + "\n"


class Program:
    """Collects variables and constraints; :meth:`build` freezes them."""

    def __init__(self):
        self.variables: dict[str, Variable] = {}
        self._by_id: list[Variable] = []
        self._rows: list[tuple] = []  # (kind, dim, A_block (dense), b_block)
        self._lmis: list[tuple] = []
        self._objective: Affine | None = None
        self._offset = 0

    # variables -----------------------------------------------------------
    def variable(self, name: str, shape, symmetric: bool = False) -> Affine:
        if name in self.variables:
            raise ValueError(f"duplicate variable name {name!r}")
        shape = (shape, shape) if isinstance(shape, int) else tuple(shape)
        if symmetric and shape[0] != shape[1]:
            raise ValueError(f"symmetric variable {name!r} must be square")
        var = Variable(name, shape, symmetric, self._offset)
        self._offset += var.size
        self.variables[name] = var
        self._by_id.append(var)
        vid = len(self._by_id) - 1
        return Affine(np.zeros(shape), {vid: var.coefficient()})

    def symmetric(self, name: str, n: int) -> Affine:
        return self.variable(name, (n, n), symmetric=True)

    def scalar(self, name: str) -> Affine:
        return self.variable(name, (1, 1))

    # constraints ---------------------------------------------------------
    def _check_vars(self, expr: Affine):
        for v in expr.terms:
            if not 0 <= v < len(self._by_id):
                raise ValueError(f"expression references unknown variable id {v}")

    def _linear_rows(self, expr: Affine) -> tuple[sp.coo_matrix, np.ndarray]:
        """``expr`` as ``const + L x`` with ``L`` sparse over all unknowns."""
        size = expr.const.size
        rows, cols, vals = [], [], []
        for v, C in sorted(expr.terms.items()):
            var = self._by_id[v]
            r, c = np.nonzero(C)
            rows.append(r)
            cols.append(c + var.offset)
            vals.append(C[r, c])
        if rows:
            rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        return (np.asarray(rows, int), np.asarray(cols, int), np.asarray(vals, float), size), expr.const.ravel()

    def add_lmi(self, expr: Affine, label: str, margin: float = 0.0) -> None:
        """Require ``expr >= margin * I`` (``expr`` must be symmetric)."""
        if not isinstance(expr, Affine):
            expr = Affine(expr)
        self._check_vars(expr)
        k, k2 = expr.shape
        if k != k2:
            raise ValueError(f"LMI {label!r} is not square")
        scale = max([1.0, np.abs(expr.const).max()] + [np.abs(C).max() for C in expr.terms.values()])
        sym_tol = 1e-12 * scale
        perm = np.arange(k * k).reshape(k, k).T.ravel()
        asym = np.abs(expr.const - expr.const.T).max()
        for C in expr.terms.values():
            asym = max(asym, np.abs(C - C[perm]).max())
        if asym > sym_tol:
            raise ValueError(f"LMI {label!r} is not symmetric (asymmetry {asym:.3g})")
        self._lmis.append((label, expr, margin))

    def add_nonneg(self, expr: Affine, label: str = "") -> None:
        """Elementwise ``expr >= 0``."""
        self._check_vars(expr)
        self._rows.append(("nonneg", expr, label))

    def add_equality(self, expr: Affine, label: str = "") -> None:
        """Elementwise ``expr == 0``."""
        self._check_vars(expr)
        self._rows.append(("zero", expr, label))

    def minimize(self, expr: Affine) -> None:
        if expr.shape != (1, 1):
            raise ValueError("objective must be scalar")
        self._check_vars(expr)
        self._objective = expr

    # compilation ---------------------------------------------------------
    def build(self) -> ConicProgram:
        n = self._offset
        c = np.zeros(n)
        offset = 0.0
        if self._objective is not None:
            (r, cols, vals, _), const = self._linear_rows(self._objective)
            np.add.at(c, cols, vals)
            offset = float(const[0])

        A_rows, A_cols, A_vals, b_parts, cones = [], [], [], [], []
        row0 = 0

        def push(rows, cols, vals, b, kind, dim):
            nonlocal row0
            A_rows.append(rows + row0)
            A_cols.append(cols)
            A_vals.append(-vals)
            b_parts.append(b)
            cones.append((kind, dim))
            row0 += b.size

        # zero cones first, then nonneg, then PSD, each in insertion order
        for want in ("zero", "nonneg"):
            for kind, expr, _ in self._rows:
                if kind != want:
                    continue
                (r, cols, vals, size), const = self._linear_rows(expr)
                push(r, cols, vals, const.copy(), kind, size)

        lmis = []
        for label, expr, margin in self._lmis:
            k = expr.shape[0]
            ij, ji, scale = _svec_rows(k)
            const = scale * (expr.const.ravel()[ij] + expr.const.ravel()[ji])
            const = const - margin * (ij == ji)
            terms = {v: scale[:, None] * (C[ij] + C[ji]) for v, C in expr.terms.items()}
            packed = Affine(const.reshape(-1, 1), terms)
            (r, cols, vals, size), b = self._linear_rows(packed)
            start = row0
            push(r, cols, vals, b.copy(), "psd", k)
            lmis.append(LmiRecord(label, expr, margin, (start, row0)))

        if A_rows:
            rows = np.concatenate(A_rows)
            cols = np.concatenate(A_cols)
            vals = np.concatenate(A_vals)
        else:
            rows = cols = np.zeros(0, int)
            vals = np.zeros(0)
        A = sp.coo_matrix((vals, (rows, cols)), shape=(row0, n)).tocsc()
        A.sum_duplicates()
        A.eliminate_zeros()
        A.sort_indices()
        b = np.concatenate(b_parts) if b_parts else np.zeros(0)
        return ConicProgram(c, A, b, tuple(cones), dict(self.variables), tuple(lmis), offset)


# solving -------------------------------------------------------------------

@dataclass
class Solution:
    status: str  # optimal | infeasible | failure
    x: np.ndarray | None
    objective: float
    values: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    backend_status: str = ""
    message: str = ""

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    @property
    def max_violation(self) -> float:
        """Largest ``margin - lambda_min`` over all LMIs (<= 0 when satisfied)."""
        return max((-r for r in self.residuals.values()), default=-np.inf)


def lmi_residuals(program: ConicProgram, x: np.ndarray) -> dict:
    """``lambda_min(block) - margin`` for every LMI, evaluated from the expressions."""
    packed = {vid: x[v.offset:v.offset + v.size] for vid, v in enumerate(program.variables.values())}
    out = {}
    for rec in program.lmis:
        S = rec.expr.value(packed)
        S = 0.5 * (S + S.T)
        out[rec.label] = float(np.linalg.eigvalsh(S)[0] - rec.margin)
    return out


class ClarabelBackend:
    """Interior-point backend using the ``clarabel`` package."""

    name = "clarabel"

    def __init__(self, tol: float = 1e-9, max_iter: int = 400):
        self.tol = tol
        self.max_iter = max_iter

    def __call__(self, program: ConicProgram):
        import clarabel

        cones = []
        for kind, dim in program.cones:
            if kind == "zero":
                cones.append(clarabel.ZeroConeT(dim))
            elif kind == "nonneg":
                cones.append(clarabel.NonnegativeConeT(dim))
            else:
                cones.append(clarabel.PSDTriangleConeT(dim))
        n = program.n_unknowns
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.max_iter = self.max_iter
        settings.tol_gap_abs = self.tol
        settings.tol_gap_rel = self.tol
        settings.tol_feas = self.tol
        settings.max_threads = 1
        P = sp.csc_matrix((n, n))
        sol = clarabel.DefaultSolver(P, program.c, program.A, program.b, cones, settings).solve()
        status = str(sol.status)
        if status in ("Solved", "AlmostSolved"):
            mapped = "optimal"
        elif status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
            mapped = "infeasible"
        else:
            mapped = "failure"
        return mapped, np.array(sol.x), status


class CvxoptBackend:
    """Backend using ``cvxopt.solvers.conelp``."""

    name = "cvxopt"

    def __init__(self, tol: float = 1e-8, max_iter: int = 200):
        self.tol = tol
        self.max_iter = max_iter

    def __call__(self, program: ConicProgram):
        import cvxopt

        A = program.A.tocsr()
        b = program.b
        eq_rows, lin_rows, psd = [], [], []
        start = 0
        for kind, dim in program.cones:
            size = dim * (dim + 1) // 2 if kind == "psd" else dim
            rows = np.arange(start, start + size)
            if kind == "zero":
                eq_rows.append(rows)
            elif kind == "nonneg":
                lin_rows.append(rows)
            else:
                psd.append((dim, rows))
            start += size
        blocks_G, blocks_h = [], []
        if lin_rows:
            r = np.concatenate(lin_rows)
            blocks_G.append(A[r])
            blocks_h.append(b[r])
        for dim, rows in psd:
            # full column-major k x k from the scaled triangle
            full_idx, full_scale = [], []
            for j in range(dim):
                for i in range(dim):
                    a, bb = min(i, j), max(i, j)
                    pos = bb * (bb + 1) // 2 + a
                    full_idx.append(rows[pos])
                    full_scale.append(1.0 if i == j else 1.0 / SQRT2)
            full_idx = np.array(full_idx)
            S = sp.diags(full_scale)
            blocks_G.append(S @ A[full_idx])
            blocks_h.append(np.array(full_scale) * b[full_idx])
        n = program.n_unknowns
        G = sp.vstack(blocks_G).tocoo() if blocks_G else sp.coo_matrix((0, n))
        h = np.concatenate(blocks_h) if blocks_h else np.zeros(0)

        def spm(M):
            M = M.tocoo()
            return cvxopt.spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), size=M.shape)

        dims = {"l": int(sum(r.size for r in lin_rows)), "q": [], "s": [d for d, _ in psd]}
        kw = {}
        if eq_rows:
            r = np.concatenate(eq_rows)
            kw = {"A": spm(A[r]), "b": cvxopt.matrix(b[r])}
        opts = {"show_progress": False, "abstol": self.tol, "reltol": self.tol,
                "feastol": self.tol, "maxiters": self.max_iter}
        try:
            res = cvxopt.solvers.conelp(cvxopt.matrix(program.c), spm(G), cvxopt.matrix(h), dims,
                                        options=opts, **kw)
        except (ArithmeticError, ValueError) as exc:
            # conelp raises on numerical breakdown (e.g. a vanishing scaling)
            return "failure", None, f"breakdown: {exc}"
        status = res["status"]
        x = None if res["x"] is None else np.array(res["x"]).ravel()
        if status == "optimal":
            mapped = "optimal"
        elif status == "primal infeasible":
            mapped = "infeasible"
        elif x is not None and res.get("relative gap") is not None and res["relative gap"] < 1e-6:
            mapped = "optimal"
        else:
            mapped = "failure"
        return mapped, x, status


class FallbackBackend:
    """Try several backends in order until one returns ``optimal`` or ``infeasible``."""

    def __init__(self, *backends):
        self.backends = backends
        self.name = "+".join(b.name for b in backends)

    def __call__(self, program: ConicProgram):
        notes = []
        for backend in self.backends:
            try:
                status, x, raw = backend(program)
            except ImportError as exc:
                notes.append(f"{backend.name}: unavailable ({exc})")
                continue
            if status in ("optimal", "infeasible"):
                return status, x, raw if not notes else f"{raw} [after {'; '.join(notes)}]"
            notes.append(f"{backend.name}: {raw}")
        return "failure", None, "; ".join(notes)


BACKENDS = {
    "clarabel": ClarabelBackend,
    "cvxopt": CvxoptBackend,
}

# cvxopt reaches tighter optimality gaps on these programs; clarabel is the
# more robust of the two and takes over when cvxopt breaks down.
DEFAULT_BACKEND = FallbackBackend(CvxoptBackend(), ClarabelBackend())


def make_backend(name: str = "default", tol: float | None = None):
    """Backend from a name: ``default``, ``clarabel`` or ``cvxopt``."""
    if name == "default":
        if tol is None:
            return DEFAULT_BACKEND
        return FallbackBackend(CvxoptBackend(tol), ClarabelBackend(tol))
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from default, {', '.join(BACKENDS)}")
    return BACKENDS[name]() if tol is None else BACKENDS[name](tol)


def solve(program: ConicProgram, backend=None) -> Solution:
    """Run ``backend`` on ``program`` and attach independently computed residuals."""
    backend = backend or DEFAULT_BACKEND
    try:
        status, x, raw = backend(program)
    except ImportError as exc:
        return Solution("failure", None, math.nan, backend_status="unavailable",
                        message=f"solver backend {getattr(backend, 'name', backend)!r} unavailable: {exc}")
    if status != "optimal" or x is None or not np.all(np.isfinite(x)):
        return Solution("failure" if status == "optimal" else status, None, math.nan,
                        backend_status=raw, message=f"backend status {raw}")
    values = {name: v.unpack(x) for name, v in program.variables.items()}
    objective = float(program.c @ x + program.objective_offset)
    return Solution("optimal", x, objective, values, lmi_residuals(program, x), raw)
