"""Small conic-program builder with a Clarabel backend.

Programs are stored in matrix form: every constraint block is an affine map
``e(x) = A @ x + b`` together with a cone the value must lie in.  Supported
cones are the zero cone (equalities), the nonpositive orthant (``A x + b <= 0``),
second-order cones (``e[0] >= ||e[1:]||``) and PSD cones given by the
upper-triangular entries of a symmetric matrix.

Only the narrow surface needed by the synthesis code is exposed; anything more
elaborate should go through the backend directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"

_SQRT2 = math.sqrt(2.0)


class SolverError(RuntimeError):
    """Raised when a program cannot be solved to optimality."""


class InfeasibleError(SolverError):
    pass


@dataclass
class _Block:
    kind: str  # "eq" | "le" | "soc" | "psd"
    A: sp.csr_matrix
    b: np.ndarray
    dims: list[int]  # cone sizes for soc, matrix orders for psd


@dataclass
class SolveReport:
    status: str
    values: np.ndarray | None
    objective: float
    residuals: dict[str, float] = field(default_factory=dict)
    iterations: int = 0
    solve_time: float = 0.0
    backend_status: str = ""
    # last iterate for non-optimal exits; callers that re-verify may use it
    candidate: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def svec_index(order: int) -> list[tuple[int, int]]:
    """(row, col) pairs of the upper triangle in column-major order."""
    return [(i, j) for j in range(order) for i in range(j + 1)]


def _as_csr(A, ncols: int) -> sp.csr_matrix:
    if sp.issparse(A):
        A = A.tocsr()
    else:
        A = sp.csr_matrix(np.atleast_2d(np.asarray(A, dtype=float)))
    if A.shape[1] < ncols:
        A = sp.csr_matrix((A.data, A.indices, A.indptr), shape=(A.shape[0], ncols))
    return A


class ConicProgram:
    """Decision variables, a linear (optionally quadratic) objective and cone constraints."""

    def __init__(self):
        self.n = 0
        self.names: dict[str, np.ndarray] = {}
        self._blocks: list[_Block] = []
        self._c: list[tuple[np.ndarray, np.ndarray]] = []
        self._P: sp.spmatrix | None = None
        self.const = 0.0

    # -- variables -----------------------------------------------------------
    def variable(self, name: str, shape=()) -> np.ndarray:
        if name in self.names:
            raise ValueError(f"variable {name!r} already declared")
        size = int(np.prod(shape)) if shape != () else 1
        idx = np.arange(self.n, self.n + size).reshape(shape if shape != () else ())
        self.n += size
        self.names[name] = idx
        return idx

    def _check_cols(self, A: sp.csr_matrix):
        if A.shape[1] > self.n or (A.nnz and A.indices.max() >= self.n):
            raise ValueError("constraint references an undeclared variable")

    # -- objective -----------------------------------------------------------
    def minimize(self, idx, coef, constant: float = 0.0):
        """Add ``coef . x[idx]`` to the (linear) objective."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        self._c.append((idx.ravel(), coef.ravel()))
        self.const += constant

    def minimize_quadratic(self, P: sp.spmatrix):
        """Add ``1/2 x' P x`` to the objective (P symmetric PSD, full size)."""
        P = sp.csc_matrix(P)
        if P.shape != (self.n, self.n):
            P = sp.csc_matrix((P.data, P.indices, P.indptr), shape=(self.n, self.n))
        self._P = P if self._P is None else self._P + P

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n)
        for idx, coef in self._c:
            np.add.at(c, idx, coef)
        return c

    def objective_value(self, x: np.ndarray) -> float:
        val = float(self.objective_vector() @ x) + self.const
        if self._P is not None:
            val += 0.5 * float(x @ (self._P @ x))
        return val

    # -- constraints ---------------------------------------------------------
    def add_eq(self, A, b):
        """A x + b == 0."""
        A = _as_csr(A, self.n)
        self._check_cols(A)
        self._blocks.append(_Block("eq", A, np.asarray(b, float).ravel(), [A.shape[0]]))

    def add_le(self, A, b):
        """A x + b <= 0 (row-wise)."""
        A = _as_csr(A, self.n)
        self._check_cols(A)
        self._blocks.append(_Block("le", A, np.asarray(b, float).ravel(), [A.shape[0]]))

    def add_soc(self, A, b, size: int | None = None):
        """(A x + b) split into consecutive cones of ``size`` rows, each with
        first entry >= norm of the rest."""
        A = _as_csr(A, self.n)
        self._check_cols(A)
        size = A.shape[0] if size is None else size
        if A.shape[0] % size:
            raise ValueError("row count is not a multiple of the cone size")
        self._blocks.append(
            _Block("soc", A, np.asarray(b, float).ravel(), [size] * (A.shape[0] // size))
        )

    def add_rsoc(self, A, b, size: int | None = None):
        """Rotated cones: with e = A x + b, 2 e[0] e[1] >= ||e[2:]||^2, e[0], e[1] >= 0."""
        A = _as_csr(A, self.n)
        size = A.shape[0] if size is None else size
        if A.shape[0] % size:
            raise ValueError("row count is not a multiple of the cone size")
        b = np.asarray(b, float).ravel()
        # (s + t)/sqrt2 >= ||((s - t)/sqrt2, w)||
        starts = np.arange(0, A.shape[0], size)
        rows = [starts, starts, starts + 1, starts + 1]
        cols = [starts, starts + 1, starts, starts + 1]
        vals = [np.full(len(starts), v) for v in (1 / _SQRT2, 1 / _SQRT2, 1 / _SQRT2, -1 / _SQRT2)]
        rest = np.setdiff1d(np.arange(A.shape[0]), np.concatenate([starts, starts + 1]))
        rows.append(rest)
        cols.append(rest)
        vals.append(np.ones(len(rest)))
        T = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(A.shape[0], A.shape[0]))
        self.add_soc(T @ A, T @ b, size)

    def add_psd(self, A, b, order: int):
        """Symmetric matrices M(x) >= 0 whose upper triangles (column-major, see
        :func:`svec_index`) are the consecutive row groups of A x + b."""
        A = _as_csr(A, self.n)
        self._check_cols(A)
        k = order * (order + 1) // 2
        if A.shape[0] % k:
            raise ValueError("row count is not a multiple of the triangle size")
        self._blocks.append(
            _Block("psd", A, np.asarray(b, float).ravel(), [order] * (A.shape[0] // k))
        )

    def add_nsd_dense(self, entries: dict[tuple[int, int], tuple[np.ndarray, float]], order: int):
        """M(x) <= 0 where ``entries[(r, c)] = (coefficient vector, constant)`` for the
        upper triangle (r <= c); missing entries are zero.  Intended for small blocks."""
        pairs = svec_index(order)
        A = sp.lil_matrix((len(pairs), self.n))
        b = np.zeros(len(pairs))
        for k, (r, c) in enumerate(pairs):
            if (r, c) in entries:
                coef, const = entries[(r, c)]
                coef = np.asarray(coef, float)
                nz = np.nonzero(coef)[0]
                for j in nz:
                    A[k, j] = -coef[j]
                b[k] = -const
        self.add_psd(A.tocsr(), b, order)

    # -- inspection ----------------------------------------------------------
    @property
    def blocks(self) -> list[_Block]:
        # blocks added before later variables were declared are narrower than n
        out = []
        for blk in self._blocks:
            if blk.A.shape[1] != self.n:
                A = blk.A.tocsr(copy=True)
                A.resize((A.shape[0], self.n))
                blk = _Block(blk.kind, A, blk.b, blk.dims)
            out.append(blk)
        return out

    def count(self, kind: str) -> int:
        return sum(len(blk.dims) if kind in ("soc", "psd") else blk.A.shape[0]
                   for blk in self.blocks if blk.kind == kind)

    def residuals(self, x: np.ndarray) -> dict[str, float]:
        """Largest violation of each constraint family at ``x``."""
        out = {"eq": 0.0, "le": 0.0, "soc": 0.0, "psd": 0.0}
        for blk in self.blocks:
            e = blk.A @ x + blk.b
            if blk.kind == "eq":
                v = float(np.max(np.abs(e))) if e.size else 0.0
            elif blk.kind == "le":
                v = float(np.max(e)) if e.size else 0.0
                v = max(v, 0.0)
            elif blk.kind == "soc":
                v, o = 0.0, 0
                for d in blk.dims:
                    v = max(v, float(np.linalg.norm(e[o + 1:o + d]) - e[o]))
                    o += d
            else:
                v, o = 0.0, 0
                for d in blk.dims:
                    k = d * (d + 1) // 2
                    M = _unsvec(e[o:o + k], d)
                    v = max(v, float(-np.linalg.eigvalsh(M)[0]))
                    o += k
            out[blk.kind] = max(out[blk.kind], v)
        return out

    # -- solving -------------------------------------------------------------
    def solve(self, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              verbose: bool = False) -> SolveReport:
        A_parts, b_parts, cones = [], [], []
        for blk in self.blocks:
            if blk.A.shape[0] == 0:
                continue
            if blk.kind == "eq":
                # s = -b - A x = 0
                A_parts.append(blk.A)
                b_parts.append(-blk.b)
                cones.append(clarabel.ZeroConeT(blk.A.shape[0]))
            elif blk.kind == "le":
                A_parts.append(blk.A)
                b_parts.append(-blk.b)
                cones.append(clarabel.NonnegativeConeT(blk.A.shape[0]))
            elif blk.kind == "soc":
                A_parts.append(-blk.A)
                b_parts.append(blk.b)
                cones.extend(clarabel.SecondOrderConeT(d) for d in blk.dims)
            else:
                # Clarabel scales off-diagonal triangle entries by sqrt(2)
                scale = np.concatenate([
                    [1.0 if i == j else _SQRT2 for (i, j) in svec_index(d)] for d in blk.dims
                ])
                S = sp.diags(scale)
                A_parts.append(-(S @ blk.A))
                b_parts.append(scale * blk.b)
                cones.extend(clarabel.PSDTriangleConeT(d) for d in blk.dims)
        A = sp.vstack(A_parts, format="csc") if A_parts else sp.csc_matrix((0, self.n))
        b = np.concatenate(b_parts) if b_parts else np.zeros(0)
        P = self._P if self._P is not None else sp.csc_matrix((self.n, self.n))
        P = sp.triu(P, format="csc")
        q = self.objective_vector()

        settings = clarabel.DefaultSettings()
        settings.verbose = verbose
        settings.max_iter = max_iter
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.tol_feas = tol
        settings.tol_infeas_abs = tol
        settings.tol_infeas_rel = tol
        settings.presolve_enable = False
        solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
        sol = solver.solve()
        status_name = str(sol.status)
        x = np.asarray(sol.x)
        if status_name == "Solved":
            status = OPTIMAL
        elif status_name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
            status = INFEASIBLE
        else:
            status = NUMERICAL_FAILURE
        report = SolveReport(
            status=status,
            values=x if status == OPTIMAL else None,
            objective=self.objective_value(x) if status == OPTIMAL else math.nan,
            iterations=int(sol.iterations),
            solve_time=float(sol.solve_time),
            backend_status=status_name,
            candidate=x if x.size and np.all(np.isfinite(x)) else None,
        )
        if status == OPTIMAL:
            report.residuals = self.residuals(x)
            report.residuals["dual"] = float(sol.r_dual)
        return report

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        def mat(A):
            A = A.tocoo()
            return {"shape": list(A.shape), "row": A.row.tolist(), "col": A.col.tolist(),
                    "val": A.data.tolist()}

        return {
            "n": self.n,
            "names": {k: np.asarray(v).tolist() for k, v in self.names.items()},
            "c": self.objective_vector().tolist(),
            "const": self.const,
            "P": mat(self._P) if self._P is not None else None,
            "blocks": [{"kind": blk.kind, "A": mat(blk.A), "b": blk.b.tolist(), "dims": blk.dims}
                       for blk in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConicProgram":
        def mat(m):
            return sp.csr_matrix((m["val"], (m["row"], m["col"])), shape=tuple(m["shape"]))

        prog = cls()
        prog.n = d["n"]
        prog.names = {k: np.asarray(v, dtype=int) for k, v in d["names"].items()}
        c = np.asarray(d["c"], float)
        prog._c = [(np.arange(prog.n), c)]
        prog.const = d["const"]
        prog._P = sp.csc_matrix(mat(d["P"])) if d["P"] is not None else None
        prog._blocks = [_Block(b["kind"], mat(b["A"]), np.asarray(b["b"], float), list(b["dims"]))
                        for b in d["blocks"]]
        return prog

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "ConicProgram":
        return cls.from_dict(json.loads(text))

    def dump_text(self) -> str:
        """Plain-text listing: variables, objective coefficients, constraint triplets."""
        lines = [f"variables {self.n}"]
        for name, idx in self.names.items():
            flat = np.atleast_1d(idx).ravel()
            lines.append(f"var {name} {flat[0]}..{flat[-1]}" if flat.size else f"var {name}")
        c = self.objective_vector()
        for j in np.nonzero(c)[0]:
            lines.append(f"obj {j} {c[j]:.17g}")
        if self.const:
            lines.append(f"objconst {self.const:.17g}")
        if self._P is not None:
            P = sp.triu(self._P).tocoo()
            for i, j, v in zip(P.row, P.col, P.data):
                lines.append(f"quad {i} {j} {v:.17g}")
        for k, blk in enumerate(self.blocks):
            lines.append(f"block {k} {blk.kind} {' '.join(map(str, blk.dims))}")
            A = blk.A.tocoo()
            for i, j, v in zip(A.row, A.col, A.data):
                lines.append(f"a {k} {i} {j} {v:.17g}")
            for i in np.nonzero(blk.b)[0]:
                lines.append(f"b {k} {i} {blk.b[i]:.17g}")
        return "\n".join(lines) + "\n"


def _unsvec(v: np.ndarray, order: int) -> np.ndarray:
    M = np.zeros((order, order))
    for k, (i, j) in enumerate(svec_index(order)):
        M[i, j] = M[j, i] = v[k]
    return M


def solve(p: ConicProgram, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> SolveReport:
    return p.solve(tol=tol, max_iter=max_iter)


def solve_qp(Hmat, h, ineq: tuple | None = None, tol: float = 1e-10) -> np.ndarray:
    """Minimize ``u' Hmat u + h' u`` subject to ``A u <= b``.

    The interior-point answer is polished by solving the KKT system of the
    detected active set, which brings the KKT residual to round-off level.
    """
    Hmat = np.atleast_2d(np.asarray(Hmat, float))
    h = np.asarray(h, float).ravel()
    m = h.size
    if ineq is None:
        A, b = np.zeros((0, m)), np.zeros(0)
    else:
        A = np.atleast_2d(np.asarray(ineq[0], float)).reshape(-1, m)
        b = np.asarray(ineq[1], float).ravel()
    if np.linalg.eigvalsh(0.5 * (Hmat + Hmat.T))[0] <= 0:
        raise ValueError("Hmat must be positive definite")

    prog = ConicProgram()
    u = prog.variable("u", (m,))
    prog.minimize(u, h)
    prog.minimize_quadratic(sp.csc_matrix(Hmat + Hmat.T))
    if A.shape[0]:
        prog.add_le(sp.csr_matrix(A), -b)
    rep = prog.solve(tol=tol)
    if rep.status == INFEASIBLE:
        raise InfeasibleError("QP feasible region is empty")
    if rep.values is None:
        # tiny problems occasionally stall; fall back to enumerating active sets
        x = _qp_enumerate(Hmat, h, A, b)
        if x is None:
            raise SolverError(f"QP solve failed ({rep.backend_status})")
        return x
    x = rep.values.copy()
    polished = _qp_polish(Hmat, h, A, b, x)
    return polished if polished is not None else x


def _qp_kkt(Hs, h, A, b, active):
    m = h.size
    Aa = A[active]
    k = Aa.shape[0]
    K = np.zeros((m + k, m + k))
    K[:m, :m] = 2 * Hs
    K[:m, m:] = Aa.T
    K[m:, :m] = Aa
    rhs = np.concatenate([-h, b[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:m], sol[m:]


def _qp_polish(Hmat, h, A, b, x, act_tol=1e-7):
    Hs = 0.5 * (Hmat + Hmat.T)
    if A.shape[0] == 0:
        return np.linalg.solve(2 * Hs, -h)
    slack = b - A @ x
    active = np.nonzero(slack <= act_tol * (1 + np.abs(b)))[0]
    xp, lam = _qp_kkt(Hs, h, A, b, active)
    if np.all(A @ xp <= b + 1e-12) and np.all(lam >= -1e-12):
        return xp
    return None


def _qp_enumerate(Hmat, h, A, b):
    import itertools

    Hs = 0.5 * (Hmat + Hmat.T)
    m = h.size
    best, best_val = None, math.inf
    for k in range(0, min(m, A.shape[0]) + 1):
        for active in itertools.combinations(range(A.shape[0]), k):
            x, lam = _qp_kkt(Hs, h, A, b, list(active))
            if np.all(A @ x <= b + 1e-12) and np.all(lam >= -1e-12):
                val = x @ Hs @ x + h @ x
                if val < best_val:
                    best, best_val = x, val
    return best


def qp_kkt_residual(Hmat, h, A, b, x) -> float:
    """Stationarity/complementarity residual of a candidate QP solution."""
    Hmat = np.atleast_2d(np.asarray(Hmat, float))
    A = np.atleast_2d(np.asarray(A, float))
    b = np.asarray(b, float).ravel()
    Hs = 0.5 * (Hmat + Hmat.T)
    grad = 2 * Hs @ x + h
    slack = b - A @ x
    active = np.nonzero(slack <= 1e-7 * (1 + np.abs(b)))[0]
    if active.size:
        lam, *_ = np.linalg.lstsq(A[active].T, -grad, rcond=None)
        lam = np.maximum(lam, 0.0)
        grad = grad + A[active].T @ lam
    return float(np.max(np.abs(grad))) if grad.size else 0.0


def stack_rows(blocks: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    return sp.vstack(blocks, format="csr")
