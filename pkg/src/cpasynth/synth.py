"""CPA Lyapunov function and controller synthesis by iterated convex overbounding.

The nonconvex feasibility problem couples the vertex values ``V`` and inputs
``U`` through bilinear decrease rows.  Each :func:`iterate` call linearizes
those rows around a feasible point and overbounds the neglected products by
Schur-complement blocks, so the solution of the convex program stays feasible
for the original rows.  Every returned point is then re-evaluated from scratch
(:func:`verify_feasibility`) before it is trusted.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_continuous_are
from scipy.spatial import cKDTree

from . import model as mdl
from .cpa import (CpaScalarField, CpaVectorField, EmptyRegionError, SublevelRegion, _gradients,
                  largest_certified_sublevel, level_loops, loops_to_csv, restrict,
                  sublevel_component)
from .mesh import (Domain, MeshError, SizeField, Triangulation, boundary_facets, build,
                   points_in_polygon, polygon_area, triangulate_annulus)
from .sdp import NUMERICAL_FAILURE, OPTIMAL, ConicProgram, SolverError

log = logging.getLogger(__name__)

EPS_B1 = 1e-6
STALL_TOL = 1e-9
STALL_COUNT = 3
CHECK_TOL = 1e-6
DEFAULT_B2_TARGET = 0.05
KINDS = ("plain", "stabilize", "reach_target", "single_stage", "multi_stage")
CONTINUITY = ("stitched", "discontinuous_V", "discontinuous_u", "discontinuous_both")


class SynthesisError(RuntimeError):
    pass


class VariantError(ValueError):
    """Variant options inconsistent with the mesh tags."""


class CertificateError(RuntimeError):
    """An independently re-checked point violates the nonconvex constraints."""


# ---------------------------------------------------------------------------
# variables and variants


@dataclass
class DecisionVariables:
    V: np.ndarray
    L: np.ndarray
    U: np.ndarray
    Z: np.ndarray
    a: float
    b1: float
    b2: float
    b3: float | None = None
    Vb: float | None = None  # shared outer boundary value when tied

    def copy(self) -> "DecisionVariables":
        return replace(self, V=self.V.copy(), L=self.L.copy(), U=self.U.copy(), Z=self.Z.copy())

    def to_dict(self) -> dict:
        return dict(V=self.V.tolist(), L=self.L.tolist(), U=self.U.tolist(), Z=self.Z.tolist(),
                    a=self.a, b1=self.b1, b2=self.b2, b3=self.b3, Vb=self.Vb)

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionVariables":
        return cls(V=np.asarray(d["V"], float), L=np.asarray(d["L"], float),
                   U=np.asarray(d["U"], float), Z=np.asarray(d["Z"], float), a=float(d["a"]),
                   b1=float(d["b1"]), b2=float(d["b2"]), b3=d.get("b3"), Vb=d.get("Vb"))


@dataclass
class VariantSpec:
    """Which constraint edits apply.

    ``pin_ids`` with ``pin_V`` / ``pin_U`` hold the stage stitching data of a
    multi-stage run; ``continuity`` decides which of them are imposed.
    ``level_floor`` keeps V at or above the previous stage level on the
    inner boundary so the stitched Lyapunov function can only jump down.
    """

    kind: str = "stabilize"
    boundary_surface: str = "outer"
    inner_surface: str = "inner"
    target_surface: str | None = None
    target_simplexes: np.ndarray | None = None
    pin_ids: np.ndarray | None = None
    pin_V: np.ndarray | None = None
    pin_U: np.ndarray | None = None
    continuity: str = "stitched"
    level_floor: float | None = None
    pin_origin: bool | None = None
    rhs: str = "relative"  # decrease rows <= -b2 V ("relative") or <= -b2 ("absolute")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise VariantError(f"unknown variant kind {self.kind!r}")
        if self.continuity not in CONTINUITY:
            raise VariantError(f"unknown continuity {self.continuity!r}")
        if self.rhs not in ("relative", "absolute"):
            raise VariantError("rhs must be 'relative' or 'absolute'")

    @property
    def tie(self) -> bool:
        return self.kind in ("reach_target", "single_stage", "multi_stage")

    @property
    def pins_V(self) -> bool:
        return self.kind == "multi_stage" and self.continuity in ("stitched", "discontinuous_u")

    @property
    def pins_U(self) -> bool:
        return self.kind == "multi_stage" and self.continuity in ("stitched", "discontinuous_V")

    @property
    def origin_pinned(self) -> bool:
        if self.pin_origin is not None:
            return self.pin_origin
        return self.kind in ("stabilize", "single_stage")

    def to_dict(self) -> dict:
        d = {}
        for k in ("kind", "boundary_surface", "inner_surface", "target_surface", "continuity",
                  "level_floor", "pin_origin", "rhs"):
            d[k] = getattr(self, k)
        for k in ("target_simplexes", "pin_ids", "pin_V", "pin_U"):
            v = getattr(self, k)
            d[k] = None if v is None else np.asarray(v).tolist()
        return d


# ---------------------------------------------------------------------------
# problem data


def _dgrad_coeffs(tri: Triangulation) -> np.ndarray:
    """(M, n, n+1): gradient of the CPA interpolant as a linear map of the
    simplex vertex values."""
    Xi = tri.X_inv
    return np.concatenate([-Xi.sum(axis=2, keepdims=True), Xi], axis=2)


@dataclass
class _Layout:
    V: np.ndarray
    L: np.ndarray
    U: np.ndarray
    Z: np.ndarray | None
    b1: int
    b2: int | None
    b3: int | None
    Vb: int | None
    phi: int | None = None


class SynthesisProblem:
    """Vectorized data of the nonconvex problem on one triangulation.

    ``mu`` and ``eta`` default to the model bounds on the simplex bounding
    boxes; passing other arrays is only meant for experiments.
    """

    def __init__(self, model: mdl.SystemModel, tri: Triangulation, variant: VariantSpec,
                 mu=None, eta=None):
        if model.n != tri.n:
            raise VariantError(f"model dimension {model.n} does not match mesh dimension {tri.n}")
        self.model, self.tri, self.variant = model, tri, variant
        S = tri.simplexes
        self.S = S
        self.M, self.N, self.n, self.m = len(S), tri.n_vertices, tri.n, model.m
        mu0, eta0 = mdl.hessian_constants(model, tri)
        self.mu = mu0 if mu is None else np.asarray(mu, float)
        self.eta = eta0 if eta is None else np.asarray(eta, float)
        self.use_Z = not (model.constant_G or np.all(self.eta == 0))
        self.c = tri.c
        self.norms = np.linalg.norm(tri.vertices, axis=1)
        self.F = model.drift(tri.vertices)
        self.G = model.input_matrix(tri.vertices)
        self.H, self.h = model.input_H, model.input_h
        self.Dg = _dgrad_coeffs(tri)
        self.u_scale = float(np.max(mdl.input_projection_bounds(model)))
        self._setup_variant()
        self._setup_rows()

    # -- variant bookkeeping ---------------------------------------------------
    def _setup_variant(self):
        tri, var = self.tri, self.variant
        N = self.N
        o = tri.origin_id
        self.origin = o
        self.origin_pinned = bool(var.origin_pinned and o is not None)
        if var.kind in ("stabilize", "single_stage") and o is None:
            raise VariantError(f"{var.kind} variant needs the origin as a mesh vertex")
        self.tie_ids = np.zeros(0, np.int64)
        if var.tie:
            if var.boundary_surface in tri.surfaces:
                self.tie_ids = np.asarray(tri.surfaces[var.boundary_surface], np.int64)
            elif var.kind != "multi_stage":
                self.tie_ids = tri.boundary
            if len(self.tie_ids) == 0:
                raise VariantError(f"mesh has no {var.boundary_surface!r} surface to tie")
        self.inner_ids = np.zeros(0, np.int64)
        if var.kind == "multi_stage":
            if var.inner_surface not in tri.surfaces:
                raise VariantError(f"multi_stage variant needs an {var.inner_surface!r} surface tag")
            self.inner_ids = np.asarray(tri.surfaces[var.inner_surface], np.int64)
            if (var.pins_V or var.pins_U) and var.pin_ids is None:
                raise VariantError("multi_stage variant needs pinned boundary data unless discontinuous")
        pin_ids = np.zeros(0, np.int64) if var.pin_ids is None else np.asarray(var.pin_ids, np.int64)
        self.pinV_ids = pin_ids if var.pins_V else np.zeros(0, np.int64)
        self.pinV_vals = np.asarray(var.pin_V, float) if var.pins_V else np.zeros(0)
        self.pinU_ids = pin_ids if var.pins_U else np.zeros(0, np.int64)
        self.pinU_vals = (np.asarray(var.pin_U, float).reshape(-1, self.m) if var.pins_U
                          else np.zeros((0, self.m)))
        if self.origin_pinned:
            self.pinV_ids = np.append(self.pinV_ids, o)
            self.pinV_vals = np.append(self.pinV_vals, 0.0)
            self.pinU_ids = np.append(self.pinU_ids, o)
            self.pinU_vals = np.vstack([self.pinU_vals, np.zeros((1, self.m))])
        self.V_fixed = np.zeros(N, bool)
        self.V_fixed[self.pinV_ids] = True
        self.U_fixed = np.zeros(N, bool)
        self.U_fixed[self.pinU_ids] = True
        self.floor_ids = np.zeros(0, np.int64)
        if var.level_floor is not None:
            self.floor_ids = self.inner_ids
        # simplexes inside the target set use b3
        self.I1 = np.zeros(self.M, bool)
        if var.kind == "reach_target":
            self.I1 = self._target_mask()
            if not self.I1.any():
                raise VariantError("target region contains no simplex")
        self.has_b3 = bool(self.I1.any())

    def _target_mask(self) -> np.ndarray:
        var, tri = self.variant, self.tri
        mask = np.zeros(self.M, bool)
        if var.target_simplexes is not None:
            mask[np.asarray(var.target_simplexes, np.int64)] = True
            return mask
        name = var.target_surface
        if name is None or name not in tri.surfaces:
            raise VariantError("reach_target variant needs a tagged target surface")
        surf = None
        if tri.domain is not None:
            surf = next((s for s in tri.domain.surfaces if s.name == name), None)
        if surf is None or surf.axis is not None or not surf.closed:
            raise VariantError(f"target surface {name!r} must be a closed polyline")
        return points_in_polygon(tri.centroids(), np.asarray(surf.points))

    def _setup_rows(self):
        M, n = self.M, self.n
        i = np.repeat(np.arange(M), n + 1)
        j = np.tile(np.arange(n + 1), M)
        v = self.S[i, j]
        keep = np.ones(len(i), bool)
        if self.origin_pinned and np.linalg.norm(self.F[self.origin]) <= 1e-14:
            # rows at a pinned equilibrium vertex vanish identically
            keep = v != self.origin
        self.ri, self.rj, self.rv = i[keep], j[keep], v[keep]
        self.r_in_target = self.I1[self.ri]
        self.nonzero_row = self.norms[self.rv] > 0

    # -- exact evaluation ------------------------------------------------------
    def grad_V(self, V) -> np.ndarray:
        return _gradients(self.tri, np.asarray(V, float))

    def grad_U(self, U) -> np.ndarray:
        return _gradients(self.tri, np.asarray(U, float).reshape(self.N, self.m))

    def row_drift(self, U) -> np.ndarray:
        """f(x) + G(x) u at every row vertex."""
        v = self.rv
        return self.F[v] + np.einsum("rnm,rm->rn", self.G[v], U[v])

    def dplus(self, y: DecisionVariables, grad_V=None) -> np.ndarray:
        """Upper bounds of the Dini derivative at every row (simplex, vertex)."""
        gV = self.grad_V(y.V) if grad_V is None else grad_V
        i = self.ri
        g = self.row_drift(y.U)
        cij = self.c[i, self.rj]
        Ls = y.L.sum(axis=1)[i]
        val = np.einsum("rn,rn->r", g, gV[i]) + cij * self.mu[i] * Ls
        if self.use_Z:
            val = val + cij * self.eta[i] * y.Z[i] * Ls
        return val

    def exact_rates(self, y: DecisionVariables, dp=None) -> tuple[float, float | None, float]:
        """Largest b2 (and b3) the decrease rows admit, and the worst violation of
        rows that no rate can fix (V = 0 with a positive bound)."""
        dp = self.dplus(y) if dp is None else dp
        Vr = y.V[self.rv]
        bad = 0.0

        def rate(mask):
            nonlocal bad
            if not mask.any():
                return math.inf
            d, v = dp[mask], Vr[mask]
            if self.variant.rhs == "absolute":
                return float(np.min(-d))
            pos = v > 0
            if (~pos).any():
                bad = max(bad, float(np.max(d[~pos])))
            return float(np.min(-d[pos] / v[pos])) if pos.any() else math.inf

        b2 = rate(~self.r_in_target)
        b3 = rate(self.r_in_target) if self.has_b3 else None
        return b2, b3, max(bad, 0.0)

    def residuals(self, y: DecisionVariables) -> dict[str, float]:
        """Largest violation of every nonconvex constraint family at ``y``."""
        out: dict[str, float] = {}
        gV = self.grad_V(y.V)
        out["b1_positive"] = max(0.0, -y.b1)
        bound = y.b1 * self.norms ** y.a
        out["v_lower"] = max(0.0, float(np.max(bound - y.V)))
        out["grad_V"] = max(0.0, float(np.max(np.abs(gV) - y.L)))
        out["input"] = max(0.0, float(np.max(y.U @ self.H.T - self.h)))
        if self.use_Z:
            gU = self.grad_U(y.U)
            out["grad_u"] = max(0.0, float(np.max(np.abs(gU) - y.Z[:, None, None])))
        dp = self.dplus(y, gV)
        Vr = y.V[self.rv]
        rate = np.where(self.r_in_target, y.b3 if y.b3 is not None else 0.0, y.b2)
        lhs = dp + (rate * Vr if self.variant.rhs == "relative" else rate)
        out["decrease"] = max(0.0, float(np.max(lhs))) if len(lhs) else 0.0
        if len(self.pinV_ids):
            out["pin_V"] = float(np.max(np.abs(y.V[self.pinV_ids] - self.pinV_vals)))
        if len(self.pinU_ids):
            out["pin_U"] = float(np.max(np.abs(y.U[self.pinU_ids] - self.pinU_vals)))
        if len(self.tie_ids):
            Vb = y.Vb if y.Vb is not None else float(np.max(y.V[self.tie_ids]))
            out["tie"] = float(np.max(np.abs(y.V[self.tie_ids] - Vb)))
            out["tie_upper"] = max(0.0, float(np.max(y.V - Vb)))
        if len(self.floor_ids):
            out["floor"] = max(0.0, float(np.max(self.variant.level_floor - y.V[self.floor_ids])))
        return out

    def max_residual(self, y) -> float:
        return max(self.residuals(y).values())

    def constraint_counts(self) -> dict[str, int]:
        """Scalar constraint counts of the nonconvex problem by family."""
        n, m, p = self.n, self.m, len(self.h)
        counts = dict(
            v_lower=self.N,
            input=self.N * p,
            grad_V=self.M * 2 * n,
            grad_u=self.M * 2 * n * m if self.use_Z else 0,
            decrease=self.M * (n + 1),
            pin_V=len(self.pinV_ids),
            pin_U=len(self.pinU_ids) * m,
            tie=len(self.tie_ids) + (self.N if len(self.tie_ids) else 0),
        )
        return counts

    def objective_value(self, y: DecisionVariables, objective) -> float:
        if objective == "b2":
            return -y.b2
        if objective in ("input_norm", "input_norm_epigraph"):
            return float(np.sum(y.U ** 2))
        if callable(objective):
            return float(objective(y))
        raise ValueError(f"unknown objective {objective!r}")

    # -- exact repair ------------------------------------------------------------
    def repair(self, y: DecisionVariables, b2_cap: float | None = None) -> tuple[DecisionVariables, float]:
        """Snap a solver point onto the exact constraint set.

        Returns the repaired point and the amount by which the solver's own b2
        exceeded the exactly admissible value (zero for a sound solve).
        """
        y = y.copy()
        y.V[self.pinV_ids] = self.pinV_vals
        y.U[self.pinU_ids] = self.pinU_vals
        free = ~self.U_fixed
        ratio = np.max((y.U @ self.H.T) / self.h, axis=1)
        scale = np.where(free & (ratio > 1), 1.0 / np.maximum(ratio, 1e-300), 1.0)
        y.U *= scale[:, None]
        if len(self.floor_ids):
            f = self.floor_ids[~self.V_fixed[self.floor_ids]]
            y.V[f] = np.maximum(y.V[f], self.variant.level_floor)
        if len(self.tie_ids):
            Vb = float(np.max(y.V))
            y.V[self.tie_ids] = Vb
            y.Vb = Vb
        gV = self.grad_V(y.V)
        # the tightest L and Z only lower the decrease rows
        y.L = np.abs(gV)
        if self.use_Z:
            y.Z = np.abs(self.grad_U(y.U)).max(axis=(1, 2))
        nz = self.norms > 0
        if nz.any():
            y.b1 = float(min(y.b1, np.min(y.V[nz] / self.norms[nz] ** y.a)))
        if not y.b1 > 0:
            raise CertificateError(f"b1 = {y.b1:.3g} is not positive after repair")
        dp = self.dplus(y, gV)
        b2, b3, bad = self.exact_rates(y, dp)
        if bad > CHECK_TOL:
            raise CertificateError(f"decrease row with V = 0 violated by {bad:.3g}")
        excess = max(0.0, y.b2 - b2) if math.isfinite(y.b2) else 0.0
        y.b2 = b2 if b2_cap is None else min(b2_cap, b2)
        if self.has_b3:
            y.b3 = b3
        return y, excess

    @property
    def scale_free(self) -> bool:
        """True when multiplying V (with L, b1, Vb) by a positive number maps
        feasible points to feasible points with the same rates."""
        return (self.variant.rhs == "relative" and len(self.floor_ids) == 0
                and not np.any(self.pinV_vals != 0))

    def normalized(self, y: DecisionVariables) -> DecisionVariables:
        """``y`` with max V = 1 when the variant is scale free; badly scaled V
        stalls the conic solver."""
        vmax = float(np.max(y.V))
        if not self.scale_free or not vmax > 0 or abs(vmax - 1.0) < 1e-12:
            return y
        s = 1.0 / vmax
        return replace(y, V=y.V * s, L=y.L * s, b1=y.b1 * s,
                       Vb=None if y.Vb is None else y.Vb * s)


def assemble_feasibility(model, tri, variant: VariantSpec | None = None, **kw) -> SynthesisProblem:
    """Constraint data of the nonconvex problem; see :class:`SynthesisProblem`."""
    return SynthesisProblem(model, tri, variant or VariantSpec(), **kw)


def verify_feasibility(model, tri, variant: VariantSpec, y: DecisionVariables) -> dict[str, float]:
    """Recompute every constraint residual from the model and mesh alone."""
    prob = SynthesisProblem(model, tri, variant)
    return prob.residuals(y)


# ---------------------------------------------------------------------------
# convexified step


def _coo(rows, cols, vals, shape) -> sp.csr_matrix:
    return sp.csr_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape)


class _StepBuilder:
    """Convex program in the step ``delta`` around a feasible point."""

    def __init__(self, prob: SynthesisProblem, y: DecisionVariables, b2_free: bool,
                 encoding: str = "soc", weights: str = "unit"):
        if encoding not in ("soc", "psd"):
            raise ValueError("encoding must be 'soc' or 'psd'")
        if weights not in ("unit", "scaled"):
            raise ValueError("weights must be 'unit' or 'scaled'")
        self.p, self.y, self.b2_free, self.encoding = prob, y, b2_free, encoding
        self.weights = weights
        prog = ConicProgram()
        M, N, n, m = prob.M, prob.N, prob.n, prob.m
        lay = _Layout(
            V=prog.variable("dV", (N,)), L=prog.variable("dL", (M, n)),
            U=prog.variable("dU", (N, m)),
            Z=prog.variable("dZ", (M,)) if prob.use_Z else None,
            b1=int(prog.variable("db1")),
            b2=int(prog.variable("db2")) if b2_free else None,
            b3=int(prog.variable("db3")) if prob.has_b3 else None,
            Vb=int(prog.variable("dVb")) if len(prob.tie_ids) else None,
        )
        self.prog, self.lay = prog, lay

    @property
    def nvar(self):
        return self.prog.n

    def build(self, objective, prox: float = 0.0):
        self._linear()
        self._decrease()
        self._objective(objective)
        if prox > 0:
            # proximal term keeps rows the objective does not need where they are
            idx = np.concatenate([self.lay.V.ravel(), self.lay.U.ravel()])
            P = _coo(idx, idx, np.full(len(idx), 2.0 * prox), (self.nvar, self.nvar))
            self.prog.minimize_quadratic(P)
        return self.prog

    # linear rows, pins and ties ---------------------------------------------
    def _linear(self):
        p, y, lay, prog = self.p, self.y, self.lay, self.prog
        M, N, n, m, nv = p.M, p.N, p.n, p.m, self.nvar
        S, Dg = p.S, p.Dg
        prog.add_le(_coo([0], [lay.b1], [-1.0], (1, nv)), [EPS_B1 - y.b1])
        na = p.norms ** y.a
        A = _coo(np.r_[np.arange(N), np.arange(N)], np.r_[np.full(N, lay.b1), lay.V],
                 np.r_[na, -np.ones(N)], (N, nv))
        prog.add_le(A, y.b1 * na - y.V)
        # |grad V + Dgrad dV| <= L + dL
        gV = p.grad_V(y.V)
        rows = np.repeat(np.arange(M * n), n + 1)
        cols = lay.V[np.repeat(S, n, axis=0).ravel()]
        vals = Dg.reshape(M * n, n + 1).ravel()
        D = _coo(rows, cols, vals, (M * n, nv))
        Lsel = _coo(np.arange(M * n), lay.L.ravel(), -np.ones(M * n), (M * n, nv))
        prog.add_le(D + Lsel, gV.ravel() - y.L.ravel())
        prog.add_le(-D + Lsel, -gV.ravel() - y.L.ravel())
        # input polytope at every vertex whose input is free
        free = np.nonzero(~p.U_fixed)[0]
        if len(free):
            P = len(p.h)
            Hk = sp.kron(sp.identity(len(free)), sp.csr_matrix(p.H))
            sel = _coo(np.arange(len(free) * m), lay.U[free].ravel(), np.ones(len(free) * m),
                       (len(free) * m, nv))
            prog.add_le(Hk @ sel, (y.U[free] @ p.H.T - p.h).ravel())
        if p.use_Z:
            gU = p.grad_U(y.U)  # (M, m, n)
            # row (i, s, k): sum_j Dg[i,k,j] dU[S[i,j], s]
            R = M * m * n
            ii, ss, kk = np.meshgrid(np.arange(M), np.arange(m), np.arange(n), indexing="ij")
            ii, ss, kk = ii.ravel(), ss.ravel(), kk.ravel()
            rows = np.repeat(np.arange(R), n + 1)
            cols = lay.U[S[ii], ss[:, None]].ravel()
            vals = Dg[ii, kk].ravel()
            DU = _coo(rows, cols, vals, (R, nv))
            Zsel = _coo(np.arange(R), lay.Z[ii], -np.ones(R), (R, nv))
            prog.add_le(DU + Zsel, gU.ravel() - y.Z[ii])
            prog.add_le(-DU + Zsel, -gU.ravel() - y.Z[ii])
        if len(p.pinV_ids):
            k = len(p.pinV_ids)
            prog.add_eq(_coo(np.arange(k), lay.V[p.pinV_ids], np.ones(k), (k, nv)),
                        y.V[p.pinV_ids] - p.pinV_vals)
        if len(p.pinU_ids):
            k = len(p.pinU_ids) * m
            prog.add_eq(_coo(np.arange(k), lay.U[p.pinU_ids].ravel(), np.ones(k), (k, nv)),
                        (y.U[p.pinU_ids] - p.pinU_vals).ravel())
        if lay.Vb is not None:
            Vb = y.Vb if y.Vb is not None else float(np.max(y.V[p.tie_ids]))
            t = p.tie_ids
            k = len(t)
            prog.add_eq(_coo(np.r_[np.arange(k), np.arange(k)], np.r_[lay.V[t], np.full(k, lay.Vb)],
                             np.r_[np.ones(k), -np.ones(k)], (k, nv)), y.V[t] - Vb)
            prog.add_le(_coo(np.r_[np.arange(N), np.arange(N)], np.r_[lay.V, np.full(N, lay.Vb)],
                             np.r_[np.ones(N), -np.ones(N)], (N, nv)), y.V - Vb)
        if len(p.floor_ids):
            f = p.floor_ids
            k = len(f)
            prog.add_le(_coo(np.arange(k), lay.V[f], -np.ones(k), (k, nv)),
                        p.variant.level_floor - y.V[f])

    # decrease rows -----------------------------------------------------------
    def decrease_parts(self):
        """Linear part ``Phi delta + phi0`` of the rows and the overbound entries.

        Returns ``(Phi, phi0, W, d)`` where ``W`` is a list of (R, nvar) sparse
        matrices of raw entries ``w_k`` and ``d`` the matching (R,) weights, so
        that a row holds exactly when ``phi + sum_k w_k^2 / d_k <= 0``.
        """
        p, y, lay = self.p, self.y, self.lay
        n, m, nv = p.n, p.m, self.nvar
        i, j, v = p.ri, p.rj, p.rv
        R = len(i)
        rr = np.arange(R)
        S, Dg = p.S, p.Dg
        gV = p.grad_V(y.V)
        g = p.row_drift(y.U)
        cij = p.c[i, j]
        Ls = y.L.sum(axis=1)[i]
        relative = p.variant.rhs == "relative"
        rate = np.where(p.r_in_target, y.b3 if y.b3 is not None else 0.0, y.b2)
        rate_var = np.where(p.r_in_target, -1 if lay.b3 is None else lay.b3,
                            -1 if lay.b2 is None else lay.b2)
        dp = p.dplus(y, gV)
        phi0 = dp + (rate * y.V[v] if relative else rate)

        parts_r, parts_c, parts_v = [], [], []

        def add(r, c, val):
            parts_r.append(np.ravel(r))
            parts_c.append(np.ravel(c))
            parts_v.append(np.ravel(val))

        Dgi = Dg[i]  # (R, n, n+1)
        add(np.repeat(rr, n + 1), lay.V[S[i]], np.einsum("rp,rpk->rk", g, Dgi))
        if relative:
            add(rr, lay.V[v], rate)
        GtgV = np.einsum("rnm,rn->rm", p.G[v], gV[i])
        add(np.repeat(rr, m), lay.U[v], GtgV)
        zi = y.Z[i] if p.use_Z else 0.0
        lcoef = cij * (p.mu[i] + p.eta[i] * zi)
        add(np.repeat(rr, n), lay.L[i], np.repeat(lcoef, n))
        if p.use_Z:
            add(rr, lay.Z[i], cij * p.eta[i] * Ls)
        fr = rate_var >= 0
        add(rr[fr], rate_var[fr], (y.V[v] if relative else np.ones(R))[fr])
        Phi = _coo(np.concatenate(parts_r), np.concatenate(parts_c), np.concatenate(parts_v), (R, nv))

        # Young weights: a b <= (k/2) a^2 + (1/2k) b^2; k = 1 is the plain block
        if self.weights == "scaled":
            sg = np.maximum(np.linalg.norm(gV[i], axis=1), 1e-9)
            su = np.maximum(np.linalg.norm(p.G[v], axis=(1, 2)) * p.u_scale, 1e-9)
            k1 = su / sg
            k2 = max(abs(y.b2), 1e-3) / np.maximum(y.V[v], 1e-9)
        else:
            k1 = k2 = np.ones(R)
        W, d = [], []
        # grad V step times G du: dropped where u is pinned (the product vanishes)
        uf = ~p.U_fixed[v]
        ru = rr[uf]
        for k in range(n):
            W.append(_coo(np.repeat(ru, n + 1), lay.V[S[i[uf]]], Dgi[uf, k], (R, nv)))
            d.append(2.0 / k1)
        for k in range(n):
            W.append(_coo(np.repeat(ru, m), lay.U[v[uf]], p.G[v[uf], k, :], (R, nv)))
            d.append(2.0 * k1)
        # dV times db: only with a free rate, a free V and the relative form
        if relative:
            bf = fr & ~p.V_fixed[v]
            rb = rr[bf]
            W.append(_coo(rb, lay.V[v[bf]], np.ones(len(rb)), (R, nv)))
            W.append(_coo(rb, rate_var[bf], np.ones(len(rb)), (R, nv)))
            d += [2.0 / k2, 2.0 * k2]
        if p.use_Z:
            ec = p.eta[i] * cij
            q = ec > 0
            rq = rr[q]
            W.append(_coo(np.repeat(rq, n), lay.L[i[q]], np.ones(len(rq) * n), (R, nv)))
            W.append(_coo(rq, lay.Z[i[q]], np.ones(len(rq)), (R, nv)))
            dq = np.where(q, 2.0 / np.where(q, ec, 1.0), 2.0)
            d += [dq, dq]
        return Phi, phi0, W, d

    def _decrease(self):
        Phi, phi0, W, d = self.decrease_parts()
        R = Phi.shape[0]
        if R == 0:
            return
        K = len(W)
        if self.encoding == "soc":
            # rotated cone: 2 (-phi) (1) >= sum_k w_k^2 * (2 / d_k)
            blocks = [-Phi, sp.csr_matrix((R, self.nvar))]
            consts = [-phi0, np.ones(R)]
            for Wk, dk in zip(W, d):
                blocks.append(sp.diags(np.sqrt(2.0 / dk)) @ Wk)
                consts.append(np.zeros(R))
            size = K + 2
            A = sp.vstack(blocks, format="csr")
            b = np.concatenate(consts)
            perm = (np.arange(size)[None, :] * R + np.arange(R)[:, None]).ravel()
            self.prog.add_rsoc(A[perm], b[perm], size)
        else:
            # -P >= 0 with P = [[phi, w^T], [w, -diag(d)]]
            order = K + 1
            from .sdp import svec_index
            blocks, consts = [], []
            zero = sp.csr_matrix((R, self.nvar))
            for (r, c) in svec_index(order):
                if r == 0 and c == 0:
                    blocks.append(-Phi)
                    consts.append(-phi0)
                elif r == 0:
                    blocks.append(-W[c - 1])
                    consts.append(np.zeros(R))
                elif r == c:
                    blocks.append(zero)
                    consts.append(d[c - 1])
                else:
                    blocks.append(zero)
                    consts.append(np.zeros(R))
            size = len(blocks)
            A = sp.vstack(blocks, format="csr")
            b = np.concatenate(consts)
            perm = (np.arange(size)[None, :] * R + np.arange(R)[:, None]).ravel()
            self.prog.add_psd(A[perm], b[perm], order)

    def _objective(self, objective):
        p, y, lay, prog = self.p, self.y, self.lay, self.prog
        if objective == "b2":
            if lay.b2 is None:
                raise ValueError("the b2 objective needs a free b2")
            prog.minimize(lay.b2, -1.0, -y.b2)
        elif objective == "input_norm":
            idx = lay.U.ravel()
            P = _coo(idx, idx, np.full(len(idx), 2.0), (self.nvar, self.nvar))
            prog.minimize_quadratic(P)
            prog.minimize(idx, 2.0 * y.U.ravel(), float(np.sum(y.U ** 2)))
        elif objective == "input_norm_epigraph":
            # phi >= ||U + dU||^2 as a rotated cone (phi / 2) * 1 * 2 >= ||.||^2
            phi = int(prog.variable("phi"))
            lay.phi = phi
            k = lay.U.size
            nv = prog.n
            A = _coo(np.r_[0, np.arange(2, k + 2)], np.r_[phi, lay.U.ravel()],
                     np.r_[0.5, np.ones(k)], (k + 2, nv))
            b = np.r_[0.0, 1.0, y.U.ravel()]
            prog.add_rsoc(A, b, k + 2)
            prog.minimize(phi, 1.0)
        elif callable(objective):
            objective(prog, lay, y)
        else:
            raise ValueError(f"unknown objective {objective!r}")

    def apply(self, x: np.ndarray) -> DecisionVariables:
        lay, y = self.lay, self.y
        out = y.copy()
        out.V = y.V + x[lay.V]
        out.L = y.L + x[lay.L]
        out.U = y.U + x[lay.U]
        if lay.Z is not None:
            out.Z = y.Z + x[lay.Z]
        out.b1 = y.b1 + float(x[lay.b1])
        if lay.b2 is not None:
            out.b2 = y.b2 + float(x[lay.b2])
        if lay.b3 is not None:
            out.b3 = (y.b3 or 0.0) + float(x[lay.b3])
        if lay.Vb is not None:
            out.Vb = (y.Vb if y.Vb is not None else float(np.max(y.V[self.p.tie_ids]))) + float(x[lay.Vb])
        return out


def overbound_block(phi_hat: float, w, d) -> np.ndarray:
    """Dense symmetric block ``[[phi, w^T], [w, -diag(d)]]`` of a single row;
    it is negative semidefinite exactly when ``phi + sum w_k^2 / d_k <= 0``."""
    w = np.asarray(w, float).ravel()
    d = np.broadcast_to(np.asarray(d, float), w.shape)
    k = len(w)
    P = np.zeros((k + 1, k + 1))
    P[0, 0] = phi_hat
    P[0, 1:] = w
    P[1:, 0] = w
    P[np.arange(1, k + 1), np.arange(1, k + 1)] = -d
    return P


@dataclass
class IterateResult:
    vars: DecisionVariables
    accepted: bool
    flag: str  # "ok" | "inexact" (re-verified non-optimal solve) | "rejected" | "solver_failure"
    objective_before: float
    objective_after: float
    solve_time: float = 0.0
    residual: float = 0.0
    backend_status: str = ""


def iterate(model, tri, variant: VariantSpec, current: DecisionVariables, objective="b2",
            problem: SynthesisProblem | None = None, encoding: str = "soc",
            tol: float = 1e-8, prox: float = 0.0, weights: str = "unit") -> IterateResult:
    """One convexified step.  ``objective == "b2"`` maximizes b2; any other
    objective keeps b2 fixed at its current value."""
    prob = problem or SynthesisProblem(model, tri, variant)
    b2_free = objective == "b2"
    before = prob.objective_value(current, objective)
    builder = _StepBuilder(prob, current, b2_free, encoding, weights)
    prog = builder.build(objective, prox)
    t0 = time.perf_counter()
    try:
        rep = prog.solve(tol=tol)
    except SolverError as exc:
        log.warning("solver error: %s", exc)
        return IterateResult(current, False, "solver_failure", before, before)
    elapsed = time.perf_counter() - t0
    x = rep.values if rep.status == OPTIMAL else rep.candidate
    if x is None:
        return IterateResult(current, False, "solver_failure", before, before, elapsed,
                             backend_status=rep.backend_status)
    cand = builder.apply(x)
    cap = None if b2_free else current.b2
    try:
        fixed, excess = prob.repair(cand, b2_cap=cap)
    except CertificateError:
        if rep.status == OPTIMAL:
            raise
        return IterateResult(current, False, "solver_failure", before, before, elapsed,
                             backend_status=rep.backend_status)
    if excess > CHECK_TOL and rep.status == OPTIMAL:
        raise CertificateError(f"solver b2 exceeds the exact value by {excess:.3g}")
    res = prob.max_residual(fixed)
    if res > CHECK_TOL:
        if rep.status == OPTIMAL:
            raise CertificateError(f"re-verified residual {res:.3g} exceeds {CHECK_TOL}")
        return IterateResult(current, False, "solver_failure", before, before, elapsed,
                             backend_status=rep.backend_status)
    after = prob.objective_value(fixed, objective)
    if after > before:
        flag = "rejected" if rep.status == OPTIMAL else "solver_failure"
        return IterateResult(current, False, flag, before, before, elapsed, res, rep.backend_status)
    flag = "ok" if rep.status == OPTIMAL else "inexact"
    return IterateResult(fixed, True, flag, before, after, elapsed, res, rep.backend_status)


# ---------------------------------------------------------------------------
# initializations


def _finish_init(prob: SynthesisProblem, V, U, a: float, b1: float) -> DecisionVariables:
    """Apply variant edits to vertex data and fill L, Z, b1, b2 (and b3)."""
    V = np.array(V, float)
    U = np.array(U, float).reshape(prob.N, prob.m)
    var = prob.variant
    if prob.origin is not None:
        # u = 0 at an equilibrium vertex keeps its rows at zero
        U[prob.origin] = 0.0
    V[prob.pinV_ids] = prob.pinV_vals
    U[prob.pinU_ids] = prob.pinU_vals
    if len(prob.floor_ids):
        f = prob.floor_ids[~prob.V_fixed[prob.floor_ids]]
        V[f] = np.maximum(V[f], var.level_floor)
    Vb = None
    if len(prob.tie_ids):
        Vb = float(np.max(V))
        V[prob.tie_ids] = Vb
    ratio = np.max((U @ prob.H.T) / prob.h, axis=1)
    free = ~prob.U_fixed
    U[free & (ratio > 1)] /= ratio[free & (ratio > 1), None]
    L = np.abs(prob.grad_V(V))
    Z = np.abs(prob.grad_U(U)).max(axis=(1, 2)) if prob.use_Z else np.zeros(prob.M)
    nz = prob.norms > 0
    if nz.any():
        b1 = float(min(b1, np.min(V[nz] / prob.norms[nz] ** a)))
    if not b1 > 0:
        raise SynthesisError("initial V is not positive away from the origin")
    y = DecisionVariables(V=V, L=L, U=U, Z=Z, a=float(a), b1=b1, b2=-math.inf, Vb=Vb)
    b2, b3, bad = prob.exact_rates(y)
    if bad > 0 or not math.isfinite(b2):
        raise SynthesisError("no decay rate makes the initial point feasible")
    y.b2 = b2
    if prob.has_b3:
        y.b3 = b3
    return y


def lqr(model: mdl.SystemModel, Q=None, R=None) -> tuple[np.ndarray, np.ndarray]:
    """(P, K) of the linearization at the origin, ``u = -K x``."""
    A, B = model.linearize()
    Q = 2.0 * np.eye(model.n) if Q is None else np.asarray(Q, float)
    R = np.eye(model.m) if R is None else np.asarray(R, float)
    try:
        P = solve_continuous_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SynthesisError(f"Riccati solve failed: {exc}") from exc
    P = 0.5 * (P + P.T)
    res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q
    if not np.all(np.isfinite(P)) or np.max(np.abs(res)) > 1e-6 * max(1.0, np.max(np.abs(P))):
        raise SynthesisError("Riccati solution is inaccurate")
    K = np.linalg.solve(R, B.T @ P)
    return P, K


def init_lqr(model, tri, variant: VariantSpec, Q=None, R=None,
             problem: SynthesisProblem | None = None, inner_u=None) -> DecisionVariables:
    """Quadratic V and saturated linear feedback from the Riccati equation.

    For the multi-stage variant the quadratic is scaled so its smallest
    inner-boundary value equals the level floor, and ``inner_u`` replaces the
    inner inputs.
    """
    prob = problem or SynthesisProblem(model, tri, variant)
    P, K = lqr(model, Q, R)
    X = tri.vertices
    V = np.einsum("pi,ij,pj->p", X, P, X)
    U = -X @ K.T
    if len(prob.inner_ids):
        # scale the quadratic so the inner boundary sits at the stitch level
        floor = variant.level_floor or 0.0
        vin = float(np.min(V[prob.inner_ids]))
        if floor > 0 and vin > 0:
            V *= floor / vin
        if inner_u is not None:
            U[prob.inner_ids] = np.asarray(inner_u, float).reshape(-1, prob.m)
    b1 = float(np.linalg.eigvalsh(P)[0])
    return _finish_init(prob, V, U, 2.0, b1)


def init_random(model, tri, variant: VariantSpec, a: float = 2.0, b1: float = 1.0,
                rng: np.random.Generator | None = None, u: str = "random",
                problem: SynthesisProblem | None = None) -> DecisionVariables:
    """``V = b1 |x|^a`` with admissible random (or zero) inputs."""
    if a < 1 or not b1 > 0:
        raise ValueError("need a >= 1 and b1 > 0")
    prob = problem or SynthesisProblem(model, tri, variant)
    rng = np.random.default_rng() if rng is None else rng
    V = b1 * prob.norms ** a
    if len(prob.inner_ids) and variant.level_floor is not None:
        # scale so the inner boundary sits at the stage level
        inner = prob.inner_ids
        b1 = float(np.min(variant.level_floor / prob.norms[inner] ** a))
        V = b1 * prob.norms ** a
        V[inner] = variant.level_floor
    U = np.zeros((prob.N, prob.m))
    if u == "random":
        bound = mdl.input_projection_bounds(model)
        todo = np.arange(prob.N)
        for _ in range(100):
            if len(todo) == 0:
                break
            cand = rng.uniform(-bound, bound, size=(len(todo), prob.m))
            ok = model.admissible(cand)
            U[todo[ok]] = cand[ok]
            todo = todo[~ok]
    elif u != "zero":
        raise ValueError("u must be 'random' or 'zero'")
    return _finish_init(prob, V, U, a, b1)


def interpolate_init(model, tri, variant: VariantSpec, prev_V: CpaScalarField,
                     prev_U: CpaVectorField, a: float, b1: float,
                     problem: SynthesisProblem | None = None) -> DecisionVariables:
    """Warm start on a new mesh from fields of an earlier solution."""
    prob = problem or SynthesisProblem(model, tri, variant)
    X = tri.vertices
    V = prev_V.evaluate(X, outside="nan")
    U = prev_U.evaluate(X, outside="nan").reshape(prob.N, prob.m)
    miss = np.isnan(V) | np.isnan(U).any(axis=1)
    if miss.any():
        # vertices outside the old mesh copy the nearest old vertex
        _, k = cKDTree(prev_V.tri.vertices).query(X[miss])
        V[miss] = prev_V.values[k]
        U[miss] = np.asarray(prev_U.values).reshape(-1, prob.m)[k]
    return _finish_init(prob, V, U, a, b1)


# ---------------------------------------------------------------------------
# fixed-mesh iteration


@dataclass
class IterationLog:
    phase: int
    index: int
    objective: float
    b2: float
    flag: str
    solve_time: float
    residual: float
    area: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FixedMeshResult:
    vars: DecisionVariables
    history: list[IterationLog]
    target_reached: bool
    stalled: bool
    best_region_vars: DecisionVariables | None = None
    best_region_area: float = 0.0

    @property
    def b2_positive(self) -> bool:
        return self.vars.b2 > 0


def run_fixed_mesh(model, tri, variant: VariantSpec, init: DecisionVariables,
                   b2_target: float = DEFAULT_B2_TARGET, J_hat="input_norm",
                   max_iters: int | tuple[int, int] = (20, 10),
                   problem: SynthesisProblem | None = None, encoding: str = "soc",
                   track_region: bool = False, stop_area: float | None = None,
                   callback: Callable | None = None, weights: str = "scaled",
                   prox: float = 0.0, normalize: bool = True,
                   min_rate: float = 0.0) -> FixedMeshResult:
    """Phase 1 raises b2 until ``b2_target``; phase 2 (when b2 > 0) minimizes
    ``J_hat`` with b2 frozen.  With ``track_region`` every iterate is also
    certified (salvaging when b2 <= 0) and the one with the largest region
    among those with a rate of at least ``min_rate`` kept.
    With ``normalize`` V is rescaled to max 1 before each step when the
    variant allows it (rates are unchanged by the rescaling)."""
    prob = problem or SynthesisProblem(model, tri, variant)
    n1, n2 = (max_iters, max_iters) if isinstance(max_iters, int) else max_iters
    y = init
    hist: list[IterationLog] = []
    best_vars, best_area = None, 0.0

    def track(entry, yy):
        nonlocal best_vars, best_area
        if not track_region:
            return
        try:
            reg = certify(model, tri, variant, yy, problem=prob)
            entry.area = reg.area
            if reg.b2 >= min_rate and reg.area > best_area:
                best_vars, best_area = yy, reg.area
        except (EmptyRegionError, MeshError, CertificateError):
            entry.area = 0.0

    entry = IterationLog(0, 0, -y.b2, y.b2, "init", 0.0, prob.max_residual(y))
    track(entry, y)
    hist.append(entry)
    stall = 0
    stalled = False
    for k in range(n1):
        if y.b2 >= b2_target and k > 0:
            break
        if normalize:
            y = prob.normalized(y)
        res = iterate(model, tri, variant, y, "b2", problem=prob, encoding=encoding,
                      weights=weights, prox=prox)
        delta = res.vars.b2 - y.b2
        y = res.vars
        entry = IterationLog(1, k + 1, res.objective_after, y.b2, res.flag, res.solve_time,
                             res.residual)
        track(entry, y)
        hist.append(entry)
        log.info("phase 1 iter %d: b2 = %.6g (%s, %.1fs)", k + 1, y.b2, res.flag, res.solve_time)
        if callback:
            callback(entry, y)
        if stop_area is not None and best_area >= stop_area:
            break
        if y.b2 >= b2_target:
            break
        stall = stall + 1 if abs(delta) < STALL_TOL else 0
        if stall >= STALL_COUNT:
            stalled = True
            break
    reached = y.b2 >= b2_target
    if y.b2 > 0 and J_hat is not None and n2 > 0:
        stall = 0
        for k in range(n2):
            if normalize:
                y = prob.normalized(y)
            res = iterate(model, tri, variant, y, J_hat, problem=prob, encoding=encoding,
                          weights=weights, prox=prox)
            delta = res.objective_before - res.objective_after
            y = res.vars
            entry = IterationLog(2, k + 1, res.objective_after, y.b2, res.flag, res.solve_time,
                                 res.residual)
            hist.append(entry)
            log.info("phase 2 iter %d: J = %.6g (%s)", k + 1, res.objective_after, res.flag)
            if callback:
                callback(entry, y)
            stall = stall + 1 if abs(delta) < STALL_TOL else 0
            if stall >= STALL_COUNT or res.flag == "solver_failure":
                break
        if track_region:
            entry = hist[-1]
            track(entry, y)
    return FixedMeshResult(y, hist, reached, stalled, best_vars, best_area)


# ---------------------------------------------------------------------------
# salvage and certified regions


@dataclass
class SalvageResult:
    index_set: np.ndarray
    tri: Triangulation
    hat_b2: float
    tilde_b2: float | None
    excluded: np.ndarray


def salvage(model, tri, vars: DecisionVariables, variant: VariantSpec | None = None,
            problem: SynthesisProblem | None = None) -> SalvageResult:
    """Keep the simplexes whose decrease rows are strictly negative at every
    vertex other than the origin and report the decay rate they certify."""
    prob = problem or SynthesisProblem(model, tri, variant or VariantSpec(kind="plain"))
    dp = prob.dplus(vars)
    i = prob.ri
    rows = prob.nonzero_row & ~prob.r_in_target
    bad = np.zeros(prob.M, bool)
    np.logical_or.at(bad, i[rows], dp[rows] >= 0)
    keep = np.nonzero(~bad)[0]
    if len(keep) == 0:
        raise EmptyRegionError("no simplex has strictly negative decrease rows")
    mask = np.zeros(prob.M, bool)
    mask[keep] = True
    sel = rows & mask[i]
    Vr = vars.V[prob.rv]
    hat = float(np.min(-dp[sel] / Vr[sel])) if sel.any() else math.inf
    tilde = None
    if prob.variant.rhs == "absolute" and vars.b2 > 0:
        tilde = float(np.min(vars.b2 / Vr[rows]))
    sub = restrict(tri, keep)
    return SalvageResult(keep, sub, hat, tilde, np.nonzero(bad)[0])


@dataclass
class CertifiedRegion:
    r: float
    region: SublevelRegion
    a: float
    b1: float
    b2: float
    stage: int = 1
    salvage: str = "none"  # none | hat_b2 | tilde_b2
    tri: Triangulation | None = field(default=None, repr=False)
    V: CpaScalarField | None = field(default=None, repr=False)
    u: CpaVectorField | None = field(default=None, repr=False)
    excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64), repr=False)
    b3: float | None = None
    target_simplexes: np.ndarray | None = field(default=None, repr=False)
    surrounds_hole: bool | None = None

    @property
    def area(self) -> float:
        return float(self.region.area)

    @property
    def polyline(self) -> np.ndarray:
        return self.region.boundary_polyline

    def contains(self, X, strict: bool = False) -> np.ndarray:
        return self.region.contains(X, strict)

    def to_dict(self) -> dict:
        return dict(r=self.r, a=self.a, b1=self.b1, b2=self.b2, b3=self.b3, stage=self.stage,
                    salvage=self.salvage, area=self.area,
                    excluded_simplexes=np.asarray(self.excluded).tolist(),
                    region_simplexes=self.region.simplexes.tolist(),
                    polyline=self.polyline.tolist())


def _hole_facets(work: Triangulation, parent: Triangulation, inner_ids) -> tuple[np.ndarray, np.ndarray]:
    """Boundary facets of ``work`` lying on the parent's inner boundary, and the
    rest (ids in ``work`` numbering)."""
    F = boundary_facets(work.simplexes)
    pmap = work.parent_vertex_ids if work.parent_vertex_ids is not None else np.arange(work.n_vertices)
    inner = np.zeros(parent.n_vertices, bool)
    inner[inner_ids] = True
    pf = np.sort(pmap[F], axis=1)
    parent_bnd = {tuple(f) for f in np.sort(boundary_facets(parent.simplexes), axis=1)}
    on_hole = np.array([inner[f].all() and tuple(f) in parent_bnd for f in pf], bool)
    return F[on_hole], F[~on_hole]


def certify(model, tri, variant: VariantSpec, vars: DecisionVariables, stage: int = 1,
            problem: SynthesisProblem | None = None) -> CertifiedRegion:
    """Independently re-check ``vars`` and extract the largest certified sublevel set.

    With b2 <= 0 the region lives on the salvaged sub-triangulation.
    """
    prob = problem or SynthesisProblem(model, tri, variant)
    res = verify_feasibility(model, tri, variant, vars) if problem is None else prob.residuals(vars)
    worst = max(res.values())
    if worst > CHECK_TOL:
        key = max(res, key=res.get)
        raise CertificateError(f"constraint {key} violated by {worst:.3g}")
    salv_kind = "none"
    excluded = np.zeros(0, np.int64)
    b2 = vars.b2
    if vars.b2 > 0 and not (variant.rhs == "absolute"):
        work = tri
        Vw, Uw = vars.V, vars.U
        parent_ids = np.arange(tri.n_simplexes)
    else:
        sv = salvage(model, tri, vars, variant, problem=prob)
        if variant.rhs == "absolute" and vars.b2 > 0 and sv.tilde_b2 is not None:
            work, parent_ids = tri, np.arange(tri.n_simplexes)
            Vw, Uw = vars.V, vars.U
            b2, salv_kind = sv.tilde_b2, "tilde_b2"
        else:
            if not sv.hat_b2 > 0:
                raise EmptyRegionError("salvaged rate is not positive")
            work = sv.tri
            parent_ids = sv.index_set
            Vw, Uw = vars.V[work.parent_vertex_ids], vars.U[work.parent_vertex_ids]
            b2, salv_kind, excluded = sv.hat_b2, "hat_b2", sv.excluded
    Vf = CpaScalarField(work, Vw)
    Uf = CpaVectorField(work, Uw)
    seeds, bnd = None, None
    surrounds = None
    if variant.kind == "multi_stage":
        hole_f, other_f = _hole_facets(work, tri, prob.inner_ids)
        if len(other_f) == 0:
            raise EmptyRegionError("sub-triangulation has no outer boundary")
        bnd = np.unique(other_f)
        touch = np.isin(work.simplexes, np.unique(hole_f)).any(axis=1) if len(hole_f) else None
        if touch is None or not touch.any():
            raise EmptyRegionError("no simplex touches the inner boundary")
        seeds = np.nonzero(touch)[0]
    elif variant.kind == "reach_target" and prob.has_b3:
        pos = np.full(tri.n_simplexes, -1)
        pos[parent_ids] = np.arange(len(parent_ids))
        seeds = pos[np.nonzero(prob.I1)[0]]
        seeds = seeds[seeds >= 0]
    region = largest_certified_sublevel(Vf, boundary_ids=bnd, seeds=seeds)
    if variant.kind == "multi_stage":
        # every hole-adjacent simplex must lie in the region for it to wrap the hole
        inner_all = np.zeros(tri.n_simplexes, bool)
        inner_all[np.isin(tri.simplexes, prob.inner_ids).sum(axis=1) >= tri.n] = True
        wrap_ids = np.nonzero(inner_all)[0]
        pos = np.full(tri.n_simplexes, -1)
        pos[parent_ids] = np.arange(len(parent_ids))
        surrounds = bool(np.all(np.isin(pos[wrap_ids], region.simplexes)) and np.all(pos[wrap_ids] >= 0))
    return CertifiedRegion(
        r=region.r, region=region, a=vars.a, b1=vars.b1, b2=float(b2), stage=stage,
        salvage=salv_kind, tri=work, V=Vf, u=Uf, excluded=excluded, b3=vars.b3,
        target_simplexes=(np.nonzero(prob.I1)[0] if prob.has_b3 else None),
        surrounds_hole=surrounds,
    )


def recheck(model, res: "StageResult", b2: float | None = None, mu=None) -> dict[str, float]:
    """Residuals of a stage certificate recomputed from the model and mesh.

    Besides the solver-level families, ``certified_rate`` checks the claimed
    rate (``b2`` or the certificate's) on every decrease row of the simplexes
    the region lives on, which covers salvaged certificates too.  ``mu``
    overrides the Hessian bounds (negative controls use it).
    """
    prob = SynthesisProblem(model, res.tri, res.variant, mu=mu)
    y = res.vars
    out = prob.residuals(y)
    c = res.certified
    rate = c.b2 if b2 is None else b2
    own = getattr(c.tri, "parent_simplex_ids", None) if c.tri is not res.tri else None
    mask = np.zeros(prob.M, bool)
    mask[np.arange(prob.M) if own is None else own] = True
    rows = mask[prob.ri] & ~prob.r_in_target & prob.nonzero_row
    dp = prob.dplus(y)[rows]
    Vr = y.V[prob.rv[rows]]
    lhs = dp + (rate * Vr if res.variant.rhs == "relative" else rate)
    out["certified_rate"] = max(0.0, float(np.max(lhs))) if len(lhs) else 0.0
    return out


@dataclass
class StageResult:
    tri: Triangulation
    vars: DecisionVariables
    certified: CertifiedRegion
    variant: VariantSpec
    history: list = field(default_factory=list)
    fixed: FixedMeshResult | None = field(default=None, repr=False)

    def bundle(self) -> dict:
        """JSON-ready export: mesh, fields, constants, region polyline, salvage flag."""
        c = self.certified
        return dict(
            stage=c.stage,
            mesh=self.tri.to_dict(),
            V=self.vars.V.tolist(),
            u=self.vars.U.tolist(),
            constants=dict(a=c.a, b1=c.b1, b2=c.b2, b3=c.b3, r=c.r, Vb=self.vars.Vb,
                           solver_b2=self.vars.b2),
            region=dict(area=c.area, polyline=c.polyline.tolist(),
                        loops=[L.tolist() for L in c.region.loops],
                        simplexes=c.region.simplexes.tolist()),
            salvage=c.salvage,
            excluded_simplexes=np.asarray(c.excluded).tolist(),
            region_mesh=(c.tri.to_dict() if c.tri is not self.tri else None),
            region_parent_vertices=(c.tri.parent_vertex_ids.tolist()
                                    if c.tri is not self.tri else None),
            variant=self.variant.to_dict(),
            history=[h.to_dict() for h in self.history],
        )

    def to_json(self) -> str:
        return json.dumps(self.bundle())


def stage_from_bundle(d: dict, model) -> StageResult:
    tri = Triangulation.from_dict(d["mesh"])
    var = VariantSpec(**{k: v for k, v in d["variant"].items()})
    V = np.asarray(d["V"], float)
    U = np.asarray(d["u"], float).reshape(tri.n_vertices, -1)
    y = DecisionVariables(V=V, L=np.abs(_gradients(tri, V)), U=U,
                          Z=np.abs(_gradients(tri, U)).max(axis=(1, 2)), a=d["constants"]["a"],
                          b1=d["constants"]["b1"], b2=d["constants"]["solver_b2"],
                          b3=d["constants"].get("b3"), Vb=d["constants"].get("Vb"))
    if d.get("region_mesh"):
        work = Triangulation.from_dict(d["region_mesh"])
        pv = np.asarray(d["region_parent_vertices"], np.int64)
        work.parent_vertex_ids = pv
        Vw, Uw = V[pv], U[pv]
    else:
        work, Vw, Uw = tri, V, U
    Vf = CpaScalarField(work, Vw)
    c = d["constants"]
    seeds = np.asarray(d["region"]["simplexes"], np.int64)
    region = sublevel_component(Vf, c["r"], seeds)
    cert = CertifiedRegion(r=c["r"], region=region, a=c["a"], b1=c["b1"], b2=c["b2"],
                           stage=d["stage"], salvage=d["salvage"], tri=work, V=Vf,
                           u=CpaVectorField(work, Uw),
                           excluded=np.asarray(d["excluded_simplexes"], np.int64), b3=c.get("b3"))
    return StageResult(tri, y, cert, var)


# ---------------------------------------------------------------------------
# refinement, domain contraction and stage sequencing


@dataclass
class StageOptions:
    """Per-stage knobs.

    ``area_goal`` (when set) replaces the default success test, which is a
    positive b2 on the whole mesh.  ``contract`` is the area fraction kept when
    the domain is shrunk to a V level curve after a failed mesh schedule.
    """

    b2_target: float = DEFAULT_B2_TARGET
    iterations: tuple = (20, 5)
    J_hat: str | None = "input_norm"
    weights: str = "scaled"
    encoding: str = "soc"
    init: str = "lqr"
    seed: int = 0
    gamma: dict | float = 0.5
    rho_min: float = 0.0
    max_meshes: int = 1
    area_goal: float | None = None
    min_rate: float = 1e-3
    contract: float | None = None
    max_contractions: int = 0

    def __post_init__(self):
        self.iterations = tuple(self.iterations) if not isinstance(self.iterations, int) \
            else (self.iterations, self.iterations)
        g = self.gamma.values() if isinstance(self.gamma, dict) else [self.gamma]
        if not all(0 < float(v) < 1 for v in g):
            raise ValueError("refinement factors gamma must lie in (0, 1)")
        if self.contract is not None and not 0 < self.contract < 1:
            raise ValueError("contract must lie in (0, 1)")
        if self.init not in ("lqr", "random"):
            raise ValueError("init must be 'lqr' or 'random'")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["iterations"] = list(self.iterations)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "StageOptions":
        return cls(**(d or {}))


@dataclass
class MeshAttempt:
    domain_area: float
    n_simplexes: int
    rho_min: float
    b2: float
    area: float
    seconds: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RefineResult:
    best: StageResult | None
    attempts: list[MeshAttempt]
    met: bool
    last_tri: Triangulation | None = field(default=None, repr=False)
    last_vars: DecisionVariables | None = field(default=None, repr=False)


def _resolve_variant(variant, tri) -> VariantSpec:
    return variant(tri) if callable(variant) else variant


def _initial(model, tri, var: VariantSpec, prob: SynthesisProblem, opts: StageOptions,
             warm, inner_u_field) -> DecisionVariables:
    if warm is not None:
        Vf, Uf, a, b1 = warm
        return interpolate_init(model, tri, var, Vf, Uf, a, b1, problem=prob)
    inner_u = None
    if inner_u_field is not None and len(prob.inner_ids):
        inner_u = _eval_nearest(inner_u_field, tri.vertices[prob.inner_ids])
    if opts.init == "random":
        rng = np.random.default_rng(opts.seed)
        y = init_random(model, tri, var, rng=rng, problem=prob)
        if inner_u is not None and not var.pins_U:
            U = y.U.copy()
            U[prob.inner_ids] = inner_u
            y = _finish_init(prob, y.V, U, y.a, y.b1)
        return y
    return init_lqr(model, tri, var, problem=prob, inner_u=inner_u)


def _eval_nearest(fieldobj, X) -> np.ndarray:
    out = np.asarray(fieldobj.evaluate(X, outside="nan"), float)
    bad = np.isnan(out.reshape(len(X), -1)).any(axis=1)
    if bad.any():
        _, k = cKDTree(fieldobj.tri.vertices).query(X[bad])
        out[bad] = fieldobj.values[k]
    return out


def _met(cert: CertifiedRegion | None, opts: StageOptions) -> bool:
    if cert is None:
        return False
    if opts.area_goal is not None:
        return cert.area >= opts.area_goal
    return cert.salvage == "none" and cert.b2 > 0


def run_refining(model, domain: Domain, variant, size0: SizeField, options: StageOptions | None = None,
                 stage: int = 1, warm=None, inner_u_field=None, first_tri: Triangulation | None = None,
                 deadline: float | None = None) -> RefineResult:
    """Mesh, solve on the fixed mesh, certify; shrink the size field by the
    region-wise factors until the objective is met, ``rho_min`` would be
    crossed, or ``max_meshes`` meshes were tried.  Keeps the largest
    certified region.  ``variant`` may be a callable building the variant from
    the mesh (stage stitching data is mesh dependent)."""
    opts = options or StageOptions()
    size = size0
    best: StageResult | None = None
    attempts: list[MeshAttempt] = []
    met = False
    tri = y = None
    for k in range(max(1, opts.max_meshes)):
        t0 = time.perf_counter()
        tri = first_tri if (k == 0 and first_tri is not None) else build(domain, size)
        var = _resolve_variant(variant, tri)
        prob = SynthesisProblem(model, tri, var)
        y0 = _initial(model, tri, var, prob, opts, warm, inner_u_field)
        fx = run_fixed_mesh(model, tri, var, y0, opts.b2_target, opts.J_hat, opts.iterations,
                            problem=prob, encoding=opts.encoding, track_region=True,
                            weights=opts.weights, min_rate=opts.min_rate)
        y = fx.vars
        cand = y if y.b2 > 0 else fx.best_region_vars
        cert = None
        if cand is not None:
            try:
                cert = certify(model, tri, var, cand, stage=stage, problem=prob)
            except EmptyRegionError:
                cert = None
        area = cert.area if cert is not None else 0.0
        attempts.append(MeshAttempt(domain.volume(), tri.n_simplexes, size.rho_min, y.b2, area,
                                    time.perf_counter() - t0))
        log.info("mesh %d: %d simplexes, b2 = %.4g, certified area %.4g", k, tri.n_simplexes,
                 y.b2, area)
        if cert is not None and (best is None or area > best.certified.area):
            best = StageResult(tri, cand, cert, var, fx.history, fx)
        if _met(cert, opts):
            met = True
            break
        nxt = size.scaled(opts.gamma)
        if nxt.rho_min < opts.rho_min or (deadline is not None and time.perf_counter() > deadline):
            break
        size = nxt
        warm = (CpaScalarField(tri, y.V), CpaVectorField(tri, y.U), y.a, y.b1)
    return RefineResult(best, attempts, met, tri, y)


def _origin_seeds(tri: Triangulation) -> np.ndarray:
    if tri.origin_id is not None:
        return np.nonzero(np.any(tri.simplexes == tri.origin_id, axis=1))[0]
    return tri.locator().find(np.zeros((1, tri.n)))[0][:1]


def contraction_loop(tri: Triangulation, V, fraction: float, seeds=None) -> np.ndarray:
    """Boundary of the V sublevel component (grown from ``seeds``, by default the
    simplexes at the origin) whose area is ``fraction`` of the mesh area."""
    Vf = V if isinstance(V, CpaScalarField) else CpaScalarField(tri, V)
    seeds = _origin_seeds(tri) if seeds is None else np.asarray(seeds)
    target = fraction * float(tri.volumes.sum())
    lo, hi = float(np.min(Vf.values[tri.simplexes[seeds]].max(axis=1))), float(np.max(Vf.values))
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if sublevel_component(Vf, mid, seeds).area > target:
            hi = mid
        else:
            lo = mid
    reg = sublevel_component(Vf, lo, seeds)
    if reg.area <= 0 or len(reg.loops) == 0:
        raise SynthesisError("contraction found no level curve around the seeds")
    return reg.boundary_polyline


@dataclass
class ContractionResult:
    best: StageResult | None
    domains: list[Domain]
    attempts: list[list[MeshAttempt]]
    met: bool

    @property
    def flat_attempts(self) -> list[MeshAttempt]:
        return [a for lst in self.attempts for a in lst]


def run_contracting(model, domain: Domain, variant: VariantSpec, size: SizeField,
                    options: StageOptions | None = None, stage: int = 1,
                    deadline: float | None = None) -> ContractionResult:
    """:func:`run_refining` on ``domain``; when the objective is not met, shrink
    the domain to a level curve of the last V (keeping ``options.contract`` of
    the area), warm start by interpolation and try again."""
    opts = options or StageOptions()
    if variant.kind == "multi_stage":
        raise VariantError("domain contraction applies to single-region variants")
    best: StageResult | None = None
    domains, attempts = [domain], []
    warm = None
    met = False
    for c in range(opts.max_contractions + 1):
        rr = run_refining(model, domain, variant, size, opts, stage=stage, warm=warm,
                          deadline=deadline)
        attempts.append(rr.attempts)
        if rr.best is not None and (best is None or rr.best.certified.area > best.certified.area):
            best = rr.best
        if rr.met:
            met = True
            break
        if opts.contract is None or c == opts.max_contractions:
            break
        if deadline is not None and time.perf_counter() > deadline:
            break
        loop = contraction_loop(rr.last_tri, rr.last_vars.V, opts.contract)
        log.info("contracting the domain to area %.4g", opts.contract * domain.volume())
        surfaces = tuple(s for s in domain.surfaces if s.axis is None)
        domain = Domain("polygon", outer=tuple(map(tuple, loop)), surfaces=surfaces,
                        include_origin=domain.include_origin, method="cdt")
        domains.append(domain)
        y = rr.last_vars
        warm = (CpaScalarField(rr.last_tri, y.V), CpaVectorField(rr.last_tri, y.U), y.a, y.b1)
    return ContractionResult(best, domains, attempts, met)


def stitch_level(cert: CertifiedRegion, shrink: Sequence[float] = tuple(np.linspace(0.0, 0.1, 41)[1:]),
                 ) -> tuple[float, np.ndarray]:
    """A level ``r' < r`` of a certified region whose boundary loop is simple and
    has no very short segments, with that loop.  Such a loop can serve as the
    inner boundary of the next stage's mesh."""
    from shapely.geometry import Polygon

    seeds = cert.region.simplexes
    best = None
    for s in shrink:
        lvl = cert.r * (1.0 - s)
        reg = sublevel_component(cert.V, lvl, seeds)
        if len(reg.loops) != 1:
            continue
        loop = reg.loops[0]
        seg = np.linalg.norm(np.roll(loop, -1, axis=0) - loop, axis=1)
        if seg.min() <= 0 or not Polygon(loop).is_valid:
            continue
        score = seg.min() / seg.mean()
        if best is None or score > best[0] * 2:
            best = (score, lvl, loop)
        if score >= 0.05:
            return lvl, loop
    if best is None:
        raise SynthesisError("no clean level curve found inside the certified region")
    return best[1], best[2]


@dataclass
class StageConfig:
    """One stage of a sequential run: the region to cover and how to mesh it."""

    domain: Domain
    size: SizeField
    options: StageOptions = field(default_factory=StageOptions)
    kind: str = "single_stage"
    continuity: str = "discontinuous_both"


@dataclass
class MultiStageResult:
    stages: list[StageResult]
    levels: list[float]
    holes: list[np.ndarray]
    areas: list[float]
    constants: list[dict]
    attempts: list[list[MeshAttempt]]
    complete: bool

    @property
    def combined_area(self) -> float:
        return self.areas[-1] if self.areas else 0.0

    def summary(self) -> dict:
        return dict(areas=self.areas, levels=self.levels, constants=self.constants,
                    complete=self.complete,
                    attempts=[[a.to_dict() for a in lst] for lst in self.attempts])


def _stage_variant(prev: CertifiedRegion, level: float, continuity: str):
    def make(tri: Triangulation) -> VariantSpec:
        ids = np.asarray(tri.surfaces["inner"], np.int64)
        X = tri.vertices[ids]
        pin_U = _eval_nearest(prev.u, X).reshape(len(ids), -1)
        return VariantSpec(kind="multi_stage", pin_ids=ids, pin_V=np.full(len(ids), level),
                           pin_U=pin_U, continuity=continuity, level_floor=level)
    return make


def run_multistage(model, stages: Sequence[StageConfig], deadline: float | None = None
                   ) -> MultiStageResult:
    """Stage 1 certifies a region around the origin.  Each later stage meshes
    the annulus between a clean level curve of the previous region and its own
    outer polygon, and its region must wrap that hole.  Combined constants are
    running minima; the combined area is the hole area plus the new region."""
    results: list[StageResult] = []
    levels, holes, areas, consts, attempts = [], [], [], [], []
    complete = True
    for k, cfg in enumerate(stages):
        if k == 0:
            if cfg.kind not in ("stabilize", "single_stage"):
                raise VariantError("the first stage must be stabilize or single_stage")
            cr = run_contracting(model, cfg.domain, VariantSpec(kind=cfg.kind), cfg.size,
                                 cfg.options, stage=1, deadline=deadline)
            attempts.append(cr.flat_attempts)
            if cr.best is None:
                complete = False
                break
            res = cr.best
            results.append(res)
            areas.append(res.certified.area)
            c = res.certified
            consts.append(dict(a=c.a, b1=c.b1, b2=c.b2))
            continue
        prev = results[-1].certified
        level, loop = stitch_level(prev)
        # everything certified so far is reported at the stitch level
        areas[-1] = polygon_area(loop)
        outer = cfg.domain.outer_loop()
        first = triangulate_annulus(outer, loop, cfg.size)
        variant = _stage_variant(prev, level, cfg.continuity)
        rr = run_refining(model, first.domain, variant, cfg.size, cfg.options, stage=k + 1,
                          inner_u_field=prev.u, first_tri=first, deadline=deadline)
        attempts.append(rr.attempts)
        levels.append(level)
        holes.append(loop)
        if rr.best is None or not rr.best.certified.surrounds_hole:
            complete = False
            break
        res = rr.best
        results.append(res)
        c = res.certified
        prevc = consts[-1]
        consts.append(dict(a=min(c.a, prevc["a"]), b1=min(c.b1, prevc["b1"]),
                           b2=min(c.b2, prevc["b2"])))
        areas.append(areas[-1] + c.area)
    return MultiStageResult(results, levels, holes, areas, consts, attempts, complete)

