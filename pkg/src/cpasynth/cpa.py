"""Continuous piecewise-affine fields on a triangulation and their sublevel sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .mesh import BARY_TOL, MeshError, Triangulation

LEVEL_SHRINK = 1e-6


class OutsideError(ValueError):
    """A query point lies outside the triangulation."""


class EmptyRegionError(ValueError):
    pass


def _gradients(tri: Triangulation, W: np.ndarray) -> np.ndarray:
    """Per-simplex gradients of the CPA interpolant of vertex data ``W``.

    ``W`` has shape (N,) or (N, m); the result is (M, n) or (M, m, n).
    """
    S = tri.simplexes
    if W.ndim == 1:
        Wbar = W[S[:, 1:]] - W[S[:, :1]]
        return np.einsum("ikj,ij->ik", tri.X_inv, Wbar)
    Wbar = W[S[:, 1:]] - W[S[:, :1]]  # (M, n, m)
    return np.einsum("ikj,ijs->isk", tri.X_inv, Wbar)


class _Field:
    def __init__(self, tri: Triangulation, values):
        vals = np.array(values, dtype=float)
        if vals.shape[0] != tri.n_vertices:
            raise ValueError(f"expected one value per vertex ({tri.n_vertices}), got {vals.shape[0]}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals.setflags(write=False)
        self.tri = tri
        self.values = vals
        self._grads = None

    def gradients(self) -> np.ndarray:
        if self._grads is None:
            self._grads = _gradients(self.tri, self.values)
            self._grads.setflags(write=False)
        return self._grads

    def gradient(self, i: int) -> np.ndarray:
        return self.gradients()[i].copy()

    def __call__(self, x, outside: str = "raise"):
        return self.evaluate(x, outside)

    def evaluate(self, x, outside: str = "raise"):
        x = np.asarray(x, float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        sid, bary = self.tri.locator().find(X)
        bad = sid < 0
        if bad.any() and outside == "raise":
            raise OutsideError(f"point {X[np.argmax(bad)]} is outside the triangulation")
        sid_ok = np.where(bad, 0, sid)
        vals = self.values[self.tri.simplexes[sid_ok]]  # (P, n+1[, m])
        out = np.einsum("pj,pj...->p...", np.nan_to_num(bary), vals)
        if bad.any():
            out[bad] = np.nan
        return out[0] if single else out

    def evaluate_in(self, i, x):
        """Affine extension of simplex ``i``'s piece evaluated at ``x``."""
        lam = self.tri.barycentric(i, x)
        vals = self.values[self.tri.simplexes[i]]
        if self.values.ndim == 1:
            return np.einsum("...j,...j->...", lam, vals)
        return np.einsum("...j,...js->...s", lam, vals)

    def to_dict(self) -> dict:
        return {"values": {str(k): (v.tolist() if np.ndim(v) else float(v)) for k, v in enumerate(self.values)}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class CpaScalarField(_Field):
    """Scalar CPA function given by its vertex values."""

    @classmethod
    def from_function(cls, tri: Triangulation, fn) -> "CpaScalarField":
        return cls(tri, np.asarray([fn(x) for x in tri.vertices], float))

    @classmethod
    def from_dict(cls, tri, d) -> "CpaScalarField":
        vals = d["values"]
        return cls(tri, [vals[str(k)] for k in range(tri.n_vertices)])


class CpaVectorField(_Field):
    """m-vector CPA function, values of shape (N, m)."""

    def __init__(self, tri, values):
        vals = np.asarray(values, float)
        if vals.ndim == 1:
            vals = vals[:, None]
        super().__init__(tri, vals)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_dict(cls, tri, d) -> "CpaVectorField":
        vals = d["values"]
        return cls(tri, [vals[str(k)] for k in range(tri.n_vertices)])


def gradient(field: _Field, i: int) -> np.ndarray:
    return field.gradient(i)


def evaluate(field: _Field, x):
    return field.evaluate(x)


def locate(tri: Triangulation, x, tol: float = BARY_TOL) -> np.ndarray:
    """All simplexes containing ``x``."""
    ids = tri.locator().find_all(x, tol)
    if len(ids) == 0:
        raise OutsideError(f"point {np.asarray(x)} is outside the triangulation")
    return ids


def restrict(tri: Triangulation, index_set) -> Triangulation:
    """Sub-triangulation made of the given simplexes.  Vertices are renumbered;
    ``parent_vertex_ids`` maps new ids to ids in ``tri``."""
    idx = np.unique(np.asarray(index_set, dtype=np.int64))
    if idx.size == 0:
        raise MeshError("cannot restrict to an empty simplex set")
    S = tri.simplexes[idx]
    used = np.unique(S)
    remap = np.full(tri.n_vertices, -1)
    remap[used] = np.arange(len(used))
    surfaces = {}
    for k, ids in tri.surfaces.items():
        keep = ids[remap[ids] >= 0]
        surfaces[k] = remap[keep]
    sub = Triangulation(tri.vertices[used], remap[S], surfaces=surfaces, domain=None,
                        parent_vertex_ids=used, check=False)
    sub.parent_simplex_ids = idx
    return sub


# ---------------------------------------------------------------------------
# sublevel sets


@dataclass
class SublevelRegion:
    r: float
    member_simplexes: np.ndarray
    partial_simplexes: np.ndarray
    connected: bool
    contains_origin: bool
    loops: list = field(default_factory=list)
    area: float = float("nan")
    tri: Triangulation | None = field(default=None, repr=False)
    values: np.ndarray | None = field(default=None, repr=False)

    @property
    def simplexes(self) -> np.ndarray:
        """Every simplex meeting the region."""
        return np.union1d(self.member_simplexes, self.partial_simplexes)

    @property
    def boundary_polyline(self) -> np.ndarray:
        """Longest level-crossing loop (n = 2)."""
        if not self.loops:
            return np.zeros((0, 2))
        return max(self.loops, key=len)

    def contains(self, X, strict: bool = False) -> np.ndarray:
        """Membership of points: inside a region simplex with V(x) <= r."""
        X = np.atleast_2d(np.asarray(X, float))
        tri = self.tri
        pid, sid, lam = tri.locator().barycentric_pairs(X)
        inside = lam.min(axis=1) >= -BARY_TOL
        mask = np.zeros(tri.n_simplexes, bool)
        mask[self.simplexes] = True
        inside &= mask[sid]
        v = np.einsum("pj,pj->p", lam, self.values[tri.simplexes[sid]])
        ok = inside & ((v < self.r) if strict else (v <= self.r * (1 + 1e-12)))
        out = np.zeros(len(X), bool)
        out[pid[ok]] = True
        return out

    def polylines_csv(self) -> str:
        return loops_to_csv(self.loops)


def loops_to_csv(loops) -> str:
    lines = ["x1,x2"]
    for k, L in enumerate(loops):
        if k:
            lines.append("nan,nan")
        for p in L:
            lines.append(f"{p[0]:.17g},{p[1]:.17g}")
        if len(L):
            lines.append(f"{L[0][0]:.17g},{L[0][1]:.17g}")
    return "\n".join(lines) + "\n"


def loops_from_csv(text: str) -> list[np.ndarray]:
    loops, cur = [], []
    for line in text.strip().splitlines()[1:]:
        a, b = line.split(",")
        if a.strip().lower() == "nan":
            if cur:
                loops.append(np.array(cur))
            cur = []
        else:
            cur.append((float(a), float(b)))
    if cur:
        loops.append(np.array(cur))
    return [L[:-1] if len(L) > 1 and np.all(L[0] == L[-1]) else L for L in loops]


def largest_certified_sublevel(V: CpaScalarField, exclude_boundary: bool = True,
                               boundary_ids=None, seeds=None,
                               level: float | None = None) -> SublevelRegion:
    """Largest sublevel set of ``V`` that stays off the triangulation boundary.

    ``r`` is the smallest boundary-vertex value, shrunk by a factor
    ``1 - 1e-6`` when ``exclude_boundary`` is set.  The returned region is the
    connected component of ``{V <= r}`` grown from the simplexes containing the
    origin, or from ``seeds`` (simplex ids) when given.  ``boundary_ids``
    overrides which vertices count as boundary; ``level`` caps ``r``.
    """
    tri = V.tri
    vals = V.values
    bnd = tri.boundary if boundary_ids is None else np.asarray(boundary_ids, dtype=np.int64)
    if len(bnd) == 0:
        raise EmptyRegionError("no boundary vertices to bound the level")
    r = float(vals[bnd].min())
    if exclude_boundary:
        r *= 1 - LEVEL_SHRINK
    if level is not None:
        r = min(r, float(level))
    if seeds is None:
        if tri.origin_id is not None:
            seeds = np.nonzero(np.any(tri.simplexes == tri.origin_id, axis=1))[0]
        else:
            try:
                seeds = locate(tri, np.zeros(tri.n))
            except OutsideError:
                raise MeshError("origin is not in the triangulation") from None
    seeds = np.asarray(seeds, dtype=np.int64)
    if not r > 0:
        raise EmptyRegionError(f"sublevel value r = {r:.3g} is not positive")
    return sublevel_component(V, r, seeds)


def sublevel_component(V: CpaScalarField, r: float, seeds) -> SublevelRegion:
    tri = V.tri
    vals = V.values
    S = tri.simplexes
    low = vals <= r
    touched = np.nonzero(low[S].any(axis=1))[0]
    if len(touched) == 0:
        raise EmptyRegionError("sublevel set is empty")
    # bipartite graph: touched simplexes <-> their low vertices
    rows, cols = np.nonzero(low[S[touched]])
    m = len(touched)
    nv = tri.n_vertices
    G = sp.coo_matrix((np.ones(len(rows)), (rows, m + S[touched][rows, cols])), shape=(m + nv, m + nv))
    ncomp, lab = connected_components(G, directed=False)
    pos = np.full(tri.n_simplexes, -1)
    pos[touched] = np.arange(m)
    seed_pos = pos[np.asarray(seeds)]
    seed_pos = seed_pos[seed_pos >= 0]
    if len(seed_pos) == 0:
        raise EmptyRegionError("sublevel set does not reach the seed simplexes")
    comp_ids = np.unique(lab[seed_pos])
    in_comp = np.isin(lab[:m], comp_ids)
    comp = touched[in_comp]
    n_touched_comp = len(np.unique(lab[:m]))
    full = low[S[comp]].all(axis=1)
    origin_in = False
    if tri.origin_id is not None:
        origin_in = bool(low[tri.origin_id] and np.any(S[comp] == tri.origin_id))
    else:
        try:
            origin_in = bool(np.isin(locate(tri, np.zeros(tri.n)), comp).any())
        except OutsideError:
            origin_in = False
    region = SublevelRegion(
        r=float(r),
        member_simplexes=comp[full],
        partial_simplexes=comp[~full],
        connected=(n_touched_comp == 1),
        contains_origin=origin_in,
        tri=tri,
        values=np.asarray(vals),
    )
    if tri.n == 2:
        region.area = clipped_area(tri, vals, comp, r)
        region.loops = level_loops(tri, vals, comp[~full], r)
    else:
        region.area = float(tri.volumes[comp[full]].sum())
    return region


def clipped_area(tri: Triangulation, vals: np.ndarray, idx: np.ndarray, r: float) -> float:
    """Area of ``{V <= r}`` inside the given triangles (V affine on each)."""
    S = tri.simplexes[idx]
    v = vals[S]
    A = tri.volumes[idx]
    below = v <= r
    k = below.sum(axis=1)
    frac = np.zeros(len(idx))
    frac[k == 3] = 1.0
    # one vertex below: small corner triangle
    one = np.nonzero(k == 1)[0]
    if len(one):
        a = np.argmax(below[one], axis=1)
        va = v[one, a]
        others = np.array([[j for j in range(3) if j != aa] for aa in a])
        vb = v[one[:, None], others]
        t = (r - va[:, None]) / (vb - va[:, None])
        frac[one] = t[:, 0] * t[:, 1]
    two = np.nonzero(k == 2)[0]
    if len(two):
        c = np.argmin(below[two], axis=1)
        vc = v[two, c]
        others = np.array([[j for j in range(3) if j != cc] for cc in c])
        vo = v[two[:, None], others]
        s = (vc[:, None] - r) / (vc[:, None] - vo)
        frac[two] = 1 - s[:, 0] * s[:, 1]
    return float(np.sum(frac * A))


def level_loops(tri: Triangulation, vals: np.ndarray, idx: np.ndarray, r: float) -> list[np.ndarray]:
    """Chain the level crossings ``V = r`` of the given triangles into loops."""
    S = tri.simplexes[idx]
    v = vals[S]
    below = v <= r
    segs = []
    for row, tri_ids in enumerate(S):
        cross = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            if below[row, a] != below[row, b]:
                ia, ib = tri_ids[a], tri_ids[b]
                key = (min(ia, ib), max(ia, ib))
                cross.append(key)
        if len(cross) == 2:
            segs.append(tuple(cross))
    if not segs:
        return []

    def point(key):
        ia, ib = key
        va, vb = vals[ia], vals[ib]
        t = (r - va) / (vb - va)
        return tri.vertices[ia] + t * (tri.vertices[ib] - tri.vertices[ia])

    adj: dict = {}
    for a, b in segs:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    seen = set()
    loops = []
    for start in adj:
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [k for k in adj[cur] if k != prev and k not in seen]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            seen.add(cur)
            loop.append(cur)
        P = np.array([point(k) for k in loop])
        keep = np.ones(len(P), bool)
        keep[1:] = np.any(P[1:] != P[:-1], axis=1)
        P = P[keep]
        if len(P) > 1 and np.all(P[0] == P[-1]):
            P = P[:-1]
        loops.append(P)
    loops.sort(key=len, reverse=True)
    return loops


def polygon_area_signed(P: np.ndarray) -> float:
    x, y = P[:, 0], P[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
