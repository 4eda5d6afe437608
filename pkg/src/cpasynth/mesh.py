"""Simplicial meshes of boxes, polygons and 2-D annuli.

Boxes in any dimension are split into a tensor grid of cells and each cell
into n! Kuhn simplexes.  Graded 2-D meshes, general polygons and hollowed
regions go through a constrained Delaunay triangulation (``triangle``) that
is refined until every triangle honours the local size bound.

The size bound ``rho`` is a bound on the longest edge of every simplex.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEGENERACY_TOL = 1e-12
BARY_TOL = 1e-10
# target triangle area as a multiple of rho^2 for the Delaunay path; chosen so
# graded meshes have roughly the vertex density of a Kuhn grid with the same rho
CDT_AREA_FACTOR = 0.4
CDT_MIN_ANGLE = 28.0
CDT_SHRINK = 0.8
CDT_SEGMENT_FACTOR = 0.9


class MeshError(ValueError):
    pass


# ---------------------------------------------------------------------------
# size fields


@dataclass(frozen=True)
class SizeRegion:
    """A named region of the state space carrying a maximum edge length.

    ``kind`` is one of

    * ``"shell"``: ``rmin <= ||x||_p <= rmax`` with ``p = norm`` (2 or inf)
    * ``"box"``: ``lo <= x <= hi``
    * ``"boundary"``: points within ``width`` of the domain boundary
    * ``"callable"``: ``predicate(points) -> bool array``
    """

    name: str
    rho: float
    kind: str = "shell"
    norm: float = 2.0
    rmin: float = 0.0
    rmax: float = math.inf
    lo: tuple = ()
    hi: tuple = ()
    width: float = 0.0
    predicate: Callable | None = field(default=None, compare=False)

    def contains(self, pts: np.ndarray, domain: "Domain | None" = None) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.kind == "shell":
            r = np.linalg.norm(pts, ord=self.norm, axis=1)
            return (r >= self.rmin - 1e-12) & (r <= self.rmax + 1e-12)
        if self.kind == "box":
            lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
            return np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=1)
        if self.kind == "boundary":
            if domain is None:
                return np.zeros(len(pts), bool)
            return domain.boundary_distance(pts) <= self.width + 1e-12
        if self.kind == "callable":
            return np.asarray(self.predicate(pts), bool)
        raise MeshError(f"unknown size region kind {self.kind!r}")

    def with_rho(self, rho: float) -> "SizeRegion":
        d = dict(self.__dict__)
        d["rho"] = rho
        return SizeRegion(**d)

    def to_dict(self) -> dict:
        d = {"name": self.name, "rho": self.rho, "kind": self.kind}
        if self.kind == "shell":
            d.update(norm=self.norm, rmin=self.rmin, rmax=None if math.isinf(self.rmax) else self.rmax)
        elif self.kind == "box":
            d.update(lo=list(self.lo), hi=list(self.hi))
        elif self.kind == "boundary":
            d.update(width=self.width)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SizeRegion":
        kind = d.get("kind", "shell")
        kw = dict(name=d.get("name", kind), rho=float(d["rho"]), kind=kind)
        if kind == "shell":
            norm = d.get("norm", 2)
            kw.update(norm=math.inf if norm in ("inf", math.inf) else float(norm),
                      rmin=float(d.get("rmin", 0.0)),
                      rmax=math.inf if d.get("rmax") is None else float(d["rmax"]))
        elif kind == "box":
            kw.update(lo=tuple(d["lo"]), hi=tuple(d["hi"]))
        elif kind == "boundary":
            kw.update(width=float(d["width"]))
        else:
            raise MeshError(f"size region kind {kind!r} cannot be loaded from data")
        return cls(**kw)


@dataclass(frozen=True)
class SizeField:
    """Piecewise-constant maximum edge length: the smallest ``rho`` of all
    regions containing a point, ``default`` where none does."""

    default: float
    regions: tuple[SizeRegion, ...] = ()

    def __post_init__(self):
        if not self.default > 0 or not math.isfinite(self.default):
            raise MeshError(f"size field default rho must be positive, got {self.default}")
        for reg in self.regions:
            if not reg.rho > 0:
                raise MeshError(f"size region {reg.name!r} has nonpositive rho {reg.rho}")

    @classmethod
    def uniform(cls, rho: float) -> "SizeField":
        return cls(float(rho))

    @property
    def is_uniform(self) -> bool:
        return all(reg.rho == self.default for reg in self.regions)

    @property
    def rho_min(self) -> float:
        return min([self.default] + [r.rho for r in self.regions])

    def __call__(self, pts, domain: "Domain | None" = None) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        out = np.full(len(pts), self.default)
        for reg in self.regions:
            m = reg.contains(pts, domain)
            out[m] = np.minimum(out[m], reg.rho)
        return out

    def scaled(self, gamma: dict[str, float] | float) -> "SizeField":
        """Multiply every region's rho by its gamma (``gamma["default"]`` for the
        background)."""
        if not isinstance(gamma, dict):
            gamma = {"default": float(gamma)}
        g0 = gamma.get("default", 1.0)
        regs = tuple(r.with_rho(r.rho * gamma.get(r.name, g0)) for r in self.regions)
        return SizeField(self.default * g0, regs)

    def to_dict(self) -> dict:
        return {"default": self.default, "regions": [r.to_dict() for r in self.regions]}

    @classmethod
    def from_dict(cls, d) -> "SizeField":
        if isinstance(d, (int, float)):
            return cls.uniform(float(d))
        return cls(float(d["default"]), tuple(SizeRegion.from_dict(r) for r in d.get("regions", [])))


# ---------------------------------------------------------------------------
# domains and surfaces


@dataclass(frozen=True)
class Surface:
    """A constraint surface: an axis-aligned hyperplane ``x[axis] == value``
    (any n) or a 2-D polyline given by its points."""

    name: str
    axis: int | None = None
    value: float = 0.0
    points: tuple = ()
    closed: bool = False

    @classmethod
    def plane(cls, name: str, axis: int, value: float) -> "Surface":
        return cls(name=name, axis=axis, value=float(value))

    @classmethod
    def polyline(cls, name: str, points, closed: bool = False) -> "Surface":
        pts = tuple(tuple(map(float, p)) for p in np.asarray(points, float))
        return cls(name=name, points=pts, closed=closed)

    def segments(self, lo=None, hi=None) -> np.ndarray:
        """(k, 2, 2) array of segments (2-D only)."""
        if self.axis is not None:
            if lo is None:
                raise MeshError("plane surfaces need the box extent")
            other = 1 - self.axis
            a = np.zeros(2)
            b = np.zeros(2)
            a[self.axis] = b[self.axis] = self.value
            a[other], b[other] = lo[other], hi[other]
            return np.array([[a, b]])
        P = np.asarray(self.points, float)
        if self.closed:
            P = np.vstack([P, P[:1]])
        return np.stack([P[:-1], P[1:]], axis=1)

    def to_dict(self) -> dict:
        if self.axis is not None:
            return {"name": self.name, "axis": self.axis, "value": self.value}
        return {"name": self.name, "points": [list(p) for p in self.points], "closed": self.closed}

    @classmethod
    def from_dict(cls, d: dict) -> "Surface":
        if "axis" in d:
            return cls.plane(d["name"], int(d["axis"]), float(d["value"]))
        return cls.polyline(d["name"], d["points"], bool(d.get("closed", False)))


@dataclass(frozen=True)
class Domain:
    """What a triangulation covers: a box, or (2-D) a polygon with holes."""

    kind: str  # "box" | "polygon"
    lo: tuple = ()
    hi: tuple = ()
    outer: tuple = ()
    holes: tuple = ()
    surfaces: tuple[Surface, ...] = ()
    include_origin: bool = True
    method: str = "auto"

    @property
    def dim(self) -> int:
        return len(self.lo) if self.kind == "box" else 2

    def outer_loop(self) -> np.ndarray:
        if self.kind == "box":
            (x0, y0), (x1, y1) = self.lo, self.hi
            return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], float)
        return np.asarray(self.outer, float)

    def volume(self) -> float:
        if self.kind == "box":
            return float(np.prod(np.subtract(self.hi, self.lo)))
        return polygon_area(self.outer_loop()) - sum(polygon_area(np.asarray(h)) for h in self.holes)

    def boundary_distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.kind == "box":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            return np.min(np.minimum(pts - lo, hi - pts), axis=1).clip(min=0)
        loops = [self.outer_loop()] + [np.asarray(h, float) for h in self.holes]
        d = np.full(len(pts), np.inf)
        for L in loops:
            segs = np.stack([L, np.roll(L, -1, axis=0)], axis=1)
            d = np.minimum(d, point_segment_distance(pts, segs).min(axis=1))
        return d

    def contains(self, pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.kind == "box":
            return np.all((pts >= np.asarray(self.lo) - tol) & (pts <= np.asarray(self.hi) + tol), axis=1)
        inside = points_in_polygon(pts, self.outer_loop())
        for h in self.holes:
            inside &= ~points_in_polygon(pts, np.asarray(h, float))
        inside |= self.boundary_distance(pts) <= tol
        return inside

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "surfaces": [s.to_dict() for s in self.surfaces],
             "include_origin": self.include_origin, "method": self.method}
        if self.kind == "box":
            d.update(lo=list(self.lo), hi=list(self.hi))
        else:
            d.update(outer=[list(p) for p in self.outer], holes=[[list(p) for p in h] for h in self.holes])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        surfaces = tuple(Surface.from_dict(s) for s in d.get("surfaces", []))
        common = dict(surfaces=surfaces, include_origin=d.get("include_origin", True),
                      method=d.get("method", "auto"))
        if d["kind"] == "box":
            return cls("box", lo=tuple(d["lo"]), hi=tuple(d["hi"]), **common)
        return cls("polygon", outer=_as_loop(d["outer"]),
                   holes=tuple(_as_loop(h) for h in d.get("holes", [])), **common)


def _as_loop(pts) -> tuple:
    return tuple(tuple(map(float, p)) for p in np.asarray(pts, float))


# ---------------------------------------------------------------------------
# triangulation


@dataclass(frozen=True)
class SimplexGeometry:
    X: np.ndarray
    X_inv: np.ndarray
    c: np.ndarray


def error_constants(E: np.ndarray) -> np.ndarray:
    """c_{i,j} for edge vectors E[..., j-1, :] = x_j - x_0; returns (..., n+1)."""
    n = E.shape[-1]
    lens = np.linalg.norm(E, axis=-1)
    longest = lens.max(axis=-1, keepdims=True)
    c = 0.5 * n * lens * (longest + lens)
    zero = np.zeros(c.shape[:-1] + (1,))
    return np.concatenate([zero, c], axis=-1)


class Triangulation:
    """Vertices, simplexes (anchor in column 0), boundary and surface tags.

    Per-simplex geometry (edge matrices, inverses, error constants, bounding
    boxes) is computed once at construction.  Instances are treated as
    immutable.
    """

    def __init__(self, vertices, simplexes, surfaces: dict | None = None,
                 domain: Domain | None = None, boundary=None, parent_vertex_ids=None,
                 check: bool = True):
        V = np.array(vertices, dtype=float)
        S = np.array(simplexes, dtype=np.int64)
        if V.ndim != 2 or S.ndim != 2 or S.shape[1] != V.shape[1] + 1:
            raise MeshError("simplexes must have n+1 vertex ids for n-dimensional vertices")
        if not np.all(np.isfinite(V)):
            raise MeshError("vertex coordinates must be finite")
        if len(S) == 0:
            raise MeshError("triangulation has no simplexes")
        if S.min() < 0 or S.max() >= len(V):
            raise MeshError("simplex refers to a missing vertex")
        self.vertices = V
        self.n = V.shape[1]
        self.simplexes = _orient_anchor(V, S)
        self.domain = domain
        self.parent_vertex_ids = None if parent_vertex_ids is None else np.asarray(parent_vertex_ids)
        self._compute_geometry(check)
        self.boundary = np.unique(boundary) if boundary is not None else boundary_vertices(self.simplexes)
        self.surfaces = {k: np.unique(np.asarray(v, dtype=np.int64)) for k, v in (surfaces or {}).items()}
        for arr in (self.vertices, self.simplexes, self.X, self.X_inv, self.c):
            arr.setflags(write=False)
        origin = np.nonzero(np.all(np.abs(V) <= 1e-14, axis=1))[0]
        self.origin_id = int(origin[0]) if len(origin) else None
        self._locator = None

    def _compute_geometry(self, check: bool):
        P = self.vertices[self.simplexes]
        E = P[:, 1:, :] - P[:, :1, :]
        det = np.linalg.det(E)
        longest = np.max(np.linalg.norm(P[:, :, None, :] - P[:, None, :, :], axis=-1), axis=(1, 2))
        bad = np.abs(det) < DEGENERACY_TOL * longest ** self.n
        if check and np.any(bad):
            i = int(np.nonzero(bad)[0][0])
            raise MeshError(f"simplex {i} is degenerate (|det X| = {abs(det[i]):.3g})")
        self.X = E
        self.X_inv = np.linalg.inv(E)
        self.c = error_constants(E)
        self.det = det
        self.longest_edge = longest
        self.bbox_lo = P.min(axis=1)
        self.bbox_hi = P.max(axis=1)
        self.volumes = np.abs(det) / math.factorial(self.n)

    # -- basic queries -------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_simplexes(self) -> int:
        return len(self.simplexes)

    def geometry(self, i: int) -> SimplexGeometry:
        return SimplexGeometry(self.X[i].copy(), self.X_inv[i].copy(), self.c[i].copy())

    def volume(self) -> float:
        return float(self.volumes.sum())

    def surface(self, name: str) -> np.ndarray:
        if name not in self.surfaces:
            raise MeshError(f"triangulation has no constraint surface {name!r}")
        return self.surfaces[name]

    def centroids(self) -> np.ndarray:
        return self.vertices[self.simplexes].mean(axis=1)

    def faces(self) -> np.ndarray:
        """All (simplex, local vertex omitted) facets as sorted vertex-id rows,
        shape (m*(n+1), n)."""
        return _facets(self.simplexes)

    def edges(self) -> np.ndarray:
        pairs = list(itertools.combinations(range(self.n + 1), 2))
        E = np.concatenate([self.simplexes[:, [a, b]] for a, b in pairs])
        E.sort(axis=1)
        return np.unique(E, axis=0)

    def locator(self) -> "SimplexLocator":
        if self._locator is None:
            self._locator = SimplexLocator(self)
        return self._locator

    def barycentric(self, i, x) -> np.ndarray:
        i = np.asarray(i)
        x = np.atleast_2d(x)
        x0 = self.vertices[self.simplexes[i, 0]]
        lam = np.einsum("...k,...kj->...j", x - x0, self.X_inv[i])
        return np.concatenate([1 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)

    # -- io ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "simplexes": self.simplexes.tolist(),
            "boundary": self.boundary.tolist(),
            "surfaces": {k: v.tolist() for k, v in self.surfaces.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Triangulation":
        return cls(d["vertices"], d["simplexes"], surfaces=d.get("surfaces", {}),
                   boundary=d.get("boundary"))

    @classmethod
    def from_json(cls, text: str) -> "Triangulation":
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return f"Triangulation(n={self.n}, vertices={self.n_vertices}, simplexes={self.n_simplexes})"


def _orient_anchor(V: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Put the anchor vertex first: the origin if present, else the
    lexicographically smallest vertex.  Remaining vertices keep their order."""
    P = V[S]  # (m, n+1, n)
    is_origin = np.all(P == 0.0, axis=2)
    keys = np.moveaxis(P, -1, 0)[::-1]  # last key (first coordinate) is primary
    anchor = np.lexsort(keys, axis=-1)[:, 0]
    has_origin = is_origin.any(axis=1)
    anchor[has_origin] = np.argmax(is_origin[has_origin], axis=1)
    rows = np.arange(len(S))
    first = S[rows, anchor].copy()
    out = np.empty_like(S)
    out[:, 0] = first
    mask = np.ones(S.shape, bool)
    mask[rows, anchor] = False
    out[:, 1:] = S[mask].reshape(len(S), -1)
    return out


def _facets(S: np.ndarray) -> np.ndarray:
    k = S.shape[1]
    F = np.concatenate([np.delete(S, j, axis=1) for j in range(k)])
    F.sort(axis=1)
    return F


def boundary_facets(S: np.ndarray) -> np.ndarray:
    """Facets owned by exactly one simplex."""
    F = _facets(S)
    uniq, counts = np.unique(F, axis=0, return_counts=True)
    return uniq[counts == 1]


def boundary_vertices(S: np.ndarray) -> np.ndarray:
    return np.unique(boundary_facets(S))


# ---------------------------------------------------------------------------
# point location


class SimplexLocator:
    """Bucket grid over simplex bounding boxes for batched point location."""

    def __init__(self, tri: Triangulation, cells_per_axis: int | None = None):
        self.tri = tri
        n = tri.n
        lo = tri.vertices.min(axis=0)
        hi = tri.vertices.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        if cells_per_axis is None:
            cells_per_axis = max(1, int(round((tri.n_simplexes / 2.0) ** (1.0 / n))))
        self.k = cells_per_axis
        self.lo = lo - 1e-9 * span
        self.h = span * (1 + 2e-9) / self.k
        a = np.floor((tri.bbox_lo - 1e-10 - self.lo) / self.h).astype(int).clip(0, self.k - 1)
        b = np.floor((tri.bbox_hi + 1e-10 - self.lo) / self.h).astype(int).clip(0, self.k - 1)
        cells, owners = [], []
        for i in range(tri.n_simplexes):
            rng = [np.arange(a[i, d], b[i, d] + 1) for d in range(n)]
            grid = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, n)
            cells.append(np.ravel_multi_index(grid.T, (self.k,) * n))
            owners.append(np.full(len(grid), i))
        cells = np.concatenate(cells)
        owners = np.concatenate(owners)
        order = np.argsort(cells, kind="stable")
        self.owners = owners[order]
        self.ptr = np.searchsorted(cells[order], np.arange(self.k ** n + 1))

    def _candidates(self, X: np.ndarray):
        finite = np.all(np.isfinite(X), axis=1)
        idx = np.floor((np.where(finite[:, None], X, self.lo) - self.lo) / self.h).astype(int)
        outside = np.any((idx < 0) | (idx >= self.k), axis=1) | ~finite
        idx = idx.clip(0, self.k - 1)
        cell = np.ravel_multi_index(idx.T, (self.k,) * self.tri.n)
        start, stop = self.ptr[cell], self.ptr[cell + 1]
        counts = np.where(outside, 0, stop - start)
        pid = np.repeat(np.arange(len(X)), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        sid = self.owners[np.repeat(start, counts) + offs]
        return pid, sid

    def barycentric_pairs(self, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, float))
        pid, sid = self._candidates(X)
        lam = self.tri.barycentric(sid, X[pid])
        return pid, sid, lam

    def find(self, X: np.ndarray, tol: float = BARY_TOL):
        """For each point one containing simplex (the one with the largest
        minimum barycentric coordinate) and its barycentric coordinates;
        -1 where the point lies outside."""
        X = np.atleast_2d(np.asarray(X, float))
        pid, sid, lam = self.barycentric_pairs(X)
        score = lam.min(axis=1)
        keep = score >= -tol
        pid, sid, lam, score = pid[keep], sid[keep], lam[keep], score[keep]
        out = np.full(len(X), -1)
        bary = np.full((len(X), self.tri.n + 1), np.nan)
        if len(pid):
            order = np.lexsort((-score, pid))
            pid, sid, lam = pid[order], sid[order], lam[order]
            first = np.ones(len(pid), bool)
            first[1:] = pid[1:] != pid[:-1]
            out[pid[first]] = sid[first]
            bary[pid[first]] = lam[first]
        return out, bary

    def find_all(self, x, tol: float = BARY_TOL) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        pid, sid, lam = self.barycentric_pairs(x)
        return np.unique(sid[lam.min(axis=1) >= -tol])


# ---------------------------------------------------------------------------
# box meshing (Kuhn)


def _axis_breaks(lo, hi, pts, h):
    pts = sorted(set([lo, hi] + [p for p in pts if lo < p < hi]))
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        k = max(1, int(math.ceil((b - a) / h - 1e-9)))
        out.extend(a + (b - a) * np.arange(1, k + 1) / k)
    out[-1] = hi
    return np.array(out)


def kuhn_grid(breaks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and Kuhn simplexes of the tensor grid with the given axis
    breakpoints."""
    n = len(breaks)
    shape = tuple(len(b) for b in breaks)
    mesh = np.meshgrid(*breaks, indexing="ij")
    verts = np.stack([m.ravel() for m in mesh], axis=1)
    cells = np.stack(np.meshgrid(*[np.arange(s - 1) for s in shape], indexing="ij"), axis=-1).reshape(-1, n)
    simplexes = []
    for perm in itertools.permutations(range(n)):
        cur = cells.copy()
        ids = [np.ravel_multi_index(cur.T, shape)]
        for ax in perm:
            cur = cur.copy()
            cur[:, ax] += 1
            ids.append(np.ravel_multi_index(cur.T, shape))
        simplexes.append(np.stack(ids, axis=1))
    return verts, np.concatenate(simplexes)


def _check_box(lo, hi):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    if lo.shape != hi.shape or lo.ndim != 1:
        raise MeshError("box bounds must be two vectors of equal length")
    if np.any(hi - lo <= 0):
        raise MeshError("degenerate box: zero or negative width along some axis")
    return lo, hi


def _check_surfaces_in_box(surfaces, lo, hi):
    for s in surfaces:
        if s.axis is not None:
            if not 0 <= s.axis < len(lo):
                raise MeshError(f"surface {s.name!r} refers to a missing axis")
            if not lo[s.axis] <= s.value <= hi[s.axis]:
                raise MeshError(f"surface {s.name!r} lies outside the box")
        else:
            P = np.asarray(s.points, float)
            if len(lo) != 2 or P.ndim != 2 or P.shape[1] != 2:
                raise MeshError("polyline surfaces are supported in 2-D only")
            if np.any(P < lo - 1e-12) or np.any(P > hi + 1e-12):
                raise MeshError(f"surface {s.name!r} extends outside the box")


def triangulate_box(lo, hi, size: SizeField | float, surfaces: Sequence[Surface] = (),
                    include_origin: bool = True, method: str = "auto") -> Triangulation:
    """Triangulate the box ``[lo, hi]``.

    ``method`` is ``"kuhn"`` (tensor grid, any n), ``"cdt"`` (2-D constrained
    Delaunay) or ``"auto"``: Kuhn unless the problem is 2-D and needs grading
    or non axis-aligned surfaces.
    """
    lo, hi = _check_box(lo, hi)
    size = size if isinstance(size, SizeField) else SizeField.uniform(size)
    surfaces = tuple(surfaces)
    _check_surfaces_in_box(surfaces, lo, hi)
    domain = Domain("box", lo=tuple(lo), hi=tuple(hi), surfaces=surfaces,
                    include_origin=include_origin, method=method)
    return build(domain, size)


def build(domain: Domain, size: SizeField) -> Triangulation:
    """(Re)generate a triangulation of ``domain`` honouring ``size``."""
    method = domain.method
    if domain.kind == "polygon":
        if method == "kuhn":
            raise MeshError("Kuhn meshing needs a box domain")
        return _build_cdt(domain, size)
    n = domain.dim
    planar = all(s.axis is not None for s in domain.surfaces)
    if method == "auto":
        method = "kuhn" if (n != 2 or (size.is_uniform and planar)) else "cdt"
    if method == "cdt":
        if n != 2:
            raise MeshError("constrained Delaunay meshing is 2-D only")
        return _build_cdt(domain, size)
    if not planar:
        raise MeshError("Kuhn meshing honours axis-aligned plane surfaces only")
    return _build_kuhn(domain, size)


def _build_kuhn(domain: Domain, size: SizeField) -> Triangulation:
    lo, hi = np.asarray(domain.lo), np.asarray(domain.hi)
    n = len(lo)
    # a tensor grid cannot grade locally; use the finest size everywhere
    h = size.rho_min / math.sqrt(n)
    breaks = []
    for k in range(n):
        pts = [s.value for s in domain.surfaces if s.axis == k]
        if domain.include_origin and lo[k] < 0 < hi[k]:
            pts.append(0.0)
        breaks.append(_axis_breaks(lo[k], hi[k], pts, h))
    verts, simp = kuhn_grid(breaks)
    verts[np.abs(verts) < 1e-15] = 0.0
    surfaces = {}
    for s in domain.surfaces:
        surfaces[s.name] = np.nonzero(np.abs(verts[:, s.axis] - s.value) <= 1e-12)[0]
    on_box = np.any((np.abs(verts - lo) <= 1e-12) | (np.abs(verts - hi) <= 1e-12), axis=1)
    surfaces["outer"] = np.nonzero(on_box)[0]
    return Triangulation(verts, simp, surfaces=surfaces, domain=domain)


# ---------------------------------------------------------------------------
# polygons and annuli (2-D, constrained Delaunay)


def polygon_area(P: np.ndarray) -> float:
    """Unsigned shoelace area of a closed polygon given without repeated end point."""
    P = np.asarray(P, float)
    x, y = P[:, 0], P[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def points_in_polygon(pts: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Even-odd ray casting test."""
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0:1], pts[:, 1:2]
    x0, y0 = P[:, 0], P[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    cond = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return (np.count_nonzero(cond & (x < xint), axis=1) % 2) == 1


def point_segment_distance(pts: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Distance of every point to every segment, shape (len(pts), len(segs))."""
    a = segs[:, 0][None]
    d = (segs[:, 1] - segs[:, 0])[None]
    p = pts[:, None, :]
    dd = np.einsum("...k,...k->...", d, d)
    t = np.clip(np.einsum("...k,...k->...", p - a, d) / np.where(dd > 0, dd, 1.0), 0, 1)
    return np.linalg.norm(p - a - t[..., None] * d, axis=-1)


def _validate_loop(P, what: str):
    from shapely.geometry import Polygon

    P = np.asarray(P, float)
    if P.ndim != 2 or P.shape[1] != 2 or len(P) < 3:
        raise MeshError(f"{what} must be a closed 2-D polyline with at least 3 points")
    poly = Polygon(P)
    if not poly.is_valid or poly.area <= 0:
        raise MeshError(f"{what} is not a simple polygon")
    return poly


def _dedupe_loop(P: np.ndarray, tol: float = 0.0) -> np.ndarray:
    P = np.asarray(P, float)
    if len(P) > 1 and np.linalg.norm(P[0] - P[-1]) <= tol:
        P = P[:-1]
    keep = np.ones(len(P), bool)
    last = P[0]
    for i in range(1, len(P)):
        if np.linalg.norm(P[i] - last) <= tol:
            keep[i] = False
        else:
            last = P[i]
    return P[keep]


def triangulate_polygon(outer, size: SizeField | float, holes: Sequence = (),
                        surfaces: Sequence[Surface] = (), include_origin: bool = True) -> Triangulation:
    size = size if isinstance(size, SizeField) else SizeField.uniform(size)
    outer = _dedupe_loop(outer)
    opoly = _validate_loop(outer, "outer polyline")
    hs = []
    for k, h in enumerate(holes):
        h = _dedupe_loop(h)
        hpoly = _validate_loop(h, f"hole {k}")
        if not opoly.contains(hpoly) or opoly.exterior.distance(hpoly) <= 0:
            raise MeshError(f"hole {k} is not strictly inside the outer polyline")
        if hpoly.exterior.intersects(opoly.exterior):
            raise MeshError(f"hole {k} intersects the outer polyline")
        hs.append(_as_loop(h))
    for s in surfaces:
        if s.axis is not None:
            raise MeshError("polygon domains take polyline surfaces only")
    domain = Domain("polygon", outer=_as_loop(outer), holes=tuple(hs), surfaces=tuple(surfaces),
                    include_origin=include_origin, method="cdt")
    return build(domain, size)


def triangulate_annulus(outer, inner, size: SizeField | float,
                        surfaces: Sequence[Surface] = ()) -> Triangulation:
    """Mesh the region between two nested simple polygons.  Vertices of the
    inner loop are tagged ``"inner"``, of the outer loop ``"outer"``."""
    return triangulate_polygon(outer, size, holes=[inner], surfaces=surfaces, include_origin=False)


def _subdivide_loop(P: np.ndarray, size: SizeField, domain: Domain, closed: bool = True) -> np.ndarray:
    Q = np.vstack([P, P[:1]]) if closed else P
    out = []
    for a, b in zip(Q[:-1], Q[1:]):
        L = np.linalg.norm(b - a)
        t = np.linspace(0, 1, 9)[:, None]
        rho = size(a + t * (b - a), domain).min()
        k = max(1, int(math.ceil(L / (CDT_SEGMENT_FACTOR * rho) - 1e-9)))
        out.append(a + (b - a) * (np.arange(k)[:, None] / k))
    if not closed:
        out.append(Q[-1:])
    return np.vstack(out)


def _build_cdt(domain: Domain, size: SizeField) -> Triangulation:
    import triangle as tr
    from shapely.geometry import Polygon

    loops = [("outer", np.asarray(domain.outer_loop(), float), True)]
    for k, h in enumerate(domain.holes):
        loops.append(("inner" if len(domain.holes) == 1 else f"inner{k}", np.asarray(h, float), True))
    lo, hi = None, None
    if domain.kind == "box":
        lo, hi = np.asarray(domain.lo), np.asarray(domain.hi)
    for s in domain.surfaces:
        for seg in s.segments(lo, hi) if s.axis is not None else [np.asarray(s.points, float)]:
            loops.append((s.name, np.asarray(seg, float), s.closed))

    verts, segs, marks = [], [], []
    names = []
    base = 0
    for mark, (name, P, closed) in enumerate(loops, start=2):
        names.append(name)
        Q = _subdivide_loop(P, size, domain, closed)
        k = len(Q)
        verts.append(Q)
        idx = np.arange(base, base + k)
        nxt = np.roll(idx, -1) if closed else idx[1:]
        cur = idx if closed else idx[:-1]
        segs.append(np.stack([cur, nxt], axis=1))
        marks.append(np.full(len(cur), mark))
        base += k
    if domain.include_origin and domain.contains(np.zeros((1, 2)))[0] and \
            domain.boundary_distance(np.zeros((1, 2)))[0] > 0:
        verts.append(np.zeros((1, 2)))
        base += 1
    V = np.vstack(verts + [_lattice_seeds(domain, size)])
    # merge coincident input points (surfaces meeting boundaries) so triangle
    # sees each location once
    V, inv = _merge_points(V)
    S = inv[np.vstack(segs)]
    M = np.concatenate(marks)
    ok = S[:, 0] != S[:, 1]
    S, M = S[ok], M[ok]
    data = {"vertices": V, "segments": S, "segment_markers": M[:, None]}
    if domain.holes:
        data["holes"] = np.array([Polygon(np.asarray(h)).representative_point().coords[0] for h in domain.holes])
    out = tr.triangulate(data, f"pq{CDT_MIN_ANGLE}Q")
    for _ in range(100):
        P = out["vertices"][out["triangles"]]
        cen = P.mean(axis=1)
        rho = np.minimum(size(cen, domain), size(P.reshape(-1, 2), domain).reshape(-1, 3).min(axis=1))
        edges = np.linalg.norm(P - np.roll(P, -1, axis=1), axis=2).max(axis=1)
        bad = edges > rho * (1 - 1e-9)
        if not bad.any():
            break
        e1, e2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
        area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        out["triangle_max_area"] = np.where(bad, CDT_SHRINK * area, -1.0)
        out = tr.triangulate(out, f"rpq{CDT_MIN_ANGLE}aQ")
    verts = out["vertices"]
    tris = out["triangles"]
    verts[np.abs(verts) < 1e-15] = 0.0
    surfaces: dict[str, list] = {}
    seg_out = out["segments"]
    mk = out["segment_markers"].ravel()
    for mark, name in enumerate(names, start=2):
        ids = np.unique(seg_out[mk == mark])
        surfaces.setdefault(name, []).append(ids)
    surfaces = {k: np.unique(np.concatenate(v)) for k, v in surfaces.items()}
    tri = Triangulation(verts, tris, surfaces=surfaces, domain=domain)
    viol = tri.longest_edge > _local_rho(tri, size, domain) * (1 + 1e-9)
    if viol.any():
        raise MeshError(f"mesh refinement did not reach the size bound on {int(viol.sum())} triangles")
    return tri


def _lattice_seeds(domain: Domain, size: SizeField) -> np.ndarray:
    """Square-lattice interior points with spacing just under rho/sqrt(2) for
    each distinct rho, kept where that rho is the local size.  A Delaunay
    mesh of such a lattice is a Kuhn-like pattern whose longest edges meet the
    bound; the refinement loop only has to fix the seams between levels."""
    loop = domain.outer_loop()
    lo, hi = loop.min(axis=0), loop.max(axis=0)
    segs = [np.zeros((0, 2, 2))]
    for sf in domain.surfaces:
        segs.append(sf.segments(domain.lo or None, domain.hi or None))
    segs = np.concatenate(segs)
    out = []
    for rho in sorted({size.default, *[r.rho for r in size.regions]}):
        h = rho / math.sqrt(2) * (1 - 1e-6)
        ax = [np.arange(math.floor(lo[k] / h), math.ceil(hi[k] / h) + 1) * h for k in range(2)]
        G = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 2)
        G = G[domain.contains(G, tol=-1e-12)]
        if not len(G):
            continue
        # the whole neighbourhood must carry this size so seams stay loose
        ring = h * np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1], [1, -1], [-1, 1]])
        local = size((G[:, None, :] + ring[None]).reshape(-1, 2), domain).reshape(len(G), -1)
        keep = np.all(np.abs(local - rho) <= 1e-12 * rho, axis=1)
        G = G[keep]
        G = G[domain.boundary_distance(G) > 0.5 * h]
        if len(G) and len(segs):
            G = G[point_segment_distance(G, segs).min(axis=1) > 0.5 * h]
        out.append(G)
    return np.vstack(out) if out else np.zeros((0, 2))


def _merge_points(V: np.ndarray, tol: float = 1e-12):
    key = np.round(V / tol).astype(np.int64) if tol > 0 else V
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    return V[first], inv.ravel()


def _local_rho(tri: Triangulation, size: SizeField, domain: Domain | None) -> np.ndarray:
    P = tri.vertices[tri.simplexes]
    per_vertex = size(tri.vertices, domain)[tri.simplexes].min(axis=1)
    return np.minimum(per_vertex, size(P.mean(axis=1), domain))


def local_rho(tri: Triangulation, size: SizeField) -> np.ndarray:
    """Size bound applying to each simplex (smallest over vertices and centroid)."""
    return _local_rho(tri, size, tri.domain)


def refine(tri: Triangulation, size: SizeField) -> Triangulation:
    """Regenerate the mesh of the same set and surfaces under a new size field."""
    if not isinstance(size, SizeField):
        size = SizeField.uniform(size)
    if tri.domain is None:
        raise MeshError("triangulation has no domain description to regenerate from")
    return build(tri.domain, size)


def simplex_geometry(tri: Triangulation, i: int) -> SimplexGeometry:
    return tri.geometry(i)


def kuhn_vertex_estimate(regions: Sequence[tuple[float, float]]) -> float:
    """Vertex-count estimate 2*area/rho^2 summed over (area, rho) pairs."""
    return float(sum(2.0 * a / r ** 2 for a, r in regions))
