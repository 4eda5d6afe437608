"""Evaluating synthesized controllers and their min-norm refinements.

A :class:`Certificate` bundles what the closed-loop checks need: the
(possibly multi-stage) CPA controller, the piecewise V, the region and the
constants ``a, b1, b2, r``.  Stage pieces are ordered inner to outer; on a
shared boundary the outer piece wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import synth
from .cpa import CpaScalarField, CpaVectorField, OutsideError, SublevelRegion, sublevel_component
from .mesh import BARY_TOL
from .sdp import InfeasibleError, solve_qp


@dataclass(frozen=True)
class ControllerStage:
    u: CpaVectorField
    V: CpaScalarField | None = None
    region: SublevelRegion | None = None
    b2: float | None = None
    target_simplexes: np.ndarray | None = None

    def covers(self, X, strict: bool = False) -> np.ndarray:
        if self.region is not None:
            return self.region.contains(X, strict)
        sid, _ = self.u.tri.locator().find(np.atleast_2d(X))
        return sid >= 0


class CpaController:
    """CPA feedback; several stages give a piecewise (maybe discontinuous) law."""

    def __init__(self, stages: Sequence[ControllerStage] | CpaVectorField):
        if isinstance(stages, CpaVectorField):
            stages = [ControllerStage(stages)]
        self.stages = list(stages)
        if not self.stages:
            raise ValueError("controller needs at least one stage")

    @property
    def m(self) -> int:
        return self.stages[0].u.m

    def active_stage(self, X) -> np.ndarray:
        """Index of the stage used at every point, -1 outside all of them."""
        X = np.atleast_2d(np.asarray(X, float))
        out = np.full(len(X), -1)
        for k in range(len(self.stages) - 1, -1, -1):
            todo = out < 0
            if not todo.any():
                break
            hit = self.stages[k].covers(X[todo])
            idx = np.nonzero(todo)[0][hit]
            out[idx] = k
        return out

    def eval(self, x, outside: str = "raise") -> np.ndarray:
        x = np.asarray(x, float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        k = self.active_stage(X)
        if (k < 0).any() and outside == "raise":
            raise OutsideError(f"point {X[np.argmax(k < 0)]} is outside the certified region")
        U = np.full((len(X), self.m), np.nan)
        for s in np.unique(k[k >= 0]):
            sel = k == s
            U[sel] = np.asarray(self.stages[s].u.evaluate(X[sel], outside="nan")).reshape(-1, self.m)
        return U[0] if single else U

    __call__ = eval


@dataclass
class Certificate:
    """Controller, Lyapunov function and constants of a certified region."""

    controller: CpaController
    a: float
    b1: float
    b2: float
    r: float
    kind: str = "single_stage"
    area: float = float("nan")
    b3: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def stages(self) -> list[ControllerStage]:
        return self.controller.stages

    def contains(self, X, strict: bool = False) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        out = np.zeros(len(X), bool)
        for st in self.stages:
            out |= st.covers(X, strict)
        return out

    def V(self, X) -> np.ndarray:
        """Piecewise V of the active stage (NaN outside)."""
        X = np.atleast_2d(np.asarray(X, float))
        k = self.controller.active_stage(X)
        out = np.full(len(X), np.nan)
        for s in np.unique(k[k >= 0]):
            sel = k == s
            out[sel] = self.stages[s].V.evaluate(X[sel], outside="nan")
        return out

    def in_target(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        out = np.zeros(len(X), bool)
        st = self.stages[0]
        if st.target_simplexes is None:
            return out
        pid, sid, lam = st.V.tri.locator().barycentric_pairs(X)
        mask = np.zeros(st.V.tri.n_simplexes, bool)
        mask[st.target_simplexes] = True
        hit = (lam.min(axis=1) >= -BARY_TOL) & mask[sid]
        out[pid[hit]] = True
        return out

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        loops = [L for st in self.stages if st.region is not None for L in st.region.loops]
        if loops:
            P = np.vstack(loops)
        else:
            P = np.vstack([st.u.tri.vertices for st in self.stages])
        return P.min(axis=0), P.max(axis=0)

    def with_constants(self, **kw) -> "Certificate":
        d = dict(self.__dict__)
        d.update(kw)
        return Certificate(**d)

    @classmethod
    def from_stage(cls, res: "synth.StageResult") -> "Certificate":
        c = res.certified
        tgt = None
        if c.target_simplexes is not None:
            # map target simplexes of the full mesh into the region mesh
            tgt = _map_simplexes(c.tri, c.target_simplexes)
        st = ControllerStage(c.u, c.V, c.region, c.b2, tgt)
        return cls(CpaController([st]), c.a, c.b1, c.b2, c.r, kind=res.variant.kind,
                   area=c.area, b3=c.b3)

    @classmethod
    def from_multistage(cls, ms: "synth.MultiStageResult") -> "Certificate":
        return cls.from_stages(ms.stages, ms.levels, ms.constants[-1], ms.combined_area)

    @classmethod
    def from_stages(cls, results: Sequence["synth.StageResult"], levels: Sequence[float],
                    constants: dict, area: float = float("nan")) -> "Certificate":
        """Stages ordered inner to outer; ``levels[k]`` is the level at which
        stage k was stitched to stage k + 1."""
        if len(results) == 1:
            return cls.from_stage(results[0])
        stages = []
        for k, res in enumerate(results):
            c = res.certified
            region = c.region
            if k < len(results) - 1:
                # earlier stages are certified up to the stitch level only
                region = sublevel_component(c.V, levels[k], c.region.simplexes)
            stages.append(ControllerStage(c.u, c.V, region, c.b2))
        last = results[-1].certified
        return cls(CpaController(stages), constants["a"], constants["b1"], constants["b2"], last.r,
                   kind="multi_stage", area=area)


def _map_simplexes(work, parent_ids) -> np.ndarray:
    own = getattr(work, "parent_simplex_ids", None)
    if own is None:
        return np.asarray(parent_ids, np.int64)
    pos = {int(p): i for i, p in enumerate(own)}
    return np.array([pos[int(p)] for p in parent_ids if int(p) in pos], np.int64)


# ---------------------------------------------------------------------------
# offline min-norm polish


def min_norm_offline(model, tri, variant, vars: "synth.DecisionVariables", max_iters: int = 20,
                     encoding: str = "soc", weights: str = "scaled") -> "synth.DecisionVariables":
    """Shrink the sum of squared vertex inputs with b2 and a frozen, through the
    epigraph block ``[[-phi, U'], [U, -1]] <= 0``, until it stops improving."""
    if not vars.b2 > 0:
        raise ValueError("min-norm polish needs a certificate with b2 > 0")
    prob = synth.SynthesisProblem(model, tri, variant)
    y = vars
    stall = 0
    for _ in range(max_iters):
        res = synth.iterate(model, tri, variant, y, "input_norm_epigraph", problem=prob,
                            encoding=encoding, weights=weights)
        delta = res.objective_before - res.objective_after
        y = res.vars
        if res.flag == "solver_failure":
            break
        stall = stall + 1 if delta < synth.STALL_TOL else 0
        if stall >= synth.STALL_COUNT:
            break
    return y


# ---------------------------------------------------------------------------
# online QP


@dataclass
class OnlineQpConfig:
    """Pointwise QP data.  ``Hmat(x)`` (m, m) and ``hvec(x)`` (m,) default to
    the identity and zero, which gives the minimum-norm input."""

    V: CpaScalarField
    b2: float
    Hmat: Callable | None = None
    hvec: Callable | None = None
    target_simplexes: np.ndarray | None = None
    b3: float | None = None


class QpInfeasible(RuntimeError):
    """The decrease rows cannot be met at a point: the certificate is broken there."""


def qp_rows(cfg: OnlineQpConfig, model, x) -> tuple[np.ndarray, np.ndarray]:
    """Linear rows ``A u <= b``: the input polytope and one decrease row per
    simplex containing ``x``."""
    x = np.asarray(x, float)
    ids = cfg.V.tri.locator().find_all(x)
    if len(ids) == 0:
        raise OutsideError(f"point {x} is outside the triangulation")
    f = model.drift(x)[0]
    G = model.input_matrix(x)[0]
    grads = cfg.V.gradients()[ids]
    Vx = float(cfg.V.evaluate(x))
    rate = np.full(len(ids), cfg.b2)
    if cfg.target_simplexes is not None and cfg.b3 is not None:
        rate[np.isin(ids, cfg.target_simplexes)] = cfg.b3
    A = np.vstack([model.input_H, grads @ G])
    b = np.concatenate([model.input_h, -(grads @ f) - rate * Vx])
    return A, b


def online_qp(cfg: OnlineQpConfig, model, x) -> np.ndarray:
    """Solve ``min u'Hu + h'u`` over the input polytope and the decrease rows at x."""
    x = np.asarray(x, float)
    m = model.m
    Hm = np.eye(m) if cfg.Hmat is None else np.asarray(cfg.Hmat(x), float)
    hv = np.zeros(m) if cfg.hvec is None else np.asarray(cfg.hvec(x), float)
    A, b = qp_rows(cfg, model, x)
    if m == 1:
        return _scalar_qp(float(Hm[0, 0]), float(hv[0]), A[:, 0], b)
    try:
        return solve_qp(Hm, hv, (A, b))
    except InfeasibleError as exc:
        raise QpInfeasible(f"online QP infeasible at {x}") from exc


def _scalar_qp(H: float, h: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a u <= b is an interval; the minimizer is the clipped unconstrained one
    if not H > 0:
        raise ValueError("Hmat must be positive definite")
    lo, hi = -math.inf, math.inf
    for ak, bk in zip(a, b):
        if ak > 0:
            hi = min(hi, bk / ak)
        elif ak < 0:
            lo = max(lo, bk / ak)
        elif bk < 0:
            raise QpInfeasible("a decrease row has no input dependence and is violated")
    if lo > hi:
        raise QpInfeasible("online QP interval is empty")
    return np.array([min(max(-h / (2 * H), lo), hi)])


class OnlineQpController:
    """Online QP per stage of a certificate, with the same stage selection as
    the CPA controller."""

    def __init__(self, cert: Certificate, model, Hmat=None, hvec=None):
        self.cert = cert
        self.model = model
        self.cfgs = [OnlineQpConfig(st.V, cert.b2 if st.b2 is None else min(st.b2, cert.b2),
                                    Hmat, hvec, st.target_simplexes, cert.b3)
                     for st in cert.stages]

    @property
    def m(self) -> int:
        return self.model.m

    def eval(self, x, outside: str = "raise") -> np.ndarray:
        x = np.asarray(x, float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        k = self.cert.controller.active_stage(X)
        if (k < 0).any() and outside == "raise":
            raise OutsideError(f"point {X[np.argmax(k < 0)]} is outside the certified region")
        U = np.full((len(X), self.m), np.nan)
        for p in np.nonzero(k >= 0)[0]:
            U[p] = online_qp(self.cfgs[k[p]], self.model, X[p])
        return U[0] if single else U

    __call__ = eval
