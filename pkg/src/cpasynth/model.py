"""Control-affine plants with polytopic input sets and Hessian bounds.

A model supplies vectorized ``f(X) -> (P, n)`` and ``G(X) -> (P, n, m)`` and
interval bound providers evaluated on axis-aligned boxes ``[lo, hi]`` (one box
per row).  The synthesis code calls them on simplex bounding boxes, which
contain the simplexes, so the bounds are valid on the simplexes themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog


class ModelError(ValueError):
    pass


def _zero_bound(lo, hi):
    return np.zeros(np.atleast_2d(lo).shape[0])


@dataclass(frozen=True)
class SystemModel:
    """``xdot = f(x) + G(x) u`` with ``H u <= h`` and a state box.

    Bound providers take arrays ``lo, hi`` of shape (M, n) and return

    * ``hessian_f_bound``: (M,) bounds on ``max_{p,q,r} |d2 f_p / dx_q dx_r|``
    * ``hessian_G_bound``: (M, m) bounds on ``max_{p,q,r} |d2 G_ps / dx_q dx_r|``
    * ``eta_bound``: (M,) bounds on ``max_{p,q,r} sum_s |dG_ps/dx_q| + |dG_ps/dx_r|``
    """

    name: str
    n: int
    m: int
    f: Callable
    G: Callable
    input_H: np.ndarray
    input_h: np.ndarray
    state_lo: np.ndarray
    state_hi: np.ndarray
    hessian_f_bound: Callable = _zero_bound
    hessian_G_bound: Callable | None = None
    eta_bound: Callable = _zero_bound
    constant_G: bool = False
    A: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.input_H, float))
        h = np.asarray(self.input_h, float).ravel()
        if H.shape != (len(h), self.m):
            raise ModelError("input polytope H must be p x m with p = len(h)")
        object.__setattr__(self, "input_H", H)
        object.__setattr__(self, "input_h", h)
        object.__setattr__(self, "state_lo", np.asarray(self.state_lo, float))
        object.__setattr__(self, "state_hi", np.asarray(self.state_hi, float))

    # -- dynamics ------------------------------------------------------------
    def drift(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        return np.asarray(self.f(X), float).reshape(len(X), self.n)

    def input_matrix(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        return np.asarray(self.G(X), float).reshape(len(X), self.n, self.m)

    def rhs(self, X, U) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        U = np.asarray(U, float).reshape(len(X), self.m)
        return self.drift(X) + np.einsum("pnm,pm->pn", self.input_matrix(X), U)

    def admissible(self, U, tol: float = 0.0) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, float))
        return np.all(U @ self.input_H.T <= self.input_h + tol, axis=1)

    def in_state_box(self, X, tol: float = 0.0) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.all((X >= self.state_lo - tol) & (X <= self.state_hi + tol), axis=1)

    # -- linearization ---------------------------------------------------------
    def linearize(self, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
        if self.A is not None:
            A = np.asarray(self.A, float)
        else:
            A = np.zeros((self.n, self.n))
            for k in range(self.n):
                e = np.zeros(self.n)
                e[k] = eps
                A[:, k] = (self.drift(e)[0] - self.drift(-e)[0]) / (2 * eps)
        B = self.input_matrix(np.zeros(self.n))[0]
        return A, B


# ---------------------------------------------------------------------------
# bounds


def input_projection_bound(model: SystemModel, s: int) -> float:
    """max over the input polytope of ``|u_s|`` by two linear programs."""
    H, h = model.input_H, model.input_h
    best = 0.0
    for sign in (1.0, -1.0):
        c = np.zeros(model.m)
        c[s] = -sign
        res = linprog(c, A_ub=H, b_ub=h, bounds=[(None, None)] * model.m, method="highs")
        if res.status == 2:
            raise ModelError("input polytope is empty")
        if res.status == 3:
            raise ModelError("input polytope is unbounded")
        if res.status != 0:
            raise ModelError(f"projection LP failed: {res.message}")
        best = max(best, abs(-res.fun))
    return float(best)


def input_projection_bounds(model: SystemModel) -> np.ndarray:
    return np.array([input_projection_bound(model, s) for s in range(model.m)])


def mu_bounds(model: SystemModel, lo, hi) -> np.ndarray:
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    mu = np.asarray(model.hessian_f_bound(lo, hi), float).reshape(len(lo))
    if model.hessian_G_bound is not None:
        hg = np.asarray(model.hessian_G_bound(lo, hi), float).reshape(len(lo), model.m)
        mu = mu + hg @ input_projection_bounds(model)
    return mu


def eta_bounds(model: SystemModel, lo, hi) -> np.ndarray:
    lo = np.atleast_2d(lo)
    if model.constant_G:
        return np.zeros(len(lo))
    return np.asarray(model.eta_bound(lo, np.atleast_2d(hi)), float).reshape(len(lo))


def mu(model: SystemModel, tri, i: int) -> float:
    return float(mu_bounds(model, tri.bbox_lo[i:i + 1], tri.bbox_hi[i:i + 1])[0])


def eta(model: SystemModel, tri, i: int) -> float:
    return float(eta_bounds(model, tri.bbox_lo[i:i + 1], tri.bbox_hi[i:i + 1])[0])


def hessian_constants(model: SystemModel, tri) -> tuple[np.ndarray, np.ndarray]:
    """(mu_i, eta_i) for every simplex, from its bounding box."""
    return mu_bounds(model, tri.bbox_lo, tri.bbox_hi), eta_bounds(model, tri.bbox_lo, tri.bbox_hi)


# interval helpers ------------------------------------------------------------


def max_abs_sin(lo, hi) -> np.ndarray:
    """max |sin t| over [lo, hi], elementwise."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    # a peak of |sin| sits at pi/2 + k pi
    k = np.ceil((lo - math.pi / 2) / math.pi)
    peak = math.pi / 2 + k * math.pi <= hi
    return np.where(peak, 1.0, np.maximum(np.abs(np.sin(lo)), np.abs(np.sin(hi))))


def max_abs_cos(lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    k = np.ceil(lo / math.pi)
    peak = k * math.pi <= hi
    return np.where(peak, 1.0, np.maximum(np.abs(np.cos(lo)), np.abs(np.cos(hi))))


def box_input_set(u_max) -> tuple[np.ndarray, np.ndarray]:
    u_max = np.atleast_1d(np.asarray(u_max, float))
    m = len(u_max)
    H = np.vstack([np.eye(m), -np.eye(m)])
    return H, np.concatenate([u_max, u_max])


# ---------------------------------------------------------------------------
# built-in models


def pendulum(g_over_l: float = 4.9, damping: float = 0.3, u_max: float = 5.0,
             x_max: float = 1.0) -> SystemModel:
    """Inverted pendulum about the upright equilibrium."""

    def f(X):
        return np.stack([X[:, 1], g_over_l * np.sin(X[:, 0]) - damping * X[:, 1]], axis=1)

    def G(X):
        out = np.zeros((len(X), 2, 1))
        out[:, 1, 0] = 1.0
        return out

    def hess_f(lo, hi):
        # the only nonzero second derivative is d2 f2 / dx1^2 = -g/l sin x1
        return g_over_l * max_abs_sin(lo[:, 0], hi[:, 0])

    H, h = box_input_set([u_max])
    return SystemModel(
        name="pendulum", n=2, m=1, f=f, G=G, input_H=H, input_h=h,
        state_lo=np.full(2, -x_max), state_hi=np.full(2, x_max),
        hessian_f_bound=hess_f, constant_G=True,
        A=np.array([[0.0, 1.0], [g_over_l, -damping]]),
        params=dict(g_over_l=g_over_l, damping=damping, u_max=u_max, x_max=x_max),
    )


def linear(A, B, u_max=1.0, x_max=1.0, name: str = "linear", H=None, h=None) -> SystemModel:
    A = np.asarray(A, float)
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    n, m = B.shape
    if H is None:
        H, h = box_input_set(np.broadcast_to(u_max, (m,)))

    def f(X):
        return X @ A.T

    def G(X):
        return np.broadcast_to(B, (len(X), n, m)).copy()

    return SystemModel(
        name=name, n=n, m=m, f=f, G=G, input_H=H, input_h=h,
        state_lo=np.full(n, -x_max), state_hi=np.full(n, x_max),
        constant_G=True, A=A, params=dict(A=A.tolist(), B=B.tolist(), u_max=u_max, x_max=x_max),
    )


def double_integrator(u_max: float = 2.0, x_max: float = 1.0) -> SystemModel:
    return linear([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], u_max=u_max, x_max=x_max,
                  name="double_integrator")


def linear3(u_max: float = 3.0, x_max: float = 1.0) -> SystemModel:
    """Open-loop unstable third-order chain."""
    A = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, -1.0, -0.5]]
    return linear(A, [[0.0], [0.0], [1.0]], u_max=u_max, x_max=x_max, name="linear3")


def input_gain_pendulum(g_over_l: float = 4.9, damping: float = 0.3, u_max: float = 5.0,
                        x_max: float = 1.0) -> SystemModel:
    """Pendulum whose input enters through cos(x1): a state-dependent G."""
    base = pendulum(g_over_l, damping, u_max, x_max)

    def G(X):
        out = np.zeros((len(X), 2, 1))
        out[:, 1, 0] = np.cos(X[:, 0])
        return out

    def hess_G(lo, hi):
        return max_abs_cos(lo[:, 0], hi[:, 0])[:, None]

    def eta_b(lo, hi):
        return 2.0 * max_abs_sin(lo[:, 0], hi[:, 0])

    return SystemModel(
        name="input_gain_pendulum", n=2, m=1, f=base.f, G=G, input_H=base.input_H,
        input_h=base.input_h, state_lo=base.state_lo, state_hi=base.state_hi,
        hessian_f_bound=base.hessian_f_bound, hessian_G_bound=hess_G, eta_bound=eta_b,
        constant_G=False, A=base.A, params=dict(base.params),
    )


MODELS: dict[str, Callable[..., SystemModel]] = {
    "pendulum": pendulum,
    "double_integrator": double_integrator,
    "linear3": linear3,
    "input_gain_pendulum": input_gain_pendulum,
    "linear": linear,
}


def register_model(name: str, factory: Callable[..., SystemModel]):
    MODELS[name] = factory


def get_model(name: str, **params) -> SystemModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None
    return factory(**params)
