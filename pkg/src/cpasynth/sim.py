"""Closed-loop simulation and empirical checks of certified regions."""

from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DEFAULT_DT = 1e-3
EXIT_TOL = 1e-9


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    exited: tuple[float, int] | None = None  # (time, sample index) of the first exit

    def __post_init__(self):
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("trajectory times must be strictly increasing")

    def to_csv(self) -> str:
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        buf = io.StringIO()
        cols = ["t"] + [f"x{k + 1}" for k in range(n)] + [f"u{k + 1}" for k in range(m)]
        buf.write(",".join(cols) + "\n")
        np.savetxt(buf, np.column_stack([self.times, self.states, self.inputs]), delimiter=",",
                   fmt="%.12g")
        return buf.getvalue()


def _as_policy(controller) -> Callable:
    if hasattr(controller, "eval"):
        return lambda X: controller.eval(X, outside="nan")
    return controller


def _rk4(model, policy, X, dt):
    def g(Y):
        return model.rhs(Y, policy(Y))

    k1 = g(X)
    k2 = g(X + 0.5 * dt * k1)
    k3 = g(X + 0.5 * dt * k2)
    k4 = g(X + dt * k3)
    return X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_batch(model, controller, X0, T: float, dt: float = DEFAULT_DT,
                    inside: Callable | None = None) -> list[Trajectory]:
    """Fixed-step RK4 from every row of ``X0``, all trajectories advanced
    together.  A trajectory stops at its first exit from ``inside`` (default:
    the model's state box); the exit time is located by bisection on the step
    length to ``EXIT_TOL * dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    policy = _as_policy(controller)
    inside = inside or (lambda Y: model.in_state_box(Y))
    X0 = np.atleast_2d(np.asarray(X0, float))
    P, n = X0.shape
    steps = int(math.ceil(T / dt - 1e-9))
    X = X0.copy()
    alive = np.ones(P, bool)
    xs = [[x.copy()] for x in X0]
    ts = [[0.0] for _ in range(P)]
    exits: list[tuple[float, int] | None] = [None] * P
    for k in range(steps):
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        h = min(dt, T - k * dt)
        Xa = X[idx]
        Xn = _rk4(model, policy, Xa, h)
        bad = ~inside(Xn) | ~np.all(np.isfinite(Xn), axis=1)
        for p, x_new, b, x_old in zip(idx, Xn, bad, Xa):
            if b:
                tau, x_exit = _exit_bisect(model, policy, inside, x_old, h)
                t_exit = k * dt + tau
                if tau > 0:
                    xs[p].append(x_exit)
                    ts[p].append(t_exit)
                exits[p] = (t_exit, len(ts[p]) - 1)
                alive[p] = False
            else:
                xs[p].append(x_new)
                ts[p].append(k * dt + h)
        X[idx] = Xn
    out = []
    for p in range(P):
        S = np.asarray(xs[p])
        U = np.asarray(policy(S)).reshape(len(S), -1)
        out.append(Trajectory(np.asarray(ts[p]), S, U, exits[p]))
    return out


def _exit_bisect(model, policy, inside, x_old, h):
    lo, hi = 0.0, h
    x_lo = x_old
    while hi - lo > EXIT_TOL * h:
        mid = 0.5 * (lo + hi)
        xm = _rk4(model, policy, x_old[None], mid)[0]
        if inside(xm[None])[0] and np.all(np.isfinite(xm)):
            lo, x_lo = mid, xm
        else:
            hi = mid
    return lo, x_lo


def integrate(model, controller, x0, T: float, dt: float = DEFAULT_DT,
              inside: Callable | None = None) -> Trajectory:
    return integrate_batch(model, controller, np.asarray(x0, float)[None], T, dt, inside)[0]


# ---------------------------------------------------------------------------
# certificate checks


@dataclass
class DecayReport:
    n_trajectories: int
    bound_violations: int
    max_ratio: float
    stayed_inside: bool
    exits: int = 0
    decay_violations: int = 0
    max_decay_ratio: float = 0.0
    input_violations: int = 0
    max_input_excess: float = 0.0
    target_misses: int = 0
    witness: list | None = None
    details: dict = field(default_factory=dict)

    @property
    def sound(self) -> bool:
        return (self.stayed_inside and self.bound_violations == 0 and self.decay_violations == 0
                and self.input_violations == 0 and self.target_misses == 0)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["sound"] = self.sound
        return d


def grid_points(cert, density: int = 11) -> np.ndarray:
    """Grid over the region's bounding box, kept where strictly inside."""
    lo, hi = cert.bounding_box()
    axes = [np.linspace(a, b, density) for a, b in zip(lo, hi)]
    G = np.array(list(itertools.product(*axes)))
    return G[cert.contains(G, strict=True)]


def verify_certificate(model, controller, cert, grid_density: int = 11, T: float = 5.0,
                       dt: float = DEFAULT_DT, tol: float = 1e-3, input_tol: float = 1e-12,
                       X0: np.ndarray | None = None) -> DecayReport:
    """Simulate from grid points inside the region and check that no trajectory
    leaves it, that ``V(x(t)) <= V(x0) e^{-b2 t}`` and
    ``|x(t)| <= (r/b1)^{1/a} e^{-(b2/a) t}`` (both with relative slack ``tol``),
    that every input is admissible, and for a target certificate that the
    target is reached."""
    X0 = grid_points(cert, grid_density) if X0 is None else np.atleast_2d(X0)
    target = cert.b3 is not None and cert.stages[0].target_simplexes is not None
    trajs = integrate_batch(model, controller, X0, T, dt, inside=lambda Y: cert.contains(Y))
    a, b1, b2, r = cert.a, cert.b1, cert.b2, cert.r
    rep = DecayReport(len(trajs), 0, 0.0, True)
    scale = (r / b1) ** (1.0 / a)
    for tr in trajs:
        t, S, U = tr.times, tr.states, tr.inputs
        witness = None
        active = np.ones(len(t), bool)
        if target:
            # nothing is claimed once the target is reached
            hit = cert.in_target(S)
            if not hit.any():
                rep.target_misses += 1
                witness = ("target", S[0].tolist(), float(t[-1]))
            else:
                active[np.argmax(hit):] = False
        if tr.exited is not None and active[tr.exited[1]]:
            rep.exits += 1
            rep.stayed_inside = False
            witness = witness or ("exit", S[0].tolist(), tr.exited[0])
        Vt = cert.V(S)
        decay = Vt[active] / (Vt[0] * np.exp(-b2 * t[active]) + 1e-300)
        if Vt[0] > 0 and len(decay):
            worst = float(np.nanmax(decay))
            rep.max_decay_ratio = max(rep.max_decay_ratio, worst)
            if worst > 1 + tol:
                rep.decay_violations += 1
                witness = witness or ("decay", S[0].tolist(), float(t[active][np.nanargmax(decay)]))
        bound = scale * np.exp(-(b2 / a) * t)
        ratio = np.linalg.norm(S, axis=1)[active] / bound[active]
        if len(ratio):
            worst = float(ratio.max())
            rep.max_ratio = max(rep.max_ratio, worst)
            if worst > 1 + tol:
                rep.bound_violations += 1
                witness = witness or ("norm", S[0].tolist(), float(t[active][np.argmax(ratio)]))
        ok = np.all(np.isfinite(U), axis=1)
        excess = (U[ok] @ model.input_H.T - model.input_h).max(initial=-math.inf)
        rep.max_input_excess = max(rep.max_input_excess, float(excess)) if np.isfinite(excess) \
            else rep.max_input_excess
        if excess > input_tol:
            rep.input_violations += 1
            witness = witness or ("input", S[0].tolist(), float(excess))
        if witness is not None and rep.witness is None:
            rep.witness = list(witness)
    rep.details = dict(T=T, dt=dt, tol=tol, input_tol=input_tol, a=a, b1=b1, b2=b2, r=r)
    return rep
