import math

import numpy as np
import pytest

from cpasynth import mesh, model
from cpasynth.model import ModelError, SystemModel


def strip(x_lo, x_hi):
    """One triangle whose x1 range is [x_lo, x_hi]."""
    return mesh.Triangulation([[x_lo, 0.0], [x_hi, 0.0], [x_lo, 0.1]], [[0, 1, 2]])


def sin_gain_model():
    def f(X):
        return np.zeros_like(X)

    def G(X):
        out = np.zeros((len(X), 2, 1))
        out[:, 1, 0] = np.sin(X[:, 0])
        return out

    H, h = model.box_input_set([1.0])
    return SystemModel("sin_gain", 2, 1, f, G, H, h, [-1, -1], [1, 1],
                       hessian_G_bound=lambda lo, hi: model.max_abs_sin(lo[:, 0], hi[:, 0])[:, None],
                       eta_bound=lambda lo, hi: 2.0 * model.max_abs_cos(lo[:, 0], hi[:, 0]))


def test_pendulum_mu_on_strip():
    p = model.pendulum()
    assert model.mu(p, strip(0.0, 0.1), 0) == pytest.approx(4.9 * math.sin(0.1), rel=1e-12)


def test_pendulum_mu_peak():
    p = model.pendulum(x_max=2.0)
    assert model.mu(p, strip(1.4, 1.7), 0) == pytest.approx(4.9, rel=1e-12)


def test_linear_mu_zero():
    di = model.double_integrator()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    mu, eta = model.hessian_constants(di, tri)
    assert np.all(mu == 0) and np.all(eta == 0)


def test_eta_constant_G():
    assert model.eta(model.pendulum(), strip(0.0, 0.1), 0) == 0.0


def test_eta_linear_gain():
    def G(X):
        out = np.zeros((len(X), 2, 1))
        out[:, 1, 0] = X[:, 0]
        return out

    H, h = model.box_input_set([1.0])
    m = SystemModel("x1_gain", 2, 1, lambda X: np.zeros_like(X), G, H, h, [-1, -1], [1, 1],
                    eta_bound=lambda lo, hi: np.full(len(lo), 2.0))
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    assert all(model.eta(m, tri, i) == 2.0 for i in range(tri.n_simplexes))


def test_eta_sin_gain():
    assert model.eta(sin_gain_model(), strip(0.0, 0.1), 0) == pytest.approx(2.0, rel=1e-12)


def test_mu_includes_input_hessian_term():
    m = sin_gain_model()
    # f has no curvature; |d2 sin / dx1^2| <= sin(0.1) times the input bound 1
    assert model.mu(m, strip(0.0, 0.1), 0) == pytest.approx(math.sin(0.1), rel=1e-12)


def test_input_projection_bounds():
    assert model.input_projection_bound(model.pendulum(), 0) == pytest.approx(5.0)
    H, h = model.box_input_set([1.5, 0.5])
    m = model.linear(np.zeros((2, 2)), np.eye(2), H=H, h=h)
    np.testing.assert_allclose(model.input_projection_bounds(m), [1.5, 0.5])
    H = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    h = np.array([1.0, 1.0, 1.0])
    m = model.linear(np.zeros((2, 2)), np.eye(2), H=H, h=h)
    # vertex enumeration: (-1,-1), (2,-1), (-1,2)
    np.testing.assert_allclose(model.input_projection_bounds(m), [2.0, 2.0])


def test_unbounded_and_empty_polytopes():
    H = np.array([[1.0]])
    m = model.linear([[0.0]], [[1.0]], H=H, h=np.array([1.0]))
    with pytest.raises(ModelError):
        model.input_projection_bound(m, 0)
    H = np.array([[1.0], [-1.0]])
    m = model.linear([[0.0]], [[1.0]], H=H, h=np.array([-1.0, -1.0]))
    with pytest.raises(ModelError):
        model.input_projection_bound(m, 0)


def test_bad_polytope_shape():
    with pytest.raises(ModelError):
        model.linear([[0.0]], [[1.0]], H=np.ones((2, 2)), h=np.ones(2))


def _fd_hessian_max(f, x, h=1e-4):
    n = len(x)
    best = 0.0
    for q in range(n):
        for r in range(n):
            eq, er = np.eye(n)[q] * h, np.eye(n)[r] * h
            d = (f(x + eq + er) - f(x + eq - er) - f(x - eq + er) + f(x - eq - er)) / (4 * h * h)
            best = max(best, float(np.max(np.abs(d))))
    return best


def test_mu_dominates_sampled_hessians(rng):
    p = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    mu, _ = model.hessian_constants(p, tri)
    f = lambda x: p.drift(x)[0]
    for _ in range(1000):
        i = rng.integers(tri.n_simplexes)
        lam = rng.dirichlet(np.ones(3))
        x = lam @ tri.vertices[tri.simplexes[i]]
        assert _fd_hessian_max(f, x) <= mu[i] + 1e-6


def test_bounds_monotone_under_inclusion():
    p = model.input_gain_pendulum()
    small = strip(0.2, 0.3)
    big = strip(0.1, 0.6)
    assert model.mu(p, small, 0) <= model.mu(p, big, 0) + 1e-12
    assert model.eta(p, small, 0) <= model.eta(p, big, 0) + 1e-12


def test_interval_helpers():
    assert model.max_abs_sin(np.array([0.0]), np.array([0.1]))[0] == pytest.approx(math.sin(0.1))
    assert model.max_abs_sin(np.array([-2.0]), np.array([-1.0]))[0] == pytest.approx(1.0)
    assert model.max_abs_cos(np.array([0.5]), np.array([1.0]))[0] == pytest.approx(math.cos(0.5))
    assert model.max_abs_cos(np.array([-0.1]), np.array([0.1]))[0] == pytest.approx(1.0)


def test_dynamics_and_linearization():
    p = model.pendulum()
    x = np.array([[0.3, -0.2]])
    np.testing.assert_allclose(p.rhs(x, [[1.0]]), [[-0.2, 4.9 * math.sin(0.3) + 0.06 + 1.0]])
    A, B = p.linearize()
    np.testing.assert_allclose(A, [[0, 1], [4.9, -0.3]])
    np.testing.assert_allclose(B, [[0], [1]])
    A3, _ = model.linear3().linearize()
    assert np.max(np.linalg.eigvals(A3).real) > 0


def test_registry():
    assert model.get_model("pendulum", u_max=3.0).params["u_max"] == 3.0
    with pytest.raises(ModelError):
        model.get_model("nope")
    model.register_model("di_test", model.double_integrator)
    assert model.get_model("di_test").n == 2
