import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpasynth import cpa, mesh
from cpasynth.cpa import CpaScalarField, CpaVectorField, EmptyRegionError, OutsideError


def unit_simplex():
    return mesh.Triangulation([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])


def random_mesh(seed: int, n: int = 2) -> mesh.Triangulation:
    """Box mesh with random bounds and size, interior vertices jittered."""
    rng = np.random.default_rng(seed)
    lo = -rng.uniform(0.5, 2.0, n)
    hi = rng.uniform(0.5, 2.0, n)
    rho = rng.uniform(0.25, 0.6) * (1.0 if n == 2 else 2.0)
    tri = mesh.triangulate_box(lo, hi, rho)
    V = tri.vertices.copy()
    inner = np.setdiff1d(np.arange(tri.n_vertices), tri.boundary)
    h = tri.longest_edge.min()
    V[inner] += rng.uniform(-0.15, 0.15, size=(len(inner), n)) * h / np.sqrt(n)
    V[tri.origin_id] = 0.0
    return mesh.Triangulation(V, tri.simplexes)


def interior_points(tri, rng, k=50, margin=1e-3):
    """Random points strictly inside random simplexes (away from faces)."""
    sid = rng.integers(0, tri.n_simplexes, k)
    lam = rng.dirichlet(np.ones(tri.n + 1), k)
    lam = margin + (1 - (tri.n + 1) * margin) * lam
    X = np.einsum("kj,kjd->kd", lam, tri.vertices[tri.simplexes[sid]])
    return sid, X


# -- oracles ----------------------------------------------------------------------


def test_gradient_on_unit_simplex():
    f = CpaScalarField(unit_simplex(), [0.0, 1.0, 2.0])
    np.testing.assert_allclose(cpa.gradient(f, 0), [1.0, 2.0])


def test_constant_field_has_zero_gradient():
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    f = CpaScalarField(tri, np.full(tri.n_vertices, 3.7))
    assert np.abs(f.gradients()).max() < 1e-12


def test_affine_sample_gradient():
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    f = CpaScalarField.from_function(tri, lambda x: 3 * x[0] - 2 * x[1] + 5)
    np.testing.assert_allclose(f.gradients(), np.tile([3.0, -2.0], (tri.n_simplexes, 1)), atol=1e-12)


def test_evaluate_at_vertex_and_centroid():
    tri = unit_simplex()
    f = CpaScalarField(tri, [0.0, 1.0, 2.0])
    assert f.evaluate([1.0, 0.0]) == pytest.approx(1.0, abs=1e-15)
    assert cpa.evaluate(f, tri.centroids()[0]) == pytest.approx(1.0, abs=1e-15)


def test_evaluate_outside():
    f = CpaScalarField(unit_simplex(), [0.0, 1.0, 2.0])
    with pytest.raises(OutsideError):
        f.evaluate([1.0, 1.0])
    assert np.isnan(f.evaluate([[1.0, 1.0]], outside="nan")[0])


def test_vector_field_values():
    tri = unit_simplex()
    u = CpaVectorField(tri, [[0.0, 1.0], [1.0, 3.0], [2.0, 5.0]])
    assert u.m == 2
    np.testing.assert_allclose(u.evaluate(tri.centroids()[0]), [1.0, 3.0])


def test_locate_counts():
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    assert len(cpa.locate(tri, tri.centroids()[3])) == 1
    e = tri.edges()
    mids = tri.vertices[e].mean(axis=1)
    interior = ~np.isin(e, tri.boundary).all(axis=1)
    assert len(cpa.locate(tri, mids[np.argmax(interior)])) == 2
    v = tri.vertices[tri.origin_id]
    brute = [i for i in range(tri.n_simplexes) if tri.barycentric(i, v)[0].min() >= -1e-10]
    np.testing.assert_array_equal(cpa.locate(tri, v), brute)
    with pytest.raises(OutsideError):
        cpa.locate(tri, [2.0, 0.0])


def test_largest_sublevel_l1():
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.25)
    V = CpaScalarField.from_function(tri, lambda x: np.abs(x).sum())
    reg = cpa.largest_certified_sublevel(V)
    assert reg.r == pytest.approx(1 - 1e-6, rel=1e-14)
    assert reg.connected and reg.contains_origin
    # the CPA interpolant of the l1 norm is exact here: the region is the diamond
    assert reg.area == pytest.approx(2 * reg.r ** 2, rel=1e-9)


def test_boundary_zero_gives_empty_region():
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    vals = np.abs(tri.vertices).sum(axis=1)
    vals[tri.boundary[0]] = 0.0
    with pytest.raises(EmptyRegionError):
        cpa.largest_certified_sublevel(CpaScalarField(tri, vals))


def test_sublevel_on_restricted_mesh():
    # grid spacing 0.25: the cut x1 = -0.5 is a mesh line
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.25 * np.sqrt(2) + 1e-12)
    keep = np.nonzero(tri.centroids()[:, 0] > -0.5)[0]
    sub = cpa.restrict(tri, keep)
    V = CpaScalarField(sub, np.abs(sub.vertices).sum(axis=1))
    reg = cpa.largest_certified_sublevel(V)
    assert reg.r == pytest.approx(0.5 * (1 - 1e-6), rel=1e-12)
    pts = sub.vertices[sub.simplexes[reg.simplexes]].reshape(-1, 2)
    assert pts[:, 0].min() >= -0.5 - 1e-12


def test_raising_interior_values_cannot_increase_level(rng):
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.25)
    vals = np.sum(tri.vertices ** 2, axis=1)
    r0 = cpa.largest_certified_sublevel(CpaScalarField(tri, vals)).r
    inner = np.setdiff1d(np.arange(tri.n_vertices), tri.boundary)
    vals[inner] += rng.uniform(0, 1, len(inner))
    assert cpa.largest_certified_sublevel(CpaScalarField(tri, vals)).r <= r0


def test_restrict_full_set_keeps_boundary():
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    sub = cpa.restrict(tri, np.arange(tri.n_simplexes))
    np.testing.assert_array_equal(np.sort(sub.parent_vertex_ids[sub.boundary]), np.sort(tri.boundary))


def test_restrict_single_simplex():
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    sub = cpa.restrict(tri, [5])
    assert len(mesh.boundary_facets(sub.simplexes)) == 3


def test_restrict_half_has_cut_line():
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.25)
    left = np.nonzero(tri.centroids()[:, 0] < 0)[0]
    sub = cpa.restrict(tri, left)
    on_cut = np.abs(sub.vertices[:, 0]) < 1e-12
    assert np.all(np.isin(np.nonzero(on_cut)[0], sub.boundary))
    # face-counting oracle: boundary facets are owned by exactly one simplex
    F = np.sort(np.concatenate([np.delete(sub.simplexes, j, axis=1) for j in range(3)]), axis=1)
    uniq, cnt = np.unique(F, axis=0, return_counts=True)
    np.testing.assert_array_equal(np.unique(uniq[cnt == 1]), sub.boundary)
    with pytest.raises(ValueError):
        cpa.restrict(tri, [])


def test_loops_csv_roundtrip():
    loops = [np.array([[0, 0], [1, 0], [0, 1.0]]), np.array([[2, 2], [3, 2], [3, 3.0]])]
    back = cpa.loops_from_csv(cpa.loops_to_csv(loops))
    assert len(back) == 2
    for a, b in zip(loops, back):
        np.testing.assert_array_equal(a, b)


def test_field_json_roundtrip():
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    f = CpaScalarField.from_function(tri, lambda x: x @ x)
    import json
    g = CpaScalarField.from_dict(tri, json.loads(f.to_json()))
    np.testing.assert_array_equal(f.values, g.values)


# -- properties on randomized meshes ----------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), coef=st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_affine_reproduction(seed, coef):
    tri = random_mesh(seed)
    w, c0 = np.array(coef[:2]), coef[2]
    f = CpaScalarField(tri, tri.vertices @ w + c0)
    assert np.abs(f.gradients() - w).max() <= 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_finite_differences(seed):
    tri = random_mesh(seed)
    rng = np.random.default_rng(seed)
    f = CpaScalarField(tri, rng.normal(size=tri.n_vertices))
    sid, X = interior_points(tri, rng)
    h = 1e-6 * tri.longest_edge[sid]
    g = f.gradients()[sid]
    for k in range(tri.n):
        e = np.zeros(tri.n)
        e[k] = 1.0
        fd = (f.evaluate_in(sid, X + h[:, None] * e) - f.evaluate_in(sid, X - h[:, None] * e)) / (2 * h)
        assert np.all(np.abs(fd - g[:, k]) <= 1e-4 * np.maximum(1.0, np.abs(g[:, k])))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_face_continuity(seed):
    tri = random_mesh(seed)
    rng = np.random.default_rng(seed)
    f = CpaScalarField(tri, rng.normal(size=tri.n_vertices))
    F = tri.faces()
    owner = np.repeat(np.arange(tri.n_simplexes)[None], tri.n + 1, axis=0).ravel()
    uniq, inv, cnt = np.unique(F, axis=0, return_inverse=True, return_counts=True)
    shared = np.nonzero(cnt == 2)[0]
    for fid in rng.choice(shared, size=min(40, len(shared)), replace=False):
        a, b = owner[inv.ravel() == fid]
        lam = rng.dirichlet(np.ones(tri.n))
        x = lam @ tri.vertices[uniq[fid]]
        assert abs(f.evaluate_in(a, x)[0] - f.evaluate_in(b, x)[0]) <= 1e-12


def test_random_mesh_three_dimensional():
    tri = random_mesh(7, n=3)
    w = np.array([1.5, -2.0, 0.25])
    f = CpaScalarField(tri, tri.vertices @ w)
    assert np.abs(f.gradients() - w).max() <= 1e-10
