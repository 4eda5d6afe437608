import json
import math

import numpy as np
import pytest
import scipy.linalg as sla

from cpasynth import mesh, model, synth
from cpasynth.cpa import CpaScalarField
from cpasynth.mesh import SizeField, SizeRegion, Surface
from cpasynth.synth import StageOptions, SynthesisProblem, VariantSpec


def two_triangle_mesh():
    return mesh.triangulate_box([-1, -1], [1, 1], 3.0, include_origin=False)


def care_oracle(A, B, Q, R):
    """Stabilizing Riccati solution from the stable invariant subspace of the
    Hamiltonian matrix."""
    n = A.shape[0]
    Hm = np.block([[A, -B @ np.linalg.solve(R, B.T)], [-Q, -A.T]])
    w, vec = np.linalg.eig(Hm)
    S = vec[:, w.real < 0]
    return np.real(S[n:] @ np.linalg.inv(S[:n]))


# -- assembly ------------------------------------------------------------------------


def test_plain_constraint_count():
    m = model.input_gain_pendulum()
    tri = two_triangle_mesh()
    prob = SynthesisProblem(m, tri, VariantSpec(kind="plain"))
    assert prob.use_Z
    N, M, n, mm, p = tri.n_vertices, tri.n_simplexes, 2, 1, 2
    c = prob.constraint_counts()
    expected = N * (1 + p) + M * (2 * n + 2 * n * mm) + M * (n + 1)
    assert c["v_lower"] + c["input"] + c["grad_V"] + c["grad_u"] + c["decrease"] == expected
    assert c["pin_V"] == c["pin_U"] == c["tie"] == 0


def test_stabilize_pins_origin():
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    prob = SynthesisProblem(m, tri, VariantSpec(kind="stabilize"))
    o = tri.origin_id
    assert o in prob.pinV_ids and o in prob.pinU_ids
    assert prob.pinV_vals[list(prob.pinV_ids).index(o)] == 0.0
    # rows at the pinned equilibrium vanish and are dropped
    assert not np.any(prob.rv == o)


def test_reach_target_splits_rows():
    m = model.pendulum()
    t = np.linspace(0, 2 * math.pi, 24, endpoint=False)
    loop = 0.3 * np.c_[np.cos(t), np.sin(t)]
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.25,
                               surfaces=[Surface.polyline("target", loop, closed=True)], method="cdt")
    var = VariantSpec(kind="reach_target", target_surface="target")
    prob = SynthesisProblem(m, tri, var)
    assert prob.has_b3
    assert prob.r_in_target.any() and (~prob.r_in_target).any()
    inside = mesh.points_in_polygon(tri.centroids(), loop)
    np.testing.assert_array_equal(prob.I1, inside)
    y = synth.init_random(m, tri, var, u="zero", problem=prob)
    assert y.b3 is not None


def test_variant_mesh_mismatch():
    m = model.pendulum()
    tri = two_triangle_mesh()
    with pytest.raises(synth.VariantError):
        SynthesisProblem(m, tri, VariantSpec(kind="stabilize"))
    with pytest.raises(synth.VariantError):
        SynthesisProblem(m, tri, VariantSpec(kind="reach_target", target_surface="missing"))
    with pytest.raises(synth.VariantError):
        SynthesisProblem(m, tri, VariantSpec(kind="multi_stage"))
    with pytest.raises(synth.VariantError):
        VariantSpec(kind="bogus")


# -- overbounding blocks ---------------------------------------------------------------


def test_block_at_zero_step():
    d = np.array([2.0, 2.0, 2.0, 2.0])
    P = synth.overbound_block(-1.0, np.zeros(4), d)
    np.testing.assert_array_equal(np.diag(P), [-1, -2, -2, -2, -2])
    assert np.linalg.eigvalsh(P).max() <= 0
    assert np.linalg.eigvalsh(synth.overbound_block(1.0, np.zeros(4), d)).max() > 0


def test_schur_equivalence(rng):
    for _ in range(500):
        k = rng.integers(1, 6)
        w = rng.normal(size=k)
        d = rng.uniform(0.1, 3.0, k)
        phi = rng.normal() * 3
        nsd = np.linalg.eigvalsh(synth.overbound_block(phi, w, d)).max() <= 1e-12
        scalar = phi + np.sum(w ** 2 / d) <= 0
        if abs(phi + np.sum(w ** 2 / d)) > 1e-9:
            assert nsd == scalar


def test_constant_G_has_no_Z_rows(di_model):
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = VariantSpec(kind="stabilize")
    prob = SynthesisProblem(di_model, tri, var)
    assert not prob.use_Z
    y = synth.init_lqr(di_model, tri, var, problem=prob)
    b = synth._StepBuilder(prob, y, True)
    assert b.lay.Z is None
    prog = b.build("b2")
    assert "dZ" not in prog.names


# -- initializations ---------------------------------------------------------------------


def test_init_random_zero_input_pendulum():
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = VariantSpec(kind="plain")
    y = synth.init_random(m, tri, var, a=2.0, b1=1.0, u="zero")
    np.testing.assert_allclose(y.V, np.sum(tri.vertices ** 2, axis=1))
    assert y.b2 <= 0
    prob = SynthesisProblem(m, tri, var)
    assert prob.max_residual(y) <= 1e-12


def test_init_random_inputs_admissible(rng):
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    y = synth.init_random(m, tri, VariantSpec(kind="stabilize"), rng=rng)
    assert np.all(m.admissible(y.U))
    np.testing.assert_allclose(y.L, np.abs(CpaScalarField(tri, y.V).gradients()))


def test_init_random_ties_boundary():
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    y = synth.init_random(m, tri, VariantSpec(kind="single_stage"), u="zero")
    bnd = tri.surface("outer")
    assert np.all(y.V[bnd] == pytest.approx(2.0))
    assert y.Vb == pytest.approx(2.0)


def test_init_random_rejects_bad_parameters():
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    with pytest.raises(ValueError):
        synth.init_random(m, tri, VariantSpec(), a=0.5)


def test_origin_rows_vanish():
    # c_{i,0} = 0 and f(0) = 0: rows anchored at the origin impose nothing
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    prob = SynthesisProblem(m, tri, VariantSpec(kind="plain"))
    y = synth.init_random(m, tri, VariantSpec(kind="plain"), u="zero", problem=prob)
    dp = prob.dplus(y)
    assert np.all(np.abs(dp[prob.rv == tri.origin_id]) == 0.0)


def test_lqr_matches_care_oracle():
    m = model.pendulum()
    A, B = m.linearize()
    P, K = synth.lqr(m)
    P_ref = care_oracle(A, B, 2 * np.eye(2), np.eye(1))
    np.testing.assert_allclose(P, P_ref, rtol=1e-9)
    res = A.T @ P + P @ A - P @ B @ B.T @ P + 2 * np.eye(2)
    assert np.abs(res).max() <= 1e-9
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    y = synth.init_lqr(m, tri, VariantSpec(kind="stabilize"))
    assert y.a == 2.0
    assert y.b1 == pytest.approx(np.linalg.eigvalsh(P)[0], rel=1e-12)
    assert np.all(m.admissible(y.U, tol=1e-12))
    np.testing.assert_allclose(y.V, np.einsum("pi,ij,pj->p", tri.vertices, P, tri.vertices))


def test_lqr_input_scaling():
    # inputs of a strongly unstable plant saturate: every vertex stays admissible
    m = model.linear([[2.0, 0.0], [0.0, 2.0]], np.eye(2), u_max=0.1)
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    y = synth.init_lqr(m, tri, VariantSpec(kind="plain"))
    assert np.all(m.admissible(y.U, tol=1e-12))
    assert np.max(np.abs(y.U)) == pytest.approx(0.1)


def test_lqr_failure():
    m = model.linear([[1.0, 0.0], [0.0, 1.0]], [[0.0], [0.0]])
    with pytest.raises(synth.SynthesisError):
        synth.lqr(m)


def test_multistage_init_uses_inner_inputs():
    m = model.pendulum()
    sq = lambda s: np.array([[-s, -s], [s, -s], [s, s], [-s, s]])
    tri = mesh.triangulate_annulus(sq(1.0), sq(0.5), 0.3)
    inner = tri.surface("inner")
    var = VariantSpec(kind="multi_stage", continuity="discontinuous_both", level_floor=0.4)
    u_in = np.linspace(-1, 1, len(inner))
    y = synth.init_lqr(m, tri, var, inner_u=u_in)
    np.testing.assert_allclose(y.U[inner, 0], u_in)
    assert np.min(y.V[inner]) == pytest.approx(0.4)


# -- fixed-mesh iteration --------------------------------------------------------------


def test_double_integrator_reaches_positive_rate(di_model, di_stage):
    fm = di_stage.fixed
    phase1 = [h for h in fm.history if h.phase == 1]
    assert fm.vars.b2 > 0
    assert len(phase1) <= 15
    prob = SynthesisProblem(di_model, di_stage.tri, di_stage.variant)
    assert prob.max_residual(fm.vars) <= 1e-6


def test_phase_two_objective_nonincreasing(di_stage):
    phase2 = [h.objective for h in di_stage.history if h.phase == 2]
    assert len(phase2) >= 1
    assert all(b <= a + 1e-9 for a, b in zip(phase2, phase2[1:]))


def test_single_iteration_with_unbounded_target(di_model):
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = VariantSpec(kind="stabilize")
    init = synth.init_lqr(di_model, tri, var)
    fm = synth.run_fixed_mesh(di_model, tri, var, init, b2_target=-math.inf, J_hat=None)
    assert [h.phase for h in fm.history] == [0, 1]
    assert fm.vars.b2 >= init.b2 - 1e-9


@pytest.mark.parametrize("encoding", ["soc", "psd"])
def test_iterate_preserves_feasibility(encoding):
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = VariantSpec(kind="stabilize")
    prob = SynthesisProblem(m, tri, var)
    y = synth.init_lqr(m, tri, var, problem=prob)
    for _ in range(3):
        res = synth.iterate(m, tri, var, y, "b2", problem=prob, encoding=encoding)
        assert res.objective_after <= res.objective_before + 1e-9
        assert prob.max_residual(res.vars) <= 1e-6
        y = res.vars


def test_zero_step_is_feasible():
    m = model.input_gain_pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = VariantSpec(kind="single_stage")
    prob = SynthesisProblem(m, tri, var)
    y = synth.init_lqr(m, tri, var, problem=prob)
    for weights in ("unit", "scaled"):
        prog = synth._StepBuilder(prob, y, True, weights=weights).build("b2")
        res = prog.residuals(np.zeros(prog.n))
        assert max(res.values()) <= 1e-9


def test_normalization_keeps_rates():
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = VariantSpec(kind="single_stage")
    prob = SynthesisProblem(m, tri, var)
    y = synth.init_lqr(m, tri, var, problem=prob)
    z = prob.normalized(y)
    assert prob.scale_free
    assert z.V.max() == pytest.approx(1.0)
    b2y, _, _ = prob.exact_rates(y)
    b2z, _, _ = prob.exact_rates(z)
    assert b2z == pytest.approx(b2y, rel=1e-9)
    assert prob.max_residual(z) <= 1e-9


def test_repair_snaps_to_exact_rates():
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = VariantSpec(kind="stabilize")
    prob = SynthesisProblem(m, tri, var)
    y = synth.init_lqr(m, tri, var, problem=prob)
    bumped = y.copy()
    bumped.b2 = y.b2 + 1.0
    fixed, excess = prob.repair(bumped)
    assert excess == pytest.approx(1.0, rel=1e-9)
    assert fixed.b2 == pytest.approx(y.b2, rel=1e-9)


# -- salvage and certification ------------------------------------------------------------


def test_salvage_keeps_everything_when_rows_negative(di_model, di_stage):
    sv = synth.salvage(di_model, di_stage.tri, di_stage.vars, di_stage.variant)
    assert len(sv.index_set) == di_stage.tri.n_simplexes
    assert len(sv.excluded) == 0
    prob = SynthesisProblem(di_model, di_stage.tri, di_stage.variant)
    dp = prob.dplus(di_stage.vars)
    rows = prob.nonzero_row
    assert sv.hat_b2 == pytest.approx(np.min(-dp[rows] / di_stage.vars.V[prob.rv[rows]]))


def test_salvage_excludes_bad_simplex():
    m = model.pendulum()
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = VariantSpec(kind="stabilize")
    prob = SynthesisProblem(m, tri, var)
    y = synth.init_lqr(m, tri, var, problem=prob)
    dp = prob.dplus(y)
    bad = np.zeros(tri.n_simplexes, bool)
    np.logical_or.at(bad, prob.ri[prob.nonzero_row], dp[prob.nonzero_row] >= 0)
    sv = synth.salvage(m, tri, y, var, problem=prob)
    np.testing.assert_array_equal(sv.excluded, np.nonzero(bad)[0])
    assert sv.hat_b2 > 0
    assert np.all(sv.tri.parent_simplex_ids == sv.index_set)


def test_certify_region_inside_mesh(di_stage):
    c = di_stage.certified
    assert c.salvage == "none" and c.b2 > 0
    assert c.region.contains_origin
    vals = c.V.values
    assert c.r < vals[c.tri.boundary].min()
    assert 0 < c.area < 4.0


def test_certify_rejects_violations(di_model, di_stage):
    y = di_stage.vars.copy()
    y.b2 *= 2
    with pytest.raises(synth.CertificateError):
        synth.certify(di_model, di_stage.tri, di_stage.variant, y)


def test_recheck_and_bundle_roundtrip(di_model, di_stage):
    res = synth.recheck(di_model, di_stage)
    assert max(res.values()) <= 1e-6
    back = synth.stage_from_bundle(json.loads(di_stage.to_json()), di_model)
    assert back.certified.area == pytest.approx(di_stage.certified.area, rel=1e-12)
    assert max(synth.recheck(di_model, back).values()) <= 1e-6
    assert synth.recheck(di_model, back, b2=2 * di_stage.certified.b2)["certified_rate"] > 1e-6


def test_dini_quotients_bounded(di_model, di_stage, rng):
    prob = SynthesisProblem(di_model, di_stage.tri, di_stage.variant)
    y = di_stage.vars
    dp = prob.dplus(y)
    full = np.zeros((prob.M, 3))
    full[prob.ri, prob.rj] = dp
    V = CpaScalarField(di_stage.tri, y.V)
    u = synth.CpaVectorField(di_stage.tri, y.U)
    tri = di_stage.tri
    for _ in range(1000):
        i = rng.integers(prob.M)
        lam = rng.dirichlet(np.ones(3))
        x = lam @ tri.vertices[tri.simplexes[i]]
        g = di_model.rhs(x[None], u.evaluate(x)[None])[0]
        h = 1e-6
        q = (V.evaluate(x + h * g, outside="nan") - V.evaluate(x)) / h
        if np.isnan(q):
            continue
        assert q <= lam @ full[i] + 1e-4


# -- refinement and stages ---------------------------------------------------------------


def test_options_roundtrip_and_validation():
    o = StageOptions(gamma={"boundary": 0.5, "default": 0.8}, iterations=(5, 2))
    assert StageOptions.from_dict(o.to_dict()) == o
    with pytest.raises(ValueError):
        StageOptions(gamma=1.5)


def test_refine_schedule_two_shrinks():
    size = SizeField(0.1, (SizeRegion("boundary", 0.1, kind="boundary", width=0.1),))
    g = {"boundary": 0.5, "default": 0.8}
    s2 = size.scaled(g).scaled(g)
    assert s2.regions[0].rho == pytest.approx(0.5 ** 2 * 0.1)
    assert s2.default == pytest.approx(0.8 ** 2 * 0.1)


def test_refining_stops_on_rho_min(di_model):
    dom = mesh.Domain("box", lo=(-1, -1), hi=(1, 1), method="cdt")
    opts = StageOptions(iterations=(2, 0), rho_min=1.0, max_meshes=5, area_goal=10.0)
    res = synth.run_refining(di_model, dom, VariantSpec(kind="stabilize"), SizeField(0.5), opts)
    assert len(res.attempts) == 1
    assert not res.met


def test_refining_single_mesh_when_met(di_model):
    dom = mesh.Domain("box", lo=(-1, -1), hi=(1, 1), method="cdt")
    opts = StageOptions(iterations=(15, 0), max_meshes=4, gamma=0.8)
    res = synth.run_refining(di_model, dom, VariantSpec(kind="stabilize"), SizeField(0.25), opts)
    assert res.met
    assert len(res.attempts) == 1
    assert res.best.certified.b2 > 0


def test_multistage_on_double_integrator(di_model):
    inner = mesh.Domain("box", lo=(-0.5, -0.5), hi=(0.5, 0.5), method="cdt")
    outer = mesh.Domain("box", lo=(-1, -1), hi=(1, 1), method="cdt")
    opts = StageOptions(iterations=(15, 0))
    stages = [synth.StageConfig(inner, SizeField(0.15), opts, kind="stabilize"),
              synth.StageConfig(outer, SizeField(0.25), opts, kind="multi_stage")]
    ms = synth.run_multistage(di_model, stages)
    assert ms.complete and len(ms.stages) == 2
    for key in ("a", "b1", "b2"):
        seq = [c[key] for c in ms.constants]
        assert all(b <= a + 1e-12 for a, b in zip(seq, seq[1:]))
        assert ms.constants[-1][key] == pytest.approx(
            min(s.certified.__getattribute__(key) for s in ms.stages))
    assert ms.stages[1].certified.surrounds_hole
    assert ms.combined_area > ms.areas[0]
