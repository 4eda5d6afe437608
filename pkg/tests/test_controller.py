import numpy as np
import pytest

from cpasynth import controller as ctl
from cpasynth import mesh, model, sim, synth
from cpasynth.cpa import CpaScalarField, CpaVectorField, OutsideError


@pytest.fixture(scope="module")
def di_cert(di_stage):
    return ctl.Certificate.from_stage(di_stage)


def test_eval_at_vertex_and_centroid():
    tri = mesh.Triangulation([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    c = ctl.CpaController(CpaVectorField(tri, [0.0, 1.0, 2.0]))
    assert c.eval([1.0, 0.0])[0] == pytest.approx(1.0)
    assert c(tri.centroids()[0])[0] == pytest.approx(1.0)
    with pytest.raises(OutsideError):
        c.eval([2.0, 2.0])
    assert np.isnan(c.eval([[2.0, 2.0]], outside="nan")).all()


def test_outer_stage_wins_on_overlap():
    small = mesh.triangulate_box([-0.5, -0.5], [0.5, 0.5], 0.5)
    big = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    c = ctl.CpaController([ctl.ControllerStage(CpaVectorField(small, np.zeros(small.n_vertices))),
                           ctl.ControllerStage(CpaVectorField(big, np.ones(big.n_vertices)))])
    np.testing.assert_array_equal(c.active_stage([[0.5, 0.0], [0.1, 0.1], [0.9, 0.9]]), [1, 1, 1])
    assert c.eval([0.5, 0.0])[0] == 1.0
    with pytest.raises(ValueError):
        ctl.CpaController([])


def test_inputs_admissible_over_region(di_model, di_cert, rng):
    lo, hi = di_cert.bounding_box()
    X = rng.uniform(lo, hi, size=(30000, 2))
    X = X[di_cert.contains(X)][:10000]
    assert len(X) == 10000
    U = di_cert.controller.eval(X)
    assert np.all(U @ di_model.input_H.T <= di_model.input_h)


def test_certificate_helpers(di_cert, di_stage):
    assert di_cert.area == pytest.approx(di_stage.certified.area)
    assert di_cert.contains([0.0, 0.0])[0]
    assert not di_cert.contains([5.0, 5.0])[0]
    assert di_cert.V([[0.0, 0.0]])[0] == pytest.approx(0.0, abs=1e-12)
    assert np.isnan(di_cert.V([[5.0, 5.0]])[0])
    lo, hi = di_cert.bounding_box()
    assert np.all(lo < 0) and np.all(hi > 0)
    doubled = di_cert.with_constants(b2=2 * di_cert.b2)
    assert doubled.b2 == 2 * di_cert.b2 and doubled.controller is di_cert.controller


# -- offline polish ---------------------------------------------------------------------


def test_min_norm_keeps_zero_controller():
    m = model.linear([[-1.0, 0.0], [0.0, -1.0]], np.eye(2))
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = synth.VariantSpec(kind="stabilize")
    prob = synth.SynthesisProblem(m, tri, var)
    y = synth.init_random(m, tri, var, u="zero", problem=prob)
    assert y.b2 > 0
    out = ctl.min_norm_offline(m, tri, var, y, max_iters=3)
    assert np.abs(out.U).max() <= 1e-6
    assert prob.max_residual(out) <= 1e-6


def test_min_norm_decreases_input_norm(di_model):
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.25, method="cdt")
    var = synth.VariantSpec(kind="stabilize")
    prob = synth.SynthesisProblem(di_model, tri, var)
    init = synth.init_lqr(di_model, tri, var, problem=prob)
    fm = synth.run_fixed_mesh(di_model, tri, var, init, b2_target=0.05, J_hat=None,
                              max_iters=(15, 0), problem=prob)
    before = float(np.sum(fm.vars.U ** 2))
    out = ctl.min_norm_offline(di_model, tri, var, fm.vars, max_iters=1)
    assert np.sum(out.U ** 2) < before
    assert out.b2 == pytest.approx(fm.vars.b2)
    assert prob.max_residual(out) <= 1e-6


def test_min_norm_needs_positive_rate(di_model):
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.5)
    var = synth.VariantSpec(kind="plain")
    y = synth.init_random(di_model, tri, var, u="zero")
    with pytest.raises(ValueError):
        ctl.min_norm_offline(di_model, tri, var, y)


def test_epigraph_schur_identity(rng):
    U = rng.normal(size=5)
    for phi in (U @ U - 1e-3, U @ U + 1e-3):
        B = np.block([[np.array([[-phi]]), U[None]], [U[:, None], -np.eye(5)]])
        assert (np.linalg.eigvalsh(B).max() <= 1e-12) == (U @ U <= phi)


# -- online QP ---------------------------------------------------------------------------


def test_qp_dominates_cpa(di_model, di_cert, rng):
    cfg = ctl.OnlineQpConfig(di_cert.stages[0].V, di_cert.b2)
    lo, hi = di_cert.bounding_box()
    X = rng.uniform(lo, hi, size=(400, 2))
    X = X[di_cert.contains(X, strict=True)][:100]
    for x in X:
        u_qp = ctl.online_qp(cfg, di_model, x)
        u_cpa = di_cert.controller.eval(x)
        A, b = ctl.qp_rows(cfg, di_model, x)
        assert np.all(A @ u_qp <= b + 1e-9)
        assert np.linalg.norm(u_qp) <= np.linalg.norm(u_cpa) + 1e-9


def test_qp_zero_at_origin(di_model, di_cert):
    cfg = ctl.OnlineQpConfig(di_cert.stages[0].V, di_cert.b2)
    assert np.abs(ctl.online_qp(cfg, di_model, np.zeros(2))).max() <= 1e-12


def test_qp_general_dimension_path(di_cert):
    # a two-input plant sends the QP through the conic solver
    m2 = model.linear([[0.0, 1.0], [0.0, 0.0]], np.eye(2), u_max=2.0)
    cfg = ctl.OnlineQpConfig(di_cert.stages[0].V, 0.0)
    u = ctl.online_qp(cfg, m2, np.array([0.2, 0.1]))
    A, b = ctl.qp_rows(cfg, m2, np.array([0.2, 0.1]))
    assert np.all(A @ u <= b + 1e-9)


def test_qp_infeasible_signals_broken_certificate(di_model, di_cert):
    cfg = ctl.OnlineQpConfig(di_cert.stages[0].V, 1e6)
    with pytest.raises(ctl.QpInfeasible):
        ctl.online_qp(cfg, di_model, np.array([0.3, 0.2]))


def test_qp_rollout_decays(di_model, di_cert):
    qctl = ctl.OnlineQpController(di_cert, di_model)
    X0 = sim.grid_points(di_cert, 5)[:6]
    rep = sim.verify_certificate(di_model, qctl, di_cert, T=2.0, dt=2e-3, input_tol=1e-9, X0=X0)
    assert rep.sound, rep.witness
