import math

import numpy as np
import pytest

from cpasynth import cli, mesh, model, sim, synth
from cpasynth import controller as ctl
from cpasynth.mesh import Surface


def decay_model(n=1):
    return model.linear(-np.eye(n), np.zeros((n, 1)), u_max=1.0, x_max=10.0)


def zero_policy(X):
    return np.zeros((len(X), 1))


def test_linear_decay_matches_exponential():
    tr = sim.integrate(decay_model(), zero_policy, [1.0], T=1.0, dt=1e-3)
    assert tr.times[-1] == pytest.approx(1.0)
    assert abs(tr.states[-1, 0] - math.exp(-1.0)) <= 1e-8


def test_rk4_fourth_order():
    m = decay_model()
    errs = [abs(sim.integrate(m, zero_policy, [1.0], T=1.0, dt=h).states[-1, 0] - math.exp(-1))
            for h in (0.1, 0.05)]
    assert errs[0] / errs[1] == pytest.approx(16.0, rel=0.1)


def test_zero_field_keeps_state():
    m = model.linear(np.zeros((2, 2)), np.zeros((2, 1)))
    tr = sim.integrate(m, zero_policy, [0.3, -0.2], T=0.5, dt=0.01)
    assert np.all(tr.states == [0.3, -0.2])


def test_open_loop_pendulum_leaves_box():
    p = model.pendulum()
    tr = sim.integrate(p, zero_policy, [0.1, 0.0], T=10.0, dt=1e-2)
    assert tr.exited is not None
    # the exit point sits on the box face to bisection accuracy
    assert np.max(np.abs(tr.states[-1])) == pytest.approx(p.params["x_max"], rel=1e-6)


def test_bad_step_rejected():
    with pytest.raises(ValueError):
        sim.integrate(decay_model(), zero_policy, [1.0], T=1.0, dt=0.0)
    with pytest.raises(ValueError):
        sim.Trajectory(np.array([0.0, 0.0]), np.zeros((2, 1)), np.zeros((2, 1)))


def test_csv_export():
    tr = sim.integrate(decay_model(2), zero_policy, [1.0, 2.0], T=0.02, dt=0.01)
    lines = tr.to_csv().strip().splitlines()
    assert lines[0] == "t,x1,x2,u1"
    assert len(lines) == 4
    assert [float(v) for v in lines[1].split(",")] == [0.0, 1.0, 2.0, 0.0]


# -- certificate checks ------------------------------------------------------------------


@pytest.fixture(scope="module")
def di_cert(di_stage):
    return ctl.Certificate.from_stage(di_stage)


def test_grid_points_inside(di_cert):
    G = sim.grid_points(di_cert, 11)
    assert len(G) > 10 and np.all(di_cert.contains(G, strict=True))


def test_origin_start(di_model, di_cert):
    rep = sim.verify_certificate(di_model, di_cert.controller, di_cert, X0=np.zeros((1, 2)), T=1.0)
    assert rep.sound and rep.max_ratio == 0.0


def test_double_integrator_grid_sound(di_model, di_cert):
    rep = sim.verify_certificate(di_model, di_cert.controller, di_cert, 11, T=5.0)
    assert rep.sound, rep.witness
    assert rep.max_ratio <= 1.001


def test_inflated_rate_caught(di_model, di_cert):
    bad = di_cert.with_constants(b2=2 * di_cert.b2)
    rep = sim.verify_certificate(di_model, di_cert.controller, bad, 11, T=5.0)
    assert not rep.sound
    assert rep.decay_violations > 0 and rep.witness[0] in ("decay", "norm")


def test_reach_target_on_ellipse():
    m = model.double_integrator()
    outer = cli.ellipse_loop(m, 1.0, 32)
    t = np.linspace(0, 2 * math.pi, 16, endpoint=False)
    loop = 0.25 * np.c_[np.cos(t), np.sin(t)]
    tri = mesh.triangulate_polygon(outer, 0.15, surfaces=[Surface.polyline("target", loop, closed=True)])
    var = synth.VariantSpec(kind="reach_target", target_surface="target")
    prob = synth.SynthesisProblem(m, tri, var)
    y = synth.init_lqr(m, tri, var, problem=prob)
    fm = synth.run_fixed_mesh(m, tri, var, y, b2_target=0.05, max_iters=(20, 2), problem=prob)
    cert_s = synth.certify(m, tri, var, fm.vars, problem=prob)
    assert cert_s.b3 > 0 and cert_s.area > 0.5
    cert = ctl.Certificate.from_stage(synth.StageResult(tri, fm.vars, cert_s, var))
    rep = sim.verify_certificate(m, cert.controller, cert, 7, T=5.0)
    assert rep.sound, rep.witness
    assert rep.target_misses == 0
