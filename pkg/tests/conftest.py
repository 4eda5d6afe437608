import numpy as np
import pytest

from cpasynth import mesh, model, synth

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Append one line per acceptance criterion; printed in the terminal summary."""
    def record(number: int, ok: bool, text: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {text}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
    return record


@pytest.fixture(scope="session")
def di_model():
    return model.double_integrator()


@pytest.fixture(scope="session")
def di_stage(di_model):
    """A certified stabilize run of the double integrator on a coarse mesh."""
    tri = mesh.triangulate_box([-1, -1], [1, 1], 0.25, method="cdt")
    var = synth.VariantSpec(kind="stabilize")
    prob = synth.SynthesisProblem(di_model, tri, var)
    init = synth.init_lqr(di_model, tri, var, problem=prob)
    fm = synth.run_fixed_mesh(di_model, tri, var, init, b2_target=0.05, max_iters=(15, 3),
                              problem=prob)
    cert = synth.certify(di_model, tri, var, fm.vars, problem=prob)
    return synth.StageResult(tri, fm.vars, cert, var, fm.history, fm)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
