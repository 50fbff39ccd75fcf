import numpy as np
import pytest

from fsihopf.discretization import MeshSpec, build_mesh
from fsihopf.model import Params


@pytest.fixture(scope="session")
def tiny_mesh():
    # 12 x 12 cells, body 4 x 4
    return build_mesh(MeshSpec(box=(-1.5, 1.5, -1.5, 1.5), h=0.25))


@pytest.fixture(scope="session")
def small_mesh():
    return build_mesh(MeshSpec(box=(-6.0, 3.0, -3.0, 3.0), h=0.25))


@pytest.fixture(scope="session")
def params():
    return Params(lam=1.0, omega_n_sq=2.0, varpi=0.7)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def solenoidal_from_stream(mesh, psi_nodes):
    """Face velocities (u, v) = (d psi/dy, -d psi/dx) from node values of psi."""
    h = mesh.h
    nx, ny = mesh.nx, mesh.ny
    psi = psi_nodes.reshape(nx + 1, ny + 1)
    u = np.zeros(mesh.nf)
    i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny), indexing="ij")
    u[mesh.uid(i, j)] = (psi[i, j + 1] - psi[i, j]) / h
    i, j = np.meshgrid(np.arange(nx), np.arange(ny + 1), indexing="ij")
    u[mesh.vid(i, j)] = -(psi[i + 1, j] - psi[i, j]) / h
    return u


def smooth_stream(mesh, rng, margin=1.0, modes=4):
    """Random smooth stream function, zero within margin/2 of the box and on the body."""
    X, Y = np.meshgrid(mesh.x0 + mesh.h * np.arange(mesh.nx + 1),
                       mesh.y0 + mesh.h * np.arange(mesh.ny + 1), indexing="ij")
    x0, x1, y0, y1 = mesh.spec.box
    bx0, bx1, by0, by1 = mesh.spec.body
    psi = np.zeros_like(X)
    for _ in range(modes):
        kx, ky = rng.uniform(0.3, 1.5, 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        psi += rng.standard_normal() * np.sin(kx * X + ph[0]) * np.cos(ky * Y + ph[1])

    def bump(t, a, b):
        s = np.clip((t - a) / (b - a), 0, 1)
        return s * s * (3 - 2 * s)

    pad = 0.5 * margin
    cut = (bump(X, x0 + pad, x0 + margin) * bump(-X, -x1 + pad, -x1 + margin)
           * bump(Y, y0 + pad, y0 + margin) * bump(-Y, -y1 + pad, -y1 + margin))
    dist = np.maximum(np.maximum(bx0 - X, X - bx1), np.maximum(by0 - Y, Y - by1))
    cut *= bump(dist, 0.0, 0.5)
    return (psi * cut).ravel()


# -- acceptance report: one PASS/FAIL line per criterion ------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, title = mark.args
    ok = rep.passed and not hasattr(rep, "wasxfail")
    details = [v for k, v in item.user_properties if k == "detail"]
    if hasattr(rep, "wasxfail"):
        details.append(f"expected failure: {rep.wasxfail}")
    entry = item.config._criteria.setdefault(n, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and ok
    entry["details"] += details


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        e = crit[n]
        line = f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
