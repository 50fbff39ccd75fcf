import numpy as np
import pytest

from fsihopf import evolution as ev
from fsihopf.discretization import operators
from fsihopf.discretization.mesh import BODY
from fsihopf.model import Params, SolverError, ValidationError
from fsihopf.spectral import assemble_linearization, eigs
from fsihopf.steady import SteadyState, Thresholds, solve_steady


LAMBDA2_SMALL = 4.139021983106173   # small box, omega^2 = 4, varpi = 0.5 (thresholds at lam = 1)


def _zero_state(mesh, params):
    return SteadyState(mesh=mesh, params=params, u0=np.zeros(mesh.nz), p0=np.zeros(mesh.npres),
                       chi0=np.zeros(2), residual=0.0)


def _energy_rate_defect(s, params, st0, dt, T, t_skip=0.5):
    """max over steps after t_skip of |(E_{n+1}-E_n)/dt + 2 z^T (A + lam N) z| / E0 at the midpoint."""
    ops = operators(s.mesh)
    it = ev.Integrator(s, params, dt)
    _, log, traj = ev.evolve(st0, s, params, T, dt, keep_every=1)
    E = np.asarray(log.E)
    worst = 0.0
    for n in range(int(round(t_skip / dt)), len(traj) - 1):
        zm = 0.5 * (traj[n].z + traj[n + 1].z)
        diss = 2 * zm @ (ops.A @ zm) + 2 * zm @ _linear_transport(it, zm)
        worst = max(worst, abs((E[n + 1] - E[n]) / dt + diss) / E[0])
    return worst


def _linear_transport(it, z):
    ops = it.ops
    return it.lam * (ops.conv_apply(it.V, z) + ops.conv_apply(ops.rel(z), it.s.u0))


@pytest.fixture(scope="module")
def sub_state(small_mesh):
    p = Params(lam=0.5 * LAMBDA2_SMALL, omega_n_sq=4.0, varpi=0.5)
    return solve_steady(p, small_mesh)


@pytest.fixture(scope="module")
def init(sub_state):
    p = sub_state.params
    return ev.initial_state(sub_state.mesh, p, u=0.5 * sub_state.u0, chi=[0.1, 0.05], chidot=[0.05, -0.1])


# -- elementary behaviour --------------------------------------------------------

def test_zero_perturbation_stays_zero(sub_state):
    p = sub_state.params
    st0 = ev.initial_state(sub_state.mesh, p)
    fin, log, _ = ev.evolve(st0, sub_state, p, 1.0, 0.04)
    assert np.all(fin.z == 0.0) and np.all(fin.chi == 0.0)
    assert max(log.E) == 0.0


def test_zero_horizon_gives_single_record(sub_state, init):
    fin, log, _ = ev.evolve(init, sub_state, sub_state.params, 0.0, 0.04)
    assert len(log) == 1 and fin is init


def test_trace_is_body_velocity(sub_state, init):
    ops = operators(sub_state.mesh)
    fin, _, _ = ev.evolve(init, sub_state, sub_state.params, 0.4, 0.04)
    faces = ops.ext(fin.z)
    body = sub_state.mesh.face_kind == BODY
    comp = ops.face_comp[body]
    assert np.max(np.abs(faces[body] - fin.chidot[comp])) == 0.0
    assert np.linalg.norm(ops.D @ fin.z) < 1e-11 * np.linalg.norm(fin.z)


def test_cfl_violation_rejected(sub_state, init):
    with pytest.raises(ValidationError, match="CFL"):
        ev.evolve(init, sub_state, sub_state.params, 1.0, 1.0)
    with pytest.raises(ValidationError):
        ev.evolve(init, sub_state, sub_state.params, -1.0, 0.04)


def test_nonfinite_state_aborts(sub_state, init):
    bad = ev.EvolState(z=init.z.copy(), chi=init.chi.copy())
    bad.z[3] = np.nan
    with pytest.raises(SolverError, match="non-finite"):
        ev.evolve(bad, sub_state, sub_state.params, 1.0, 0.04)


def test_step_matches_evolve(sub_state, init):
    p = sub_state.params
    a = ev.step(init, sub_state, p, 0.04)
    b = ev.step(a, sub_state, p, 0.04, previous=init)
    fin, _, _ = ev.evolve(init, sub_state, p, 0.08, 0.04)
    assert np.allclose(b.z, fin.z, rtol=0, atol=1e-13) and np.allclose(b.chi, fin.chi, atol=1e-13)
    assert b.t == pytest.approx(0.08)


def test_energy_log_csv(tmp_path, sub_state, init):
    _, log, _ = ev.evolve(init, sub_state, sub_state.params, 0.16, 0.04)
    text = log.to_csv(tmp_path / "energy.csv")
    lines = text.strip().splitlines()
    assert lines[0] == "t,E,normD,normGrad,|chi|,|chidot|"
    assert len(lines) == 6
    assert (tmp_path / "energy.csv").read_text() == text
    assert float(lines[1].split(",")[1]) == log.E[0]


# -- energy behaviour ----------------------------------------------------------

def test_subcritical_decay_and_monotone_energy(sub_state, init):
    p = sub_state.params
    _, log, _ = ev.evolve(init, sub_state, p, 50.0, 0.04)
    m = ev.decay_metrics(log, p, Thresholds(lambda1=13.35, lambda2=LAMBDA2_SMALL))
    assert m["decayed"] and m["eventually_monotone"]
    assert m["gamma"] == pytest.approx(0.5)
    assert m["final_normGrad"] < 1e-3 * m["initial_normGrad"]


def test_linear_regime_rate_matches_spectrum(sub_state):
    p = sub_state.params
    L = assemble_linearization(sub_state)
    slowest = min(e.nu.real for e in eigs(L, 0.0, 6))
    st0 = ev.initial_state(sub_state.mesh, p, u=1e-6 * sub_state.u0, chidot=[1e-6, 0.0])
    _, log, _ = ev.evolve(st0, sub_state, p, 30.0, 0.02, linear=True)
    rate = ev.decay_metrics(log, p, transient=0.5)["rate"]
    assert rate == pytest.approx(-2 * slowest, rel=0.1)


def test_nonlinear_matches_linearized_at_small_amplitude(sub_state):
    p = sub_state.params
    st0 = ev.initial_state(sub_state.mesh, p, u=1e-7 * sub_state.u0, chidot=[1e-7, -1e-7])
    a, _, _ = ev.evolve(st0, sub_state, p, 100 * 0.02, 0.02)
    b, _, _ = ev.evolve(st0, sub_state, p, 100 * 0.02, 0.02, linear=True)
    assert np.linalg.norm(a.z - b.z) <= 1e-4 * np.linalg.norm(b.z)


def test_heavy_body_without_flow_loses_energy_every_step(small_mesh):
    p = Params(lam=0.0, omega_n_sq=4.0, varpi=0.05)
    s = _zero_state(small_mesh, p)
    st0 = ev.initial_state(small_mesh, p, chi=[0.3, -0.2], chidot=[0.1, 0.0])
    _, log, _ = ev.evolve(st0, s, p, 5.0, 0.02)
    assert np.all(np.diff(log.E) <= 0.0)


def test_energy_budget_defect_shrinks_with_dt(sub_state, init):
    p = sub_state.params
    d1 = _energy_rate_defect(sub_state, p, init, 0.04, 2.0)
    d2 = _energy_rate_defect(sub_state, p, init, 0.02, 2.0)
    assert d2 < 0.6 * d1


# -- eigenbasis and Galerkin cross-check -----------------------------------------

def test_stokes_eigenbasis_orthonormal(small_mesh):
    p = Params(lam=0.0, omega_n_sq=4.0, varpi=0.5)
    ops = operators(small_mesh)
    m = ops.mass(p.varpi)
    basis = ev.stokes_eigenbasis(small_mesh, p, 8)
    Psi = np.array([b.psi for b in basis]).T
    vals = np.array([b.value for b in basis])
    assert np.all(vals > 0) and np.all(np.diff(vals) >= 0)
    assert np.allclose(Psi.T @ (m[:, None] * Psi), np.eye(8), atol=1e-10)
    assert np.allclose(Psi.T @ (ops.A @ Psi), np.diag(vals), atol=1e-8)
    assert np.linalg.norm(ops.D @ Psi) < 1e-10


def test_stokes_eigenbasis_sparse_matches_dense(tiny_mesh):
    p = Params(lam=0.0, omega_n_sq=1.0, varpi=1.0)
    a = ev.stokes_eigenbasis(tiny_mesh, p, 5)
    b = ev.stokes_eigenbasis(tiny_mesh, p, 5, dense=True)
    assert np.allclose([x.value for x in a], [x.value for x in b], rtol=1e-9)
    with pytest.raises(ValidationError):
        ev.stokes_eigenbasis(tiny_mesh, p, 10 ** 6, dense=True)


def test_galerkin_cross_check(tiny_mesh):
    p = Params(lam=0.5, omega_n_sq=1.0, varpi=1.0)
    s = solve_steady(p, tiny_mesh)
    ops = operators(tiny_mesh)
    dim = tiny_mesh.nz - np.linalg.matrix_rank(ops.D.toarray())
    basis = ev.stokes_eigenbasis(tiny_mesh, p, dim, dense=True)
    st0 = ev.initial_state(tiny_mesh, p, u=0.3 * s.u0, chi=[0.05, 0.02], chidot=[0.1, -0.05])
    ref, _ = ev.galerkin_evolve(st0, s, p, basis, 1.0)
    errs = []
    for dt in (0.01, 0.005):
        fin, _, _ = ev.evolve(st0, s, p, 1.0, dt)
        errs.append(np.linalg.norm(fin.z - ref.z) / np.linalg.norm(ref.z))
    assert errs[1] < 1e-3
    assert errs[0] / errs[1] > 3.0


# -- decay metrics -------------------------------------------------------------

def _log_from(t, E):
    log = ev.EnergyLog()
    log.t, log.E = list(t), list(E)
    log.normD = list(np.sqrt(E))
    log.normGrad = list(np.sqrt(E))
    log.chi = [0.0] * len(t)
    log.chidot = [0.0] * len(t)
    return log


def test_decay_metrics_zero_log():
    p = Params(lam=1.0, omega_n_sq=1.0, varpi=1.0)
    m = ev.decay_metrics(_log_from(np.linspace(0, 1, 5), np.zeros(5)), p)
    assert m["decayed"] and m["rate"] == 0.0


def test_decay_metrics_exponential_rate():
    p = Params(lam=1.0, omega_n_sq=1.0, varpi=1.0)
    t = np.linspace(0, 10, 201)
    m = ev.decay_metrics(_log_from(t, np.exp(-2 * t)), p, Thresholds(lambda1=4.0, lambda2=2.0))
    assert m["rate"] == pytest.approx(-2.0, rel=0.01)
    assert m["eventually_monotone"] and m["gamma"] == pytest.approx(0.5) and m["gamma_positive"]
    with pytest.raises(ValidationError):
        ev.decay_metrics(ev.EnergyLog(), p)
