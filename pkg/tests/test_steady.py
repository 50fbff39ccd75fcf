import numpy as np
import pytest
from scipy.linalg import svd

from conftest import smooth_stream, solenoidal_from_stream
from fsihopf.discretization import MeshSpec, build_mesh, operators
from fsihopf.model import Params, SolverError
from fsihopf.steady import (UNBOUNDED, Thresholds, solve_steady, steady_residual, continue_steady,
                            compute_thresholds, dense_thresholds, threshold_form, check_H1prime,
                            steady_linearization, h1_report, save_state, load_state, SteadyState)


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(MeshSpec(box=(-6, 3, -3, 3), h=0.25))


@pytest.fixture(scope="module")
def state(mesh):
    return solve_steady(Params(lam=4.0, omega_n_sq=2.0, varpi=0.7), mesh)


def test_stokes_solve_is_exact(mesh):
    s = solve_steady(Params(lam=0.0, omega_n_sq=1.0, varpi=1.0), mesh)
    assert steady_residual(s) < 1e-12
    assert np.allclose(s.u0[-2:], [1.0, 0.0])


def test_state_invariants(state):
    assert state.residual < 1e-10
    assert steady_residual(state) < 1e-10
    assert np.abs(state.closure()).max() < 1e-12 * max(1.0, np.abs(state.chi0).max())


def test_mirror_symmetry(mesh):
    assert mesh.is_mirror_symmetric()
    s = solve_steady(Params(lam=0.5, omega_n_sq=1.0, varpi=1.0), mesh)
    assert abs(s.chi0[1]) <= 1e-8 * np.linalg.norm(s.chi0)
    perm, sign, _ = mesh.mirror()
    ops = operators(mesh)
    u = ops.ext(s.u0)
    assert np.abs(sign * u[perm] - u).max() < 1e-9


def test_first_order_in_lambda(mesh):
    base = solve_steady(Params(lam=0.0, omega_n_sq=1.0, varpi=1.0), mesh).u0
    ratios = []
    for lam in (0.05, 0.1, 0.2):
        u = solve_steady(Params(lam=lam, omega_n_sq=1.0, varpi=1.0), mesh).u0
        ratios.append(np.linalg.norm(u - base) / lam)
    # the ratio settles to the norm of the first-order correction
    assert max(ratios) / min(ratios) < 1.1


def test_continuation_degenerate_range(mesh):
    out = continue_steady(Params(lam=0.0, omega_n_sq=1.0, varpi=1.0), mesh, (0.0, 0.0), 5)
    assert len(out) == 1 and out[0].lam == 0.0
    s = out[0]
    assert s.du0_dlambda is not None and np.linalg.norm(s.du0_dlambda) > 0
    assert np.all(s.du0_dlambda[-2:] == 0)


def test_continuation_grid_and_sensitivity(mesh):
    p = Params(lam=0.0, omega_n_sq=1.0, varpi=1.0)
    out = continue_steady(p, mesh, (1.0, 3.0), 3)
    lams = [s.lam for s in out]
    assert lams == sorted(lams) and len(lams) == 3
    s = out[1]
    d = 1e-3
    up = solve_steady(p.replace(lam=s.lam + d), mesh, initial_guess=s).u0
    dn = solve_steady(p.replace(lam=s.lam - d), mesh, initial_guess=s).u0
    fd = (up - dn) / (2 * d)
    assert np.linalg.norm(fd - s.du0_dlambda) <= 1e-4 * np.linalg.norm(s.du0_dlambda)


def test_newton_failure_is_reported(mesh):
    with pytest.raises(SolverError) as exc:
        solve_steady(Params(lam=4.0, omega_n_sq=1.0, varpi=1.0), mesh, max_iter=1)
    assert exc.value.residual > 0


# -- thresholds ---------------------------------------------------------------

def test_thresholds_ordered(state):
    th = compute_thresholds(state)
    assert th.ordered()
    assert th.lambda2 <= th.lambda1
    assert 0 < th.gamma(0.5 * th.lambda2) < 1


def test_thresholds_match_dense_on_coarse_mesh(tiny_mesh):
    s = solve_steady(Params(lam=2.0, omega_n_sq=1.0, varpi=1.0), tiny_mesh)
    th = compute_thresholds(s)
    d1, d2 = dense_thresholds(s)
    assert abs(th.theta1 - d1) <= 1e-10 * abs(d1)
    assert abs(th.theta2 - d2) <= 1e-10 * abs(d2)


def test_zero_base_flow_gives_unbounded(mesh):
    s = solve_steady(Params(lam=0.0, omega_n_sq=1.0, varpi=1.0), mesh)
    zero = SteadyState(mesh=mesh, params=s.params, u0=np.zeros(mesh.nz), p0=s.p0, chi0=s.chi0,
                       residual=0.0)
    th = compute_thresholds(zero)
    assert th.lambda1 is UNBOUNDED and th.lambda2 is UNBOUNDED
    assert th.gamma(10.0) == 1.0
    assert Thresholds(UNBOUNDED, 3.0).ordered()


def test_rayleigh_quotients_never_exceed_threshold(state, mesh):
    ops = operators(mesh)
    th = compute_thresholds(state)
    Qs = threshold_form(state)
    rng = np.random.default_rng(7)
    best = -np.inf
    for _ in range(200):
        u = solenoidal_from_stream(mesh, smooth_stream(mesh, rng, modes=6))
        z = ops.E.T @ u
        z[-2:] = 0.0
        assert np.array_equal(ops.E @ z, u) and np.abs(ops.D @ z).max() < 1e-12
        best = max(best, -(z @ (Qs @ z)) / (z @ (ops.A @ z)))
    assert best <= th.theta1 + 1e-8


# -- H1' --------------------------------------------------------------------

def test_h1_at_stokes(tiny_mesh):
    s = solve_steady(Params(lam=0.0, omega_n_sq=1.0, varpi=1.0), tiny_mesh)
    rep = check_H1prime(s)
    assert rep.ok
    L = steady_linearization(s).toarray()
    sv = svd(L, compute_uv=False)
    assert abs(rep.sigma_min - sv[-1]) <= 1e-9 * sv[0]


def test_h1_sparse_path_matches_dense(mesh, state):
    rep = check_H1prime(state)
    L = steady_linearization(state).toarray()
    sv = svd(L, compute_uv=False)
    assert L.shape[0] > 400
    assert abs(rep.sigma_min - sv[-1]) <= 1e-9 * sv[0]
    assert rep.ok


def test_h1_detects_manufactured_kernel(tiny_mesh):
    s = solve_steady(Params(lam=3.0, omega_n_sq=1.0, varpi=1.0), tiny_mesh)
    L = steady_linearization(s).toarray()
    U, sv, Vt = svd(L)
    L1 = L - sv[-1] * np.outer(U[:, -1], Vt[-1])   # remove the smallest singular direction
    rep = h1_report(L1)
    assert not rep.ok
    assert rep.sigma_min < 1e-12 * sv[0]


# -- persistence --------------------------------------------------------------

def test_closure_after_reload(tmp_path, mesh):
    s = solve_steady(Params(lam=1.0, omega_n_sq=2.0, varpi=0.5), mesh, sensitivity=True)
    info = save_state(s, tmp_path / "st")
    assert set(info) >= {"lambda", "chi0", "drag", "residual"}
    r = load_state(tmp_path / "st")
    assert np.array_equal(r.u0, s.u0) and np.array_equal(r.du0_dlambda, s.du0_dlambda)
    assert np.abs(r.closure()).max() < 1e-12
    assert steady_residual(r) < 1e-10
