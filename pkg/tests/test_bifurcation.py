import numpy as np
import pytest

from fsihopf import bifurcation as bf
from fsihopf import evolution as ev
from fsihopf.discretization import operators
from fsihopf.model import Params, ValidationError
from fsihopf.periodic import HarmonicSystem, newton_harmonic
from fsihopf.spectral import assemble_linearization, eigs
from fsihopf.steady import solve_steady

GRID = [-0.04, -0.02, -0.01, 0.01, 0.02, 0.04]


@pytest.fixture(scope="module")
def hopf(small_mesh):
    return bf.locate_crossing((40.0, 60.0), Params(lam=40.0, omega_n_sq=1.0, varpi=1.0), small_mesh)


@pytest.fixture(scope="module")
def bs(hopf):
    return bf.BranchSystem(hopf, K_trunc=6)


@pytest.fixture(scope="module")
def branch(bs):
    return bf.trace_branch(bs, GRID)


# -- crossing -----------------------------------------------------------------

def test_crossing_located_and_reverified(hopf, small_mesh):
    assert abs(hopf.eigpair.nu.real) <= 1e-8 and hopf.zeta0 > 0
    # independent check: steady state from scratch, different shift
    s = solve_steady(Params(lam=hopf.lambda0, omega_n_sq=1.0, varpi=1.0), small_mesh)
    near = eigs(assemble_linearization(s), 0.3 + 1j * (hopf.zeta0 + 0.5), 4)
    nu = min(near, key=lambda e: abs(e.nu - hopf.eigpair.nu)).nu
    assert abs(nu.real) <= 1e-8 and nu.imag == pytest.approx(hopf.zeta0, rel=1e-9)
    assert hopf.h2.ok and hopf.h1.ok


def test_crossing_speed_sign_matches_bracket(hopf):
    assert hopf.margin > 0
    assert np.sign(hopf.crossing.nu_prime.real) == np.sign(hopf.bracket_slope)
    d = hopf.as_dict()
    assert d["lambda0"] == hopf.lambda0 and len(d["history"]) >= 3


def test_no_sign_change_below_threshold(small_mesh):
    # both ends below the energy threshold (lambda2 is about 4.2 for this configuration)
    with pytest.raises(ValidationError, match="no sign change"):
        bf.locate_crossing((0.5, 1.0), Params(lam=0.5, omega_n_sq=1.0, varpi=1.0), small_mesh, h1=False)
    with pytest.raises(ValidationError):
        bf.locate_crossing((2.0, 1.0), Params(lam=1.0, omega_n_sq=1.0, varpi=1.0), small_mesh)


# -- single points ---------------------------------------------------------------

def test_zero_amplitude_is_trivial(bs):
    bp = bf.lyapunov_schmidt_solve(bs, 0.0)
    assert bp.iterations == 0 and bp.mu == 0.0 and bp.zeta == bs.zeta0
    assert not np.any(bp.X)


def test_newton_from_predictor_converges_fast(bs):
    bp = bf.lyapunov_schmidt_solve(bs, 0.02)
    assert bp.iterations <= 5
    assert abs(bp.residuals["side_v1"]) <= 1e-10 and abs(bp.residuals["side_v2"]) <= 1e-10


def test_side_conditions_by_quadrature(bs, branch):
    for bp in branch.points:
        s1, s2 = bf.side_conditions_quadrature(bs, bp)
        assert abs(s1 - bp.epsilon) <= 1e-10 and abs(s2) <= 1e-10


def test_phase_shifted_start_gives_same_orbit(bs, branch):
    bp = [p for p in branch.points if p.epsilon == 0.02][0]
    X = bp.X * np.exp(1j * 0.3 * np.arange(bs.K + 1))[:, None]
    other = bf.lyapunov_schmidt_solve(bs, 0.02, (X, bp.zeta, bp.mu))
    a, b = np.array(bp.mode_norms(bs.Bd)), np.array(other.mode_norms(bs.Bd))
    assert np.allclose(a, b, rtol=1e-8, atol=1e-14 * a.max())
    assert other.mu == pytest.approx(bp.mu, rel=1e-8)


# -- branch ---------------------------------------------------------------------

def test_branch_parity_and_scaling(branch):
    assert branch.complete and len(branch.points) == 6
    par = branch.parity()
    assert par["mu_over_eps2"] <= 1e-6 and par["zeta"] <= 1e-6
    q = branch.mus / branch.epsilons ** 2
    assert (q.max() - q.min()) / abs(q.mean()) < 0.05
    assert branch.classification in ("supercritical", "subcritical")


def test_branch_limit_and_mu_zeta_to_hopf(bs, branch):
    assert branch.limit["decreasing"]
    small = min(branch.points, key=lambda p: abs(p.epsilon))
    assert abs(small.zeta - bs.zeta0) < abs(max(branch.points, key=lambda p: p.epsilon).zeta - bs.zeta0)
    # odd part of mu(eps) vanishes
    e = branch.epsilons
    assert np.allclose(branch.mus[e > 0], branch.mus[e < 0][::-1], rtol=1e-9)


def test_full_periodic_residual_small(bs, branch):
    for bp in branch.points:
        r = bf.full_periodic_residual(bs, bp)
        assert r["max"] < 1e-6


def test_truncation_doubling(hopf, branch):
    bp = [p for p in branch.points if p.epsilon == 0.04][0]
    fine = bf.lyapunov_schmidt_solve(bf.BranchSystem(hopf, K_trunc=12), 0.04)
    assert abs(fine.mu - bp.mu) <= 1e-5 * abs(bp.mu)
    assert abs(fine.zeta - bp.zeta) <= 1e-5 * bp.zeta
    assert np.allclose(fine.X[:7], bp.X, atol=1e-5 * np.abs(bp.X).max())


def test_harmonic_balance_at_branch_lambda(hopf, bs, branch, small_mesh):
    """Re-solve the orbit as a plain periodic problem about the steady state at lambda0 + mu."""
    bp = [p for p in branch.points if p.epsilon == 0.04][0]
    lam = hopf.lambda0 + bp.mu
    s = solve_steady(hopf.state.params.replace(lam=lam), small_mesh, initial_guess=hopf.state)
    hs = HarmonicSystem(s, bs.K)
    L = hs.L
    X = bp.X.copy()
    X[0, L.zs] += hopf.state.u0 - s.u0
    X[0, L.xis] += hopf.state.chi0 - s.chi0
    X[0, L.ps] += hopf.state.p0 - s.p0
    res = newton_harmonic(hs, X, bp.zeta, tol=1e-12, free_zeta=True, phase_ref=bp.X[1])
    assert res.zeta == pytest.approx(bp.zeta, rel=1e-4)
    assert np.linalg.norm(res.X[1:] - bp.X[1:]) <= 1e-4 * np.linalg.norm(bp.X[1:])


def test_time_stepping_follows_orbit(hopf, bs, branch, small_mesh):
    bp = [p for p in branch.points if p.epsilon == 0.02][0]
    pr = hopf.state.params.replace(lam=hopf.lambda0 + bp.mu)
    s = solve_steady(pr, small_mesh, initial_guess=hopf.state)
    L = bs.hopf.L
    period = 2 * np.pi / bp.zeta
    nsteps = 100
    dt = period / nsteps

    def deviation(tau):
        x = bs.hs.sample_signal(bp.X, [tau])[0]
        z = hopf.state.u0 + x[L.zs] - s.u0
        chi = hopf.state.chi0 + x[L.xis] - s.chi0
        return z, chi

    z0, chi0 = deviation(0.0)
    st0 = ev.EvolState(z=z0, chi=chi0)
    _, log, _ = ev.evolve(st0, s, pr, 3 * nsteps * dt, dt)
    ref = []
    for t in log.t:
        z, chi = deviation(bp.zeta * t)
        ref.append(np.sum(operators(s.mesh).mass(pr.varpi) * z ** 2) + pr.spring * np.sum(chi ** 2))
    ref = np.array(ref)
    assert np.max(np.abs(np.array(log.E) - ref)) <= 0.1 * ref.max()


# -- classification and inputs ---------------------------------------------------------

def _synthetic(mu_of_eps):
    pts = [bf.BranchPoint(epsilon=e, mu=mu_of_eps(e), zeta=1.0) for e in (-0.3, -0.2, -0.1, 0.1, 0.2, 0.3)]
    return bf.Branch(points=pts)


def test_classify_synthetic_branches():
    br = _synthetic(lambda e: 2 * e ** 2)
    assert bf.classify_branch(br) == "supercritical" and br.mu2 == pytest.approx(2.0)
    assert bf.classify_branch(_synthetic(lambda e: -e ** 2 + 0.001 * e ** 4)) == "subcritical"
    rng = np.random.default_rng(5)
    assert bf.classify_branch(_synthetic(lambda e: 1e-3 * rng.standard_normal())) == "degenerate"
    with pytest.raises(ValidationError):
        bf.classify_branch(bf.Branch(points=_synthetic(lambda e: e ** 2).points[2:]))


def test_classification_stable_under_grid_halving(bs, branch):
    half = bf.trace_branch(bs, [e / 2 for e in GRID])
    assert half.classification == branch.classification
    assert half.mu2 == pytest.approx(branch.mu2, rel=0.01)


def test_grid_validation(bs):
    with pytest.raises(ValidationError, match="exclude 0"):
        bf.trace_branch(bs, [-0.01, 0.0, 0.01])
    with pytest.raises(ValidationError, match="symmetric"):
        bf.trace_branch(bs, [-0.01, 0.02])


def test_branch_json(tmp_path, bs, branch):
    text = branch.to_json(tmp_path / "branch.json", Bd=bs.Bd, extra={"version": "x"})
    import json
    d = json.loads(text)
    assert d["classification"] == branch.classification and len(d["points"]) == 6
    assert len(d["points"][0]["mode_norms"]) == bs.K + 1
    assert json.loads((tmp_path / "branch.json").read_text()) == d
