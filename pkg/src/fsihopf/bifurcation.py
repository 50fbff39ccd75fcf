"""Hopf point location and the periodic branch that emanates from it.

The branch is computed on the Fourier-truncated perturbation system about
the steady state at lambda0, with lambda = lambda0 + mu:

    zeta B x_tau + (K0 + mu N0) x + (lambda0 + mu) Q(x) + mu r0 = 0

where N0 = dK/dlambda at fixed base and r0 = C(V0) u0 is the lambda
derivative of the steady residual.  The mean mode carries the steady
correction (it absorbs the drift of the steady state with mu), the modes
k >= 1 the oscillation.  Amplitude and phase are fixed by the two side
conditions (w|v1†) = eps and (w|v2†) = 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import Mesh, operators
from .linalg import Factorized
from .model import Params, SolverError, ValidationError
from .periodic import HarmonicSystem
from .spectral import (AdjointFrame, CrossingSpeed, EigenPair, H2Report, LinearizedOperator, adjoint_frame,
                       assemble_linearization, assemble_S011, check_H2prime, crossing_speed, eigs,
                       fourier_pairing, harmonic_spectrum, _convection_linearization)
from .steady import H1Report, SteadyState, attach_sensitivity, check_H1prime, solve_steady

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# locating the crossing

@dataclass
class HopfPoint:
    lambda0: float
    zeta0: float
    eigpair: EigenPair
    crossing: CrossingSpeed
    frame: AdjointFrame = field(repr=False)
    state: SteadyState = field(repr=False)
    h1: H1Report | None = None
    h2: H2Report | None = None
    history: list = field(default_factory=list, repr=False)   # (lambda, nu) evaluations
    bracket_slope: float = 0.0     # secant slope of Re nu over the initial bracket

    @property
    def L(self) -> LinearizedOperator:
        return self.frame.L

    @property
    def margin(self) -> float:
        """|Re nu'(0)|, the transversality margin."""
        return abs(self.crossing.nu_prime.real)

    def as_dict(self) -> dict:
        return {"lambda0": self.lambda0, "zeta0": self.zeta0,
                "nu0": [self.eigpair.nu.real, self.eigpair.nu.imag],
                "eig_residual": self.eigpair.residual, "crossing": self.crossing.as_dict(),
                "transversality_margin": self.margin, "bracket_slope": self.bracket_slope,
                "gap": self.frame.gap,
                "H1": self.h1.as_dict() if self.h1 else None,
                "H2": self.h2.as_dict() if self.h2 else None,
                "history": [[l, v.real, v.imag] for l, v in self.history]}


def _complex_modes(pairs, min_imag):
    return [e for e in pairs if e.nu.imag > min_imag]


def leading_oscillatory(L: LinearizedOperator, shifts, n: int = 6, min_imag: float = 1e-3) -> EigenPair:
    """Least stable eigenpair with Im nu > min_imag among those found near ``shifts``."""
    found = []
    for s in shifts:
        found += _complex_modes(eigs(L, s, n), min_imag)
    if not found:
        raise SolverError("no oscillatory eigenvalue found near the given shifts")
    return min(found, key=lambda e: e.nu.real)


def _track(L, guess: complex, n: int = 6, min_imag: float = 1e-3) -> EigenPair:
    cand = _complex_modes(eigs(L, guess, n), min_imag)
    if not cand:
        raise SolverError(f"lost track of the oscillatory eigenvalue near {guess}")
    return min(cand, key=lambda e: abs(e.nu - guess))


def locate_crossing(lambda_interval, params: Params, mesh: Mesh, shifts=None, tol: float = 1e-8,
                    max_iter: int = 40, k_max: int = 6, h1: bool = True, n_eigs: int = 6) -> HopfPoint:
    """Secant/false-position search for Re nu = 0 of the least stable oscillatory mode.

    ``shifts`` are used for the initial search at the left end; the mode is
    then tracked.  Default shifts are i lam (0.25, 0.5, ..., 1.25).
    """
    a, b = map(float, lambda_interval)
    if not 0 <= a < b:
        raise ValidationError("lambda interval must satisfy 0 <= a < b")
    states: dict = {}

    def state_at(lam):
        near = min(states, key=lambda l: abs(l - lam)) if states else None
        s = solve_steady(params.replace(lam=lam), mesh, initial_guess=states.get(near))
        states[lam] = s
        return s

    history = []

    def evaluate(lam, guess=None):
        s = state_at(lam)
        L = assemble_linearization(s)
        if guess is None:
            sh = shifts if shifts is not None else 1j * lam * np.array([0.25, 0.5, 0.75, 1.0, 1.25])
            ep = leading_oscillatory(L, sh, n_eigs)
        else:
            ep = _track(L, guess, n_eigs)
        history.append((lam, ep.nu))
        return ep, s, L

    ea, _, _ = evaluate(a)
    eb, _, _ = evaluate(b, ea.nu.real + 1j * ea.nu.imag * b / max(a, 1e-12) if a > 0 else None)
    fa, fb = ea.nu.real, eb.nu.real
    if fa * fb > 0:
        raise ValidationError(f"no sign change of Re nu on [{a}, {b}] (Re nu = {fa:.4g}, {fb:.4g})")
    slope = (fb - fa) / (b - a)
    ep, lam = (ea, a) if abs(fa) < abs(fb) else (eb, b)
    side = 0
    for _ in range(max_iter):
        if abs(ep.nu.real) <= tol:
            break
        # false position with the Illinois modification
        lam = (a * fb - b * fa) / (fb - fa)
        t = (lam - a) / (b - a)
        ep, _, _ = evaluate(lam, ea.nu + t * (eb.nu - ea.nu))
        f = ep.nu.real
        if f * fb > 0:
            b, fb, eb = lam, f, ep
            if side == 1:
                fa *= 0.5
            side = 1
        else:
            a, fa, ea = lam, f, ep
            if side == -1:
                fb *= 0.5
            side = -1
    else:
        raise SolverError(f"crossing search did not converge: Re nu = {ep.nu.real:.3e}")
    s = states[lam]
    attach_sensitivity(s)
    L = assemble_linearization(s)
    ep = _track(L, ep.nu, n_eigs)
    frame = adjoint_frame(L, ep)
    cs = crossing_speed(frame, assemble_S011(s))
    spec = harmonic_spectrum(L, ep.nu.imag, k_max)
    h2 = check_H2prime(spec, ep.nu, k_max)
    h1r = check_H1prime(s) if h1 else None
    return HopfPoint(lambda0=lam, zeta0=float(ep.nu.imag), eigpair=ep, crossing=cs, frame=frame, state=s,
                     h1=h1r, h2=h2, history=history, bracket_slope=float(slope))


def hopf_from_state(state: SteadyState, eigpair: EigenPair | None = None, guess: complex | None = None,
                    k_max: int = 6) -> HopfPoint:
    """HopfPoint data at a given state (no search); used for manufactured configurations."""
    if state.du0_dlambda is None:
        attach_sensitivity(state)
    L = assemble_linearization(state)
    ep = eigpair if eigpair is not None else _track(L, guess)
    frame = adjoint_frame(L, ep)
    cs = crossing_speed(frame, assemble_S011(state))
    h2 = check_H2prime(harmonic_spectrum(L, ep.nu.imag, k_max), ep.nu, k_max)
    return HopfPoint(lambda0=state.params.lam, zeta0=float(ep.nu.imag), eigpair=ep, crossing=cs,
                     frame=frame, state=state, h2=h2)


# ---------------------------------------------------------------------------
# truncated branch system

class BranchSystem:
    """Residual, Jacobian and preconditioner of the branch equations."""

    def __init__(self, hopf: HopfPoint, K_trunc: int = 6, n_time: int | None = None):
        self.hopf = hopf
        self.hs = HarmonicSystem(hopf.state, K_trunc, n_time, L=hopf.L)
        hs = self.hs
        self.K = K_trunc
        self.n, self.nz = hs.n, hs.nz
        self.lam0 = hopf.lambda0
        self.zeta0 = hopf.zeta0
        self.Bd = hopf.L.Bdiag
        ops = hs.ops
        Nz = _convection_linearization(hopf.state)
        self.N = sp.bmat([[Nz, None], [None, sp.csr_matrix((self.n - self.nz, self.n - self.nz))]],
                         format="csr")
        self.r0 = np.zeros(self.n)
        self.r0[:self.nz] = ops.conv_apply(hopf.state.transport(), hopf.state.u0)
        fr = hopf.frame
        self.v1 = fr.modes("v1")[1]
        self.dag = (fr.modes("v1_dag")[1], fr.modes("v2_dag")[1])
        self.left = np.conj(fr.v0_dag)     # left null vector of the mode-1 block at the crossing

    # -- unknowns y = (packed modes, zeta, mu) -------------------------------
    @property
    def size(self) -> int:
        return self.hs.size + 2

    def pack(self, X, zeta, mu):
        return np.concatenate([self.hs.pack(X), [zeta, mu]])

    def unpack(self, y):
        return self.hs.unpack(y[:-2]), float(y[-2]), float(y[-1])

    def side(self, X):
        """((w|v1†), (w|v2†))."""
        out = []
        for d in self.dag:
            out.append(fourier_pairing(self.Bd, [np.zeros(self.n), X[1]], [np.zeros(self.n), d]))
        return np.array(out)

    def mu_part(self, X):
        """d residual / d mu at fixed X."""
        G = np.array([self.N @ X[k] for k in range(self.K + 1)], dtype=complex) + self.hs.quad(X)
        G[0] += self.r0
        return G

    def equations(self, X, zeta, mu):
        hs = self.hs
        R = hs.linear(X, zeta) + (self.lam0 + mu) * hs.quad(X)
        if mu != 0.0:
            R += mu * np.array([self.N @ X[k] for k in range(self.K + 1)])
            R[0] += mu * self.r0
        return R

    def residual(self, y, eps):
        X, zeta, mu = self.unpack(y)
        return np.concatenate([self.hs.pack(self.equations(X, zeta, mu)), self.side(X) - [eps, 0.0]])

    def jac_apply(self, y, dy):
        X, zeta, mu = self.unpack(y)
        dX, dzeta, dmu = self.unpack(dy)
        hs = self.hs
        R = hs.linear(dX, zeta) + (self.lam0 + mu) * hs.dquad(X, dX)
        if mu != 0.0:
            R += mu * np.array([self.N @ dX[k] for k in range(self.K + 1)])
        for k in range(1, self.K + 1):
            R[k] += 1j * k * dzeta * self.Bd * X[k]
        if dmu != 0.0:
            R += dmu * self.mu_part(X)
        return np.concatenate([hs.pack(R), self.side(dX)])

    def norm(self, F) -> float:
        hs = self.hs
        R = hs.unpack(F[:-2])
        return float(np.hypot(hs.residual_norm(R), np.linalg.norm(F[-2:])))

    # -- preconditioner ------------------------------------------------------
    def preconditioner(self, y):
        """Block lower-triangular approximation: bordered mode-1 block with (zeta, mu) first,
        then the remaining modes with their (zeta, mu) columns moved to the right-hand side."""
        X, zeta, mu = self.unpack(y)
        n, Bd = self.n, self.Bd
        K0 = self.hopf.L.K
        Mr = (K0 + mu * self.N).tocsr() if mu != 0.0 else K0.tocsr()
        Mi = sp.diags(zeta * Bd)
        G = self.mu_part(X)
        cz = 1j * Bd * X[1]
        cols = np.zeros((2 * n, 2))
        cols[:n, 0], cols[n:, 0] = cz.real, cz.imag
        cols[:n, 1], cols[n:, 1] = G[1].real, G[1].imag
        rows = np.zeros((2, 2 * n))
        for j, d in enumerate(self.dag):
            rows[j, :n] = 4 * np.pi * Bd * d.real
            rows[j, n:] = 4 * np.pi * Bd * d.imag
        big = sp.bmat([[sp.bmat([[Mr, -Mi], [Mi, Mr]]), sp.csr_matrix(cols)],
                       [sp.csr_matrix(rows), sp.csr_matrix((2, 2))]], format="csc")
        f1 = Factorized(big, "bordered mode-1 block")
        facs = {0: Factorized(Mr.tocsc(), "mode 0 block")}
        for k in range(2, self.K + 1):
            facs[k] = Factorized((Mr + 1j * k * zeta * sp.diags(Bd)).tocsc(), f"mode {k} block")
        hs = self.hs

        def apply(F):
            R = hs.unpack(F[:-2])
            rhs = np.concatenate([R[1].real, R[1].imag, F[-2:]])
            s = f1.solve(rhs)
            dX = np.zeros_like(R)
            dX[1] = s[:n] + 1j * s[n:2 * n]
            dz, dm = s[2 * n], s[2 * n + 1]
            dX[0] = facs[0].solve((R[0] - dm * G[0]).real)
            for k in range(2, self.K + 1):
                dX[k] = facs[k].solve(R[k] - dm * G[k] - 1j * k * dz * Bd * X[k])
            return self.pack(dX, dz, dm)
        return apply

    # -- predictor -----------------------------------------------------------
    def predictor(self, eps: float):
        """Second-order fields plus (mu, zeta) from the two real solvability conditions."""
        X = np.zeros((self.K + 1, self.n), dtype=complex)
        if eps == 0.0:
            return X, self.zeta0, 0.0
        hs = self.hs
        K0 = self.hopf.L.K
        X[1] = eps * self.v1
        Q = hs.quad(X)
        mean = Factorized(K0.tocsc(), "mean block")
        X[0] = mean.solve(-self.lam0 * Q[0].real)
        if self.K >= 2:
            X[2] = Factorized((K0 + 2j * self.zeta0 * sp.diags(self.Bd)).tocsc(), "second harmonic").solve(
                -self.lam0 * Q[2])
        # response of the mean to mu through the steady forcing
        X0mu = mean.solve(-self.r0)
        R = self.equations(X, self.zeta0, 0.0)
        G = self.mu_part(X)[1] + self.lam0 * hs.dquad(X, _only_mean(X0mu, self.K))[1]
        H = 1j * self.Bd * X[1]
        c = lambda v: np.sum(self.left * v)
        A = np.array([[c(G).real, c(H).real], [c(G).imag, c(H).imag]])
        rhs = -np.array([c(R[1]).real, c(R[1]).imag])
        mu, dz = np.linalg.solve(A, rhs)
        X[0] += mu * X0mu
        return X, self.zeta0 + dz, float(mu)


def _only_mean(v, K):
    out = np.zeros((K + 1, v.shape[0]), dtype=complex)
    out[0] = v
    return out


# ---------------------------------------------------------------------------
# branch points

@dataclass
class BranchPoint:
    epsilon: float
    mu: float
    zeta: float
    X: np.ndarray | None = field(default=None, repr=False)     # modes 0..K of (z, xi, p)
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    history: list = field(default_factory=list, repr=False)

    def v(self, nz):
        """Steady correction (mean velocity field)."""
        return self.X[0, :nz].real

    def eta_bar(self, nz):
        return self.X[0, nz:nz + 2].real

    def w(self):
        """Oscillatory modes k >= 1."""
        return self.X[1:]

    def mode_norms(self, Bd) -> list:
        return [float(np.sqrt(np.sum(Bd * np.abs(x) ** 2))) for x in self.X]

    def as_dict(self, Bd=None) -> dict:
        d = {"epsilon": self.epsilon, "mu": self.mu, "zeta": self.zeta, "iterations": self.iterations,
             "residuals": self.residuals}
        if Bd is not None and self.X is not None:
            d["mode_norms"] = self.mode_norms(Bd)
        return d


def lyapunov_schmidt_solve(bs: BranchSystem, epsilon: float, predictor=None, tol: float | None = None,
                           max_iter: int = 12) -> BranchPoint:
    """Newton-GMRES on the branch equations at amplitude ``epsilon``.

    ``predictor`` is (X, zeta, mu) or None for the built-in second-order predictor.
    The default tolerance scales like |eps|^3 so mu/eps^2 is resolved to ~1e-9.
    """
    eps = float(epsilon)
    X, zeta, mu = predictor if predictor is not None else bs.predictor(eps)
    y = bs.pack(np.asarray(X, dtype=complex), zeta, mu)
    if tol is None:
        tol = max(1e-9 * abs(eps) ** 3, 1e-15)
    F = bs.residual(y, eps)
    res = bs.norm(F)
    history = [res]
    it = 0
    while res > tol:
        if it >= max_iter:
            raise SolverError(f"branch Newton did not converge at eps={eps}: residual {res:.3e}", res)
        pre = bs.preconditioner(y)
        N = bs.size
        J = spla.LinearOperator((N, N), matvec=lambda d: bs.jac_apply(y, d), dtype=float)
        P = spla.LinearOperator((N, N), matvec=pre, dtype=float)
        rt = max(min(1e-3, 0.01 * res / max(history[0], 1e-300)), 1e-13)
        dy, info = spla.gmres(J, -F, M=P, rtol=rt, atol=0.0, restart=60, maxiter=20)
        if info < 0:
            raise SolverError(f"GMRES breakdown in branch Newton (info={info})")
        y = y + dy
        F = bs.residual(y, eps)
        new = bs.norm(F)
        it += 1
        history.append(new)
        if not np.isfinite(new):
            raise SolverError("branch Newton diverged", new)
        if new > 0.9 * res and it >= 3 and new < 1e3 * tol:
            res = new
            break      # round-off floor
        res = new
    X, zeta, mu = bs.unpack(y)
    side = bs.side(X)
    return BranchPoint(epsilon=eps, mu=mu, zeta=zeta, X=X, iterations=it, history=history,
                       residuals={"newton": res, "side_v1": float(side[0] - eps), "side_v2": float(side[1])})


def side_conditions_quadrature(bs: BranchSystem, bp: BranchPoint, n_samples: int = 64):
    """((w|v1†), (w|v2†)) by trapezoidal quadrature of the sampled real signals."""
    taus = 2 * np.pi * np.arange(n_samples) / n_samples
    w = bs.hs.sample_signal(np.vstack([np.zeros((1, bs.n)), bp.X[1:]]), taus)
    out = []
    for which in ("v1_dag", "v2_dag"):
        vals = [np.sum(wt * bs.Bd * bs.hopf.frame.field(which, t)) for wt, t in zip(w, taus)]
        out.append(2 * np.pi * float(np.mean(vals)))
    return tuple(out)


def full_periodic_residual(bs: BranchSystem, bp: BranchPoint, n_samples: int = 64) -> dict:
    """Residual of the full (untruncated, un-split) equations for U = base + x(tau) at lambda0 + mu.

    Evaluated at ``n_samples`` times with the exact tau-derivative; the base
    enters through its own fields, not through K0 or Q.
    """
    s = bs.hopf.state
    ops = operators(s.mesh)
    nz, n = bs.nz, bs.n
    L = bs.hopf.L
    c = L.c
    lam = bs.lam0 + bp.mu
    e1 = ops.unit_fields[:, 0]
    Bd = bs.Bd
    w = np.where(Bd > 0, 1.0 / np.where(Bd > 0, Bd, 1.0), s.mesh.h ** 2)
    # any residual of the base itself is a fixed body force of the model
    base_R = ops.A @ s.u0 + ops.Gp @ s.p0 + bs.lam0 * ops.conv_apply(s.transport(), s.u0)
    base_R[nz - 2:] += c * s.chi0
    worst, scale = 0.0, 0.0
    ps = L.ps
    for t in 2 * np.pi * np.arange(n_samples) / n_samples:
        x = bp.X[0].real.copy()
        xt = np.zeros(n)
        for k in range(1, bs.K + 1):
            e = np.exp(1j * k * t)
            x += 2 * (bp.X[k] * e).real
            xt += 2 * (1j * k * bp.X[k] * e).real
        Z = s.u0 + x[:nz]
        Xi = s.chi0 + x[nz:nz + 2]
        P = s.p0 + x[ps]
        trans = ops.ext(Z) - e1 - ops.unit_fields @ (Z[-2:] - np.array([1.0, 0.0]))
        rz = bp.zeta * Bd[:nz] * xt[:nz] + ops.A @ Z + ops.Gp @ P + lam * ops.conv_apply(trans, Z)
        rz[nz - 2:] += c * Xi
        rz -= base_R
        rxi = c * (bp.zeta * xt[nz:nz + 2] - Z[-2:] + np.array([1.0, 0.0]))
        rp = ops.D @ Z
        r2 = np.sum(w[:nz] * rz ** 2) + np.sum(w[nz:nz + 2] * rxi ** 2) + s.mesh.h ** 2 * np.sum(rp ** 2)
        worst = max(worst, float(np.sqrt(r2)))
        scale = max(scale, float(np.sqrt(np.sum(w[:nz] * (ops.A @ x[:nz]) ** 2))))
    return {"max": worst, "scale": scale}


# ---------------------------------------------------------------------------
# branches

@dataclass
class Branch:
    points: list
    classification: str = ""
    mu2: float = float("nan")
    fit_residual: float = float("nan")
    ratio_spread: float = float("nan")
    limit: dict = field(default_factory=dict)
    complete: bool = True
    message: str = ""

    @property
    def epsilons(self):
        return np.array([p.epsilon for p in self.points])

    @property
    def mus(self):
        return np.array([p.mu for p in self.points])

    @property
    def zetas(self):
        return np.array([p.zeta for p in self.points])

    def parity(self) -> dict:
        """Worst |mu(eps) - mu(-eps)| / eps^2 and |zeta(eps) - zeta(-eps)| over mirrored pairs."""
        by = {p.epsilon: p for p in self.points}
        dm, dz = 0.0, 0.0
        for e, p in by.items():
            if e > 0 and -e in by:
                q = by[-e]
                dm = max(dm, abs(p.mu - q.mu) / e ** 2)
                dz = max(dz, abs(p.zeta - q.zeta))
        return {"mu_over_eps2": dm, "zeta": dz}

    def as_dict(self, Bd=None) -> dict:
        return {"classification": self.classification, "mu2": self.mu2, "fit_residual": self.fit_residual,
                "ratio_spread": self.ratio_spread, "limit": self.limit, "complete": self.complete,
                "message": self.message, "parity": self.parity(),
                "points": [p.as_dict(Bd) for p in self.points]}

    def to_json(self, path=None, Bd=None, extra: dict | None = None) -> str:
        d = self.as_dict(Bd)
        if extra:
            d.update(extra)
        text = json.dumps(d, indent=2, sort_keys=True)
        if path is not None:
            from .discretization.snapshot import atomic_write_text
            atomic_write_text(path, text + "\n")
        return text


def _scaled(bp: BranchPoint, eps: float, zeta0: float):
    r = eps / bp.epsilon
    X = bp.X.copy()
    for k in range(X.shape[0]):
        X[k] *= r ** (k if k else 2)
    return X, zeta0 + (bp.zeta - zeta0) * r * r, bp.mu * r * r


def trace_branch(bs: BranchSystem, epsilon_grid, tol: float | None = None) -> Branch:
    """Branch points on a grid symmetric about 0 (0 excluded), warm-started outward in |eps|."""
    grid = sorted(set(float(e) for e in epsilon_grid))
    if any(e == 0.0 for e in grid):
        raise ValidationError("epsilon grid must exclude 0")
    if sorted(-e for e in grid) != grid:
        raise ValidationError("epsilon grid must be symmetric about 0")
    points = []
    br = Branch(points=points)
    for sign in (1.0, -1.0):
        prev = None
        for e in sorted((g for g in grid if g * sign > 0), key=abs):
            pred = None if prev is None else _scaled(prev, e, bs.zeta0)
            try:
                bp = lyapunov_schmidt_solve(bs, e, pred, tol=tol)
            except SolverError as exc:
                br.complete = False
                br.message = f"stopped at eps={e}: {exc}"
                log.warning(br.message)
                break
            points.append(bp)
            prev = bp
    points.sort(key=lambda p: p.epsilon)
    _branch_limit(bs, br)
    if sum(p.epsilon > 0 for p in points) >= 3 and sum(p.epsilon < 0 for p in points) >= 3:
        classify_branch(br)
    else:
        _fit(br)
    return br


def _branch_limit(bs: BranchSystem, br: Branch):
    """||w(eps) - eps v1|| / |eps| at the two smallest |eps| (must decrease)."""
    pos = sorted((p for p in br.points if p.epsilon > 0), key=lambda p: p.epsilon)[:2]
    vals = []
    for p in pos:
        d = p.X[1:].copy()
        d[0] = d[0] - p.epsilon * bs.v1
        num = np.sqrt(sum(np.sum(bs.Bd * np.abs(x) ** 2) for x in d))
        vals.append(float(num / abs(p.epsilon)))
    br.limit = {"eps": [p.epsilon for p in pos], "deviation_over_eps": vals,
                "decreasing": bool(len(vals) == 2 and vals[1] > vals[0])}


def _fit(br: Branch):
    e, m = br.epsilons, br.mus
    if len(e) == 0:
        return
    q = m / e ** 2
    if len(set(np.abs(e))) >= 2:
        A = np.vstack([np.ones_like(e), e ** 2]).T
        coef, *_ = np.linalg.lstsq(A, q, rcond=None)
        fit = A @ coef
    else:
        coef = [np.mean(q)]
        fit = np.full_like(q, coef[0])
    br.mu2 = float(coef[0])
    dof = max(len(q) - len(coef), 1)
    br.fit_residual = float(np.sqrt(np.sum((q - fit) ** 2) / dof))
    br.ratio_spread = float((q.max() - q.min()) / abs(np.mean(q))) if np.mean(q) != 0 else float("inf")


def classify_branch(br: Branch) -> str:
    """supercritical / subcritical from the sign of mu2 in mu = mu2 eps^2 + mu4 eps^4 + ...;
    degenerate when |mu2| is within 10x of the fit residual."""
    e = br.epsilons
    if (e > 0).sum() < 3 or (e < 0).sum() < 3:
        raise ValidationError("classification needs at least 3 epsilon values of each sign")
    _fit(br)
    floor = 10 * br.fit_residual + 1e-14 * float(np.max(np.abs(br.mus / e ** 2)))
    if abs(br.mu2) <= floor:
        br.classification = "degenerate"
    else:
        br.classification = "supercritical" if br.mu2 > 0 else "subcritical"
    return br.classification
