"""Time integration of the perturbation dynamics about a steady state.

The perturbation x = (z, chi, p) obeys ``B dx/dt + K0 x + lam T(z) = 0``
where K0 is the Stokes-plus-spring part of the spectral pencil (implicit)
and T(z) = N z + Q(z) collects the transport terms (explicit).  The scheme
is BDF2 with extrapolated transport after one backward-Euler start; the
body ODE is part of the same linear solve.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.linalg import eigh, null_space

from .discretization import Mesh, operators, strain_norm
from .discretization.snapshot import atomic_write_text
from .linalg import Factorized
from .model import Params, SolverError, ValidationError
from .spectral import _assemble, eigs
from .steady import SteadyState, Thresholds, Unbounded


@dataclass
class EvolState:
    z: np.ndarray = field(repr=False)     # perturbation velocity, body entries = chidot
    chi: np.ndarray
    t: float = 0.0
    p: np.ndarray | None = field(default=None, repr=False)

    @property
    def chidot(self) -> np.ndarray:
        return self.z[-2:]


def initial_state(mesh: Mesh, params: Params, u=None, chi=None, chidot=None) -> EvolState:
    """Solenoidal initial state: ``u`` (coupled field) is projected, then the body velocity set."""
    ops = operators(mesh)
    z = np.zeros(mesh.nz) if u is None else np.array(u, dtype=float)
    if chidot is not None:
        z[-2:] = chidot
    z = ops.project(z, params.varpi)[0] if np.any(z) else z
    return EvolState(z=z, chi=np.zeros(2) if chi is None else np.array(chi, dtype=float))


@dataclass
class EnergyLog:
    t: list = field(default_factory=list)
    E: list = field(default_factory=list)
    normD: list = field(default_factory=list)
    normGrad: list = field(default_factory=list)
    chi: list = field(default_factory=list)
    chidot: list = field(default_factory=list)

    def record(self, st: EvolState, mesh: Mesh, params: Params):
        ops = operators(mesh)
        e = float(np.sum(ops.mass(params.varpi) * st.z ** 2) + params.spring * np.sum(st.chi ** 2))
        nd, ng = strain_norm(mesh, st.z)
        vals = (st.t, e, nd, ng, float(np.linalg.norm(st.chi)), float(np.linalg.norm(st.chidot)))
        if not all(np.isfinite(vals)):
            raise SolverError(f"non-finite energy at t={st.t:.6g}")
        for name, v in zip(("t", "E", "normD", "normGrad", "chi", "chidot"), vals):
            getattr(self, name).append(v)

    def __len__(self):
        return len(self.t)

    def arrays(self):
        return {k: np.asarray(getattr(self, k)) for k in ("t", "E", "normD", "normGrad", "chi", "chidot")}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "E", "normD", "normGrad", "|chi|", "|chidot|"])
        for row in zip(self.t, self.E, self.normD, self.normGrad, self.chi, self.chidot):
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            atomic_write_text(path, text)
        return text


class Integrator:
    """Holds the factorized implicit matrices for one (state, params, dt)."""

    def __init__(self, s: SteadyState, params: Params, dt: float, linear: bool = False, cfl_max: float = 0.9):
        if dt <= 0:
            raise ValidationError("dt must be positive")
        self.s, self.params, self.dt, self.linear = s, params, float(dt), linear
        mesh = s.mesh
        self.mesh = mesh
        ops = operators(mesh)
        self.ops = ops
        self.lam = params.lam
        self.V = s.transport()
        speed = np.abs(self.V).max() + 1.0
        cfl = dt * self.lam * speed / mesh.h
        self.cfl = cfl
        if cfl > cfl_max:
            raise ValidationError(f"CFL number {cfl:.3g} exceeds {cfl_max} (reduce dt below "
                                  f"{cfl_max * mesh.h / (self.lam * speed):.3g})")
        K0, Bd = _assemble(s, ops.A, True, params.omega_n_sq, params.varpi)
        self.K0, self.Bd = K0, Bd
        self.n = K0.shape[0]
        B = sp.diags(Bd)
        self.euler = Factorized((B / dt + K0).tocsc(), "backward Euler step")
        self.bdf2 = Factorized((1.5 * B / dt + K0).tocsc(), "BDF2 step")
        nz = mesh.nz
        self.zs = slice(0, nz)
        self.xs = slice(nz, nz + 2)
        self.ps = slice(nz + 2, nz + 2 + mesh.npres)

    def transport(self, z):
        if self.lam == 0.0:
            return np.zeros_like(z)
        ops = self.ops
        t = ops.conv_apply(self.V, z) + ops.conv_apply(ops.rel(z), self.s.u0)
        if not self.linear:
            t = t + ops.conv_apply(ops.rel(z), z)
        return self.lam * t

    def pack(self, st: EvolState):
        x = np.zeros(self.n)
        x[self.zs] = st.z
        x[self.xs] = st.chi
        if st.p is not None:
            x[self.ps] = st.p
        return x

    def unpack(self, x, t):
        return EvolState(z=x[self.zs].copy(), chi=x[self.xs].copy(), t=t, p=x[self.ps].copy())

    def first(self, x0):
        rhs = self.Bd * x0 / self.dt
        rhs[self.zs] -= self.transport(x0[self.zs])
        return self.euler.solve(rhs)

    def second(self, x1, x0, f1=None, f0=None):
        dt = self.dt
        rhs = self.Bd * (4 * x1 - x0) / (2 * dt)
        f1 = self.transport(x1[self.zs]) if f1 is None else f1
        f0 = self.transport(x0[self.zs]) if f0 is None else f0
        rhs[self.zs] -= 2 * f1 - f0
        return self.bdf2.solve(rhs)


def step(state: EvolState, s: SteadyState, params: Params, dt: float, previous: EvolState | None = None,
         linear: bool = False, integrator: Integrator | None = None) -> EvolState:
    """One step: backward Euler without ``previous``, BDF2 with it."""
    it = integrator or Integrator(s, params, dt, linear)
    x1 = it.pack(state)
    if previous is None:
        x = it.first(x1)
    else:
        x = it.second(x1, it.pack(previous))
    return it.unpack(x, state.t + dt)


def evolve(state0: EvolState, s: SteadyState, params: Params, T: float, dt: float, linear: bool = False,
           keep_every: int = 0, on_step=None):
    """Integrate to time T; returns (final state, EnergyLog, trajectory list).

    ``keep_every`` > 0 stores every k-th state in the trajectory.
    """
    if T < 0:
        raise ValidationError("T must be nonnegative")
    log = EnergyLog()
    log.record(state0, s.mesh, params)
    traj = [state0] if keep_every else []
    nsteps = int(round(T / dt))
    if nsteps == 0:
        return state0, log, traj
    if abs(nsteps * dt - T) > 1e-9 * max(1.0, T):
        raise ValidationError("T must be a whole number of steps dt")
    it = Integrator(s, params, dt, linear)
    x_prev = None
    x = it.pack(state0)
    f_prev = None
    last = state0
    for n in range(nsteps):
        if x_prev is None:
            xn = it.first(x)
            f_cur = None
        else:
            f_cur = it.transport(x[it.zs])
            xn = it.bdf2.solve(_bdf2_rhs(it, x, x_prev, f_cur, f_prev))
        if not np.all(np.isfinite(xn)):
            raise SolverError(f"non-finite state at step {n + 1}; last finite time {last.t:.6g}")
        x_prev, x = x, xn
        f_prev = f_cur if f_cur is not None else it.transport(x_prev[it.zs])
        last = it.unpack(x, state0.t + (n + 1) * dt)
        log.record(last, s.mesh, params)
        if keep_every and (n + 1) % keep_every == 0:
            traj.append(last)
        if on_step is not None:
            on_step(last)
    return last, log, traj


def _bdf2_rhs(it: Integrator, x1, x0, f1, f0):
    rhs = it.Bd * (4 * x1 - x0) / (2 * it.dt)
    rhs[it.zs] -= 2 * f1 - f0
    return rhs


# ---------------------------------------------------------------------------
# modified Stokes eigenbasis

@dataclass
class StokesEigenpair:
    value: float
    psi: np.ndarray = field(repr=False)
    phi: np.ndarray | None = field(default=None, repr=False)


def stokes_eigenbasis(mesh: Mesh, params: Params, n: int, dense: bool = False) -> list[StokesEigenpair]:
    """n smallest eigenpairs of A psi + Gp phi = value M psi, D psi = 0 (body moves freely).

    The vectors are made exactly M-orthonormal by a Rayleigh-Ritz step.
    """
    ops = operators(mesh)
    m = ops.mass(params.varpi)
    if dense:
        N = null_space(ops.D.toarray())
        if n > N.shape[1]:
            raise ValidationError(f"n={n} exceeds the solenoidal dimension {N.shape[1]}")
        A = N.T @ ops.A.toarray() @ N
        Mm = N.T @ (m[:, None] * N)
        w, V = eigh(A, Mm, subset_by_index=[0, n - 1])
        Psi = N @ V
    else:
        zero = SteadyState(mesh=mesh, params=params.replace(lam=0.0), u0=np.zeros(mesh.nz),
                           p0=np.zeros(mesh.npres), chi0=np.zeros(2), residual=0.0)
        K, Bd = _assemble(zero, ops.A, False, params.omega_n_sq, params.varpi)
        from .spectral import LinearizedOperator
        L = LinearizedOperator(state=zero, lam=0.0, omega_n_sq=params.omega_n_sq, varpi=params.varpi,
                               spring=False, K=K, Bdiag=Bd)
        pairs = eigs(L, 0.0, min(n + 4, L.n - 2))
        cols = []
        for e in pairs:
            v = e.x[:mesh.nz]
            # eigenvectors of a real symmetric pencil can be rotated to real form
            k = np.argmax(np.abs(v))
            cols.append((v * np.conj(v[k]) / abs(v[k])).real)
        Psi = np.array(cols).T
        A = Psi.T @ (ops.A @ Psi)
        Mm = Psi.T @ (m[:, None] * Psi)
        w, V = eigh(0.5 * (A + A.T), 0.5 * (Mm + Mm.T))
        w, V = w[:n], V[:, :n]
        Psi = Psi @ V
    out = []
    for i in range(n):
        psi = Psi[:, i]
        # pressure from the momentum rows: Gp phi = value M psi - A psi
        r = w[i] * m * psi - ops.A @ psi
        phi = np.linalg.lstsq(ops.Gp.toarray(), r, rcond=None)[0] if mesh.nz < 3000 else None
        out.append(StokesEigenpair(value=float(w[i]), psi=psi, phi=phi))
    return out


def galerkin_evolve(state0: EvolState, s: SteadyState, params: Params, basis, T: float,
                    linear: bool = False, rtol: float = 1e-10, atol: float = 1e-13, t_eval=None):
    """Cross-check integrator: Galerkin projection on the Stokes eigenbasis plus the body ODE.

    Returns (final EvolState, scipy OdeResult).
    """
    ops = operators(s.mesh)
    m = ops.mass(params.varpi)
    Psi = np.array([b.psi for b in basis]).T
    vals = np.array([b.value for b in basis])
    c = params.spring
    V = s.transport()
    lam = params.lam

    def rhs(t, y):
        a, chi = y[:-2], y[-2:]
        z = Psi @ a
        f = np.zeros(s.mesh.nz)
        f[-2:] = c * chi
        if lam != 0.0:
            f += lam * (ops.conv_apply(V, z) + ops.conv_apply(ops.rel(z), s.u0))
            if not linear:
                f += lam * ops.conv_apply(ops.rel(z), z)
        da = -vals * a - Psi.T @ f
        return np.concatenate([da, z[-2:]])

    a0 = Psi.T @ (m * state0.z)
    sol = solve_ivp(rhs, (state0.t, state0.t + T), np.concatenate([a0, state0.chi]), method="DOP853",
                    rtol=rtol, atol=atol, t_eval=t_eval)
    if not sol.success:
        raise SolverError(f"Galerkin integration failed: {sol.message}")
    y = sol.y[:, -1]
    return EvolState(z=Psi @ y[:-2], chi=y[-2:], t=float(sol.t[-1])), sol


# ---------------------------------------------------------------------------
# decay report

def decay_metrics(log: EnergyLog, params: Params, thresholds: Thresholds | None = None,
                  transient: float = 0.2, tol: float = 1e-8) -> dict:
    """Monotonicity after the transient, fitted decay rate of E and the gamma check.

    ``transient`` is the fraction of the run ignored for monotonicity and the
    rate fit; ``tol`` the allowed per-step increase relative to E(0).
    """
    if len(log) == 0:
        raise ValidationError("empty energy log")
    a = log.arrays()
    t, E = a["t"], a["E"]
    E0 = E[0]
    if E0 == 0.0:
        rate, mono, decayed = 0.0, True, True
    else:
        start = int(transient * (len(t) - 1))
        tail_t, tail_E = t[start:], E[start:]
        inc = np.diff(tail_E) / E0
        mono = bool(np.all(inc <= tol))
        pos = tail_E > 0
        rate = float(np.polyfit(tail_t[pos], np.log(tail_E[pos]), 1)[0]) if pos.sum() >= 2 else 0.0
        g0 = a["normGrad"][0]
        decayed = bool(a["normGrad"][-1] < 1e-3 * g0) if g0 > 0 else bool(E[-1] < 1e-6 * E0)
    gamma = None
    if thresholds is not None:
        gamma = thresholds.gamma(params.lam)
    return {"decayed": decayed, "eventually_monotone": mono, "rate": rate,
            "gamma": gamma, "gamma_positive": None if gamma is None else bool(gamma > 0),
            "final_normGrad": float(a["normGrad"][-1]), "initial_normGrad": float(a["normGrad"][0]),
            "final_chi": float(a["chi"][-1]), "final_chidot": float(a["chidot"][-1])}
