"""Time-periodic problems solved mode by mode in a Fourier basis.

Two layers live here.

* The linear oscillatory problem with the free-stream Oseen operator: mode
  resolvents, the 2x2 traction matrix K, the resonance matrix
  M = (omega_n^2 - k^2 zeta0^2) I + i k varpi K and the linear periodic solver
  built on them.  Time is scaled to period 2π (zeta = 2π/T); the body trace of
  mode k is i k xi_k - G_k.
* Harmonic balance for the full nonlinear perturbation system about a steady
  state, written as ``zeta B x_tau + K x + lam Q(x) = 0`` with the pencil of
  :mod:`fsihopf.spectral` and Q(x) = C(rel z) z evaluated pseudo-spectrally.

Signals are stored by their coefficients X_k of exp(i k tau) for k >= 0;
the coefficient of -k is the conjugate.
"""

from __future__ import annotations

import csv
import io
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import Mesh, operators, write_snapshot
from .discretization.snapshot import atomic_write_text
from .linalg import Factorized
from .model import Params, SolverError, ValidationError, validate
from .spectral import assemble_linearization, fourier_pairing
from .steady import SteadyState, solve_steady

# ---------------------------------------------------------------------------
# mode resolvents


class _ModeSystem:
    """LU of the mode-k Oseen system on free faces and pressure."""

    def __init__(self, mesh: Mesh, k: int, zeta0: float, lam0: float):
        if k == 0:
            raise ValidationError("mode index k must be nonzero")
        if zeta0 == 0:
            raise ValidationError("zeta0 must be nonzero")
        self.mesh, self.k, self.zeta0, self.lam0 = mesh, k, zeta0, lam0
        ops = operators(mesh)
        self.ops = ops
        nf = mesh.nfree
        e1 = ops.unit_fields[:, 0]
        self.e1 = e1
        # stationary part of the momentum rows: A + lam0 C(-e1)
        Kz = ops.A if lam0 == 0 else (ops.A + lam0 * ops.conv_matrix(-e1)).tocsr()
        self.Kz = Kz
        self.Mz = ops.mass(1.0)
        self.Mz[nf:] = 0.0          # no body inertia inside the fluid rows
        f = slice(0, nf)
        top = (1j * k * zeta0 * sp.diags(self.Mz[f]) + Kz[f, f]).tocsr()
        blocks = [[top, ops.Gp[f, :]], [ops.D[:, f], None]]
        if mesh.outflow == "wall":
            one = sp.csr_matrix(np.ones((mesh.npres, 1)))
            blocks = [[top, ops.Gp[f, :], None], [ops.D[:, f], None, one], [None, one.T, None]]
        self.fac = Factorized(sp.bmat(blocks, format="csc").astype(complex), f"mode {k} resolvent")

    def solve(self, force, bdata):
        """Velocity (coupled, body value bdata) and pressure for momentum source ``force``.

        ``force`` is already integrated over the control volumes (length nfree).
        """
        mesh, ops = self.mesh, self.ops
        nf = mesh.nfree
        bdata = np.asarray(bdata, dtype=complex)
        zb = np.zeros(mesh.nz, dtype=complex)
        zb[nf:] = bdata
        rhs_m = force - (self.Kz @ zb)[:nf]
        rhs_d = -(ops.D @ zb)
        rhs = np.concatenate([rhs_m, rhs_d])
        if mesh.outflow == "wall":
            rhs = np.append(rhs, 0.0)
        x = self.fac.solve(rhs)
        w = zb.copy()
        w[:nf] = x[:nf]
        q = x[nf:nf + mesh.npres]
        return w, q

    def momentum(self, w, q):
        """Full momentum rows (i k zeta0 M_fluid + A + lam0 C) w + Gp q on every z row."""
        return 1j * self.k * self.zeta0 * self.Mz * w + self.Kz @ w + self.ops.Gp @ q

    def traction(self, w, q):
        r = self.Kz @ w + self.ops.Gp @ q
        return r[self.mesh.nfree:]


_SYSTEMS: OrderedDict = OrderedDict()


def _mode_system(mesh, k, zeta0, lam0) -> _ModeSystem:
    key = (id(mesh), int(k), float(zeta0), float(lam0))
    hit = _SYSTEMS.get(key)
    if hit is not None and hit.mesh is mesh:
        _SYSTEMS.move_to_end(key)
        return hit
    sysk = _ModeSystem(mesh, int(k), float(zeta0), float(lam0))
    _SYSTEMS[key] = sysk
    while len(_SYSTEMS) > 48:
        _SYSTEMS.popitem(last=False)
    return sysk


@dataclass
class ModeField:
    k: int
    w: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    residual: float


def mode_resolvent(k: int, zeta0: float, lambda0: float, rhs, bdata, mesh: Mesh) -> ModeField:
    """Solve i k zeta0 w - lambda0 d1 w - div 2D(w) + grad q = rhs, div w = 0, w = bdata on the body.

    ``rhs`` is a complex force density on the coupled space (its body part is
    ignored); ``bdata`` is the body velocity.
    """
    sysk = _mode_system(mesh, k, zeta0, lambda0)
    ops = operators(mesh)
    nf = mesh.nfree
    rhs = np.asarray(rhs, dtype=complex)
    force = ops.fluid_mass * rhs[:nf]
    w, q = sysk.solve(force, bdata)
    r = sysk.momentum(w, q)[:nf] - force
    scale = max(np.linalg.norm(force), np.linalg.norm(sysk.Kz[:, nf:] @ w[nf:]), 1e-300)
    res = float(np.sqrt(np.linalg.norm(r) ** 2 + np.linalg.norm(ops.D @ w) ** 2) / scale)
    return ModeField(k=int(k), w=w, q=q, residual=res)


def mode_energy_identity(mesh: Mesh, mode: ModeField, zeta0: float, lambda0: float, rhs):
    """Both sides of the mode energy identity.

    Left:  i k zeta0 ||w||² + 2||D(w)||² + lambda0 (C(-e1) w, w*)
    Right: (rhs, w*) + conj(bdata) . traction(w, q)
    """
    ops = operators(mesh)
    sysk = _mode_system(mesh, mode.k, zeta0, lambda0)
    w = mode.w
    nf = mesh.nfree
    fl = ops.fluid_mass
    lhs = (1j * mode.k * zeta0 * np.sum(fl * np.abs(w[:nf]) ** 2)
           + np.vdot(w, ops.A @ w)
           + lambda0 * np.vdot(w, ops.conv_apply(-sysk.e1, w)))
    rhs_v = np.asarray(rhs, dtype=complex)
    right = np.sum(fl * rhs_v[:nf] * np.conj(w[:nf])) + np.vdot(w[nf:], sysk.traction(w, mode.q))
    return complex(lhs), complex(right)


@dataclass
class TractionMatrix:
    k: int
    zeta0: float
    lambda0: float
    K: np.ndarray
    basis: list = field(repr=False)

    def hermitian_part(self):
        return 0.5 * (self.K + self.K.conj().T)


def traction_matrix(k: int, zeta0: float, lambda0: float, mesh: Mesh) -> TractionMatrix:
    """K[j, i] = force component j produced by the resolvent with body velocity e_i."""
    sysk = _mode_system(mesh, k, zeta0, lambda0)
    basis = []
    K = np.zeros((2, 2), dtype=complex)
    for i in range(2):
        e = np.zeros(2)
        e[i] = 1.0
        w, q = sysk.solve(np.zeros(mesh.nfree, dtype=complex), e)
        basis.append((w, q))
        K[:, i] = sysk.traction(w, q)
    return TractionMatrix(k=int(k), zeta0=float(zeta0), lambda0=float(lambda0), K=K, basis=basis)


def resolvent_norms(mesh: Mesh, tm: TractionMatrix) -> list[tuple[float, float, float]]:
    """(||h||, ||grad h||, ||Laplacian h||) for each resolvent in the basis."""
    ops = operators(mesh)
    nf = mesh.nfree
    fl = ops.fluid_mass
    out = []
    for w, _ in tm.basis:
        n0 = np.sqrt(np.sum(fl * np.abs(w[:nf]) ** 2))
        n1 = np.linalg.norm(ops.Sg @ w)
        n2 = np.sqrt(np.sum(np.abs((ops.A @ w)[:nf]) ** 2 / fl))
        out.append((float(n0), float(n1), float(n2)))
    return out


@dataclass
class ResonanceMatrices:
    k: int
    K: np.ndarray
    M: np.ndarray
    sigma_min: float
    cond: float


def resonance_matrix(k: int, zeta0: float, params: Params, K) -> ResonanceMatrices:
    """M = (omega_n^2 - k^2 zeta0^2) I + i k varpi K and its extreme singular values."""
    validate(params, allow_zero_varpi=True)
    Kmat = K.K if isinstance(K, TractionMatrix) else np.asarray(K, dtype=complex)
    detune = params.omega_n_sq - (k * zeta0) ** 2
    M = detune * np.eye(2) + 1j * k * params.varpi * Kmat
    s = np.linalg.svd(M, compute_uv=False)
    cond = np.inf if s[-1] == 0 else float(s[0] / s[-1])
    return ResonanceMatrices(k=int(k), K=Kmat, M=M, sigma_min=float(s[-1]), cond=cond)


def resonance_scan(k_range, varpi_range, zeta0: float, params: Params, mesh: Mesh):
    """Rows (k, varpi, sigma_min(M), cond(M), resonant) over the given grid.

    At a resonant k (k^2 zeta0^2 == omega_n^2) the linear law
    sigma_min(M) = varpi sigma_min(K) is asserted.
    """
    ks = [int(k) for k in k_range]
    vps = [float(v) for v in varpi_range]
    if not ks or not vps:
        raise ValidationError("k_range and varpi_range must be nonempty")
    rows = []
    for k in ks:
        tm = traction_matrix(k, zeta0, params.lam, mesh)
        sK = np.linalg.svd(tm.K, compute_uv=False)[-1]
        resonant = (k * zeta0) ** 2 == params.omega_n_sq
        for vp in vps:
            rm = resonance_matrix(k, zeta0, params.replace(varpi=vp), tm)
            if resonant and abs(rm.sigma_min - vp * sK) > 1e-12 * vp * sK:
                raise SolverError(f"resonant law violated at k={k}, varpi={vp}")
            rows.append({"k": k, "varpi": vp, "sigma_min": rm.sigma_min, "cond": rm.cond,
                         "resonant": bool(resonant)})
    return rows


def scan_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "varpi", "sigma_min", "cond", "resonant"])
    for r in rows:
        w.writerow([r["k"], repr(r["varpi"]), repr(r["sigma_min"]), repr(r["cond"]), int(r["resonant"])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# linear periodic problem


@dataclass
class Forcing:
    """Fourier data of (f, F, G) for modes k >= 1 (mean must be zero).

    ``f[k]`` is a coupled force density (body part ignored), ``F[k]`` and
    ``G[k]`` are 2-vectors; missing entries mean zero.
    """
    f: dict = field(default_factory=dict)
    F: dict = field(default_factory=dict)
    G: dict = field(default_factory=dict)

    def modes(self):
        ks = set(self.f) | set(self.F) | set(self.G)
        if 0 in ks:
            raise ValidationError("forcing must have zero mean: mode k=0 is not allowed")
        if any(k < 0 for k in ks):
            raise ValidationError("give forcing for k >= 1 only; negative modes are conjugates")
        return sorted(ks)


@dataclass
class ModeSolution:
    k: int
    w: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    xi: np.ndarray
    residual: float


@dataclass
class PeriodicLinearSolution:
    zeta0: float
    params: Params
    mesh: Mesh = field(repr=False)
    modes: dict = field(repr=False)

    def sample(self, tau):
        """(w, q, xi, xi_tau, xi_tautau) at time tau (real signals)."""
        mesh = self.mesh
        w = np.zeros(mesh.nz)
        q = np.zeros(mesh.npres)
        xi = np.zeros(2)
        xd = np.zeros(2)
        xdd = np.zeros(2)
        for k, m in self.modes.items():
            e = np.exp(1j * k * tau)
            w += 2 * (m.w * e).real
            q += 2 * (m.q * e).real
            xi += 2 * (m.xi * e).real
            xd += 2 * (1j * k * m.xi * e).real
            xdd += 2 * (-(k ** 2) * m.xi * e).real
        return w, q, xi, xd, xdd


def solve_periodic_linear(forcing: Forcing, zeta0: float, params: Params, mesh: Mesh,
                          K_trunc: int | None = None) -> PeriodicLinearSolution:
    """Mode-by-mode solve of the forced linear oscillatory problem.

    Mode k: w_k = w_part + sum_i i k xi_ki h^(i), with w_part carrying f_k and
    the trace -G_k, and M xi_k = F_k - varpi traction(w_part).
    """
    validate(params)
    ks = forcing.modes()
    if K_trunc is not None:
        ks = [k for k in ks if k <= K_trunc]
    ops = operators(mesh)
    nf = mesh.nfree
    out = {}
    for k in ks:
        sysk = _mode_system(mesh, k, zeta0, params.lam)
        tm = traction_matrix(k, zeta0, params.lam, mesh)
        fk = np.asarray(forcing.f.get(k, np.zeros(mesh.nz)), dtype=complex)
        Fk = np.asarray(forcing.F.get(k, np.zeros(2)), dtype=complex)
        Gk = np.asarray(forcing.G.get(k, np.zeros(2)), dtype=complex)
        force = ops.fluid_mass * fk[:nf]
        wp, qp = sysk.solve(force, -Gk)
        rm = resonance_matrix(k, zeta0, params, tm)
        xi = np.linalg.solve(rm.M, Fk - params.varpi * sysk.traction(wp, qp))
        w = wp + sum(1j * k * xi[i] * tm.basis[i][0] for i in range(2))
        q = qp + sum(1j * k * xi[i] * tm.basis[i][1] for i in range(2))
        # certificate on the assembled mode equations
        r1 = sysk.momentum(w, q)[:nf] - force
        r2 = ops.D @ w
        r3 = w[nf:] - (1j * k * xi - Gk)
        r4 = (params.omega_n_sq - (k * zeta0) ** 2) * xi + params.varpi * sysk.traction(w, q) - Fk
        scale = max(np.linalg.norm(force), np.linalg.norm(Fk), np.linalg.norm(Gk), 1e-300)
        res = float(np.sqrt(sum(np.linalg.norm(r) ** 2 for r in (r1, r2, r3, r4))) / scale)
        out[k] = ModeSolution(k=k, w=w, q=q, xi=xi, residual=res)
    return PeriodicLinearSolution(zeta0=float(zeta0), params=params, mesh=mesh, modes=out)


def time_domain_residual(sol: PeriodicLinearSolution, forcing: Forcing, n_samples: int = 64):
    """Max over sample times of the residual of the time-domain equations.

    Returns (relative momentum/trace residual, relative ODE residual).
    """
    mesh, pr, z0 = sol.mesh, sol.params, sol.zeta0
    ops = operators(mesh)
    nf = mesh.nfree
    e1 = ops.unit_fields[:, 0]
    Kz = ops.A if pr.lam == 0 else (ops.A + pr.lam * ops.conv_matrix(-e1)).tocsr()
    fl = ops.fluid_mass

    def data(tau):
        f = np.zeros(mesh.nz)
        F = np.zeros(2)
        G = np.zeros(2)
        for k, v in forcing.f.items():
            f += 2 * (np.asarray(v) * np.exp(1j * k * tau)).real
        for k, v in forcing.F.items():
            F += 2 * (np.asarray(v) * np.exp(1j * k * tau)).real
        for k, v in forcing.G.items():
            G += 2 * (np.asarray(v) * np.exp(1j * k * tau)).real
        return f, F, G

    def w_tau(tau):
        out = np.zeros(mesh.nz)
        for k, m in sol.modes.items():
            out += 2 * (1j * k * m.w * np.exp(1j * k * tau)).real
        return out

    worst_m = worst_o = 0.0
    for tau in np.linspace(0, 2 * np.pi, n_samples, endpoint=False):
        w, q, xi, xd, xdd = sol.sample(tau)
        f, F, G = data(tau)
        mom = (z0 * fl * w_tau(tau)[:nf] + (Kz @ w + ops.Gp @ q)[:nf] - fl * f[:nf])
        scale = np.linalg.norm((Kz @ w)[:nf]) + np.linalg.norm(fl * f[:nf]) + 1e-300
        trace = np.linalg.norm(w[nf:] - (xd - G)) / (np.linalg.norm(xd) + np.linalg.norm(G) + 1e-300)
        div = np.linalg.norm(ops.D @ w) * mesh.h / (np.linalg.norm(w) + 1e-300)
        worst_m = max(worst_m, np.linalg.norm(mom) / scale, trace, div)
        force = (Kz @ w + ops.Gp @ q)[nf:]
        ode = z0 ** 2 * xdd + pr.omega_n_sq * xi + pr.varpi * force - F
        oscale = pr.omega_n_sq * np.linalg.norm(xi) + np.linalg.norm(F) + 1e-300
        worst_o = max(worst_o, np.linalg.norm(ode) / oscale)
    return float(worst_m), float(worst_o)


def decay_slope(sol: PeriodicLinearSolution, forcing: Forcing):
    """Least-squares slope of log(|xi_k| / |F_k|) against log k."""
    ks = np.array(sorted(sol.modes))
    ratio = np.array([np.linalg.norm(sol.modes[k].xi) / np.linalg.norm(forcing.F[k]) for k in ks])
    slope, _ = np.polyfit(np.log(ks), np.log(ratio), 1)
    return float(slope), ratio


def save_modes(directory, sol: PeriodicLinearSolution) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"zeta0": sol.zeta0, "lambda": sol.params.lam, "omega_n_sq": sol.params.omega_n_sq,
                "varpi": sol.params.varpi, "modes": []}
    for k, m in sorted(sol.modes.items()):
        write_snapshot(d / f"w_{k}.bin", sol.mesh, m.w, {"k": k, "field": "w"})
        write_snapshot(d / f"q_{k}.bin", sol.mesh, m.q, {"k": k, "field": "q"})
        manifest["modes"].append({"k": k, "norm_w": float(np.linalg.norm(m.w)),
                                  "xi": [[float(v.real), float(v.imag)] for v in m.xi],
                                  "residual": m.residual})
    atomic_write_text(d / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# ---------------------------------------------------------------------------
# harmonic balance for the nonlinear perturbation system


class HarmonicSystem:
    """Truncated Fourier form of zeta B x_tau + K x + lam Q(x) = 0 about ``state``."""

    def __init__(self, state: SteadyState, K_trunc: int, n_time: int | None = None, L=None):
        if K_trunc < 1:
            raise ValidationError("K_trunc must be >= 1")
        self.state = state
        self.L = L if L is not None else assemble_linearization(state)
        self.K = K_trunc
        nt = max(3 * K_trunc + 1, n_time or 0)
        self.nt = int(2 ** int(np.ceil(np.log2(nt))))
        self.ops = operators(state.mesh)
        self.n = self.L.n
        self.nz = state.mesh.nz
        self.lam = self.L.lam

    # -- packing -----------------------------------------------------------
    @property
    def size(self) -> int:
        return self.n * (2 * self.K + 1)

    def pack(self, X):
        parts = [X[0].real]
        for k in range(1, self.K + 1):
            parts += [X[k].real, X[k].imag]
        return np.concatenate(parts)

    def unpack(self, v):
        n = self.n
        X = np.zeros((self.K + 1, n), dtype=complex)
        X[0] = v[:n]
        for k in range(1, self.K + 1):
            a = n * (2 * k - 1)
            X[k] = v[a:a + n] + 1j * v[a + n:a + 2 * n]
        return X

    # -- time samples --------------------------------------------------------
    def to_time(self, Zk):
        """Real samples (nt, m) of the signal with coefficients Zk[0..K]."""
        spec = np.zeros((self.nt // 2 + 1, Zk.shape[1]), dtype=complex)
        spec[:self.K + 1] = Zk
        return np.fft.irfft(spec * self.nt, n=self.nt, axis=0)

    def to_modes(self, samples):
        return np.fft.rfft(samples, axis=0)[:self.K + 1] / self.nt

    def quad(self, X):
        """Coefficients of Q(x) = C(rel z) z on the z rows, modes 0..K."""
        zt = self.to_time(X[:, :self.nz])
        qt = np.array([self.ops.conv_apply(self.ops.rel(z), z) for z in zt])
        out = np.zeros((self.K + 1, self.n), dtype=complex)
        out[:, :self.nz] = self.to_modes(qt)
        out[0] = out[0].real
        return out

    def dquad(self, X, dX):
        zt = self.to_time(X[:, :self.nz])
        dt = self.to_time(dX[:, :self.nz])
        ops = self.ops
        qt = np.array([ops.conv_apply(ops.rel(d), z) + ops.conv_apply(ops.rel(z), d) for z, d in zip(zt, dt)])
        out = np.zeros((self.K + 1, self.n), dtype=complex)
        out[:, :self.nz] = self.to_modes(qt)
        out[0] = out[0].real
        return out

    # -- residual ------------------------------------------------------------
    def linear(self, X, zeta):
        Bd = self.L.Bdiag
        R = np.array([self.L.K @ X[k] for k in range(self.K + 1)], dtype=complex)
        for k in range(1, self.K + 1):
            R[k] += 1j * k * zeta * Bd * X[k]
        return R

    def residual(self, X, zeta):
        R = self.linear(X, zeta)
        if self.lam != 0.0:
            R += self.lam * self.quad(X)
        return R

    def jac_apply(self, X, zeta, dX, dzeta=0.0):
        R = self.linear(dX, zeta)
        if self.lam != 0.0:
            R += self.lam * self.dquad(X, dX)
        if dzeta != 0.0:
            Bd = self.L.Bdiag
            for k in range(1, self.K + 1):
                R[k] += 1j * k * dzeta * Bd * X[k]
        return R

    def norm(self, X) -> float:
        """RMS energy norm of the periodic signal."""
        return float(np.sqrt(max(fourier_pairing(self.L.Bdiag, list(X), list(X)), 0.0) / (2 * np.pi)))

    def residual_norm(self, R) -> float:
        b = self.L.Bdiag
        w = np.where(b > 0, 1.0 / np.where(b > 0, b, 1.0), self.state.mesh.h ** 2)
        return float(np.sqrt(np.sum(w * np.abs(R[0]) ** 2)
                             + 2 * sum(np.sum(w * np.abs(R[k]) ** 2) for k in range(1, self.K + 1))))

    def block_preconditioner(self, zeta):
        """Per-mode LU of (i k zeta B + K); returns a function on packed vectors."""
        facs = [Factorized(self.L.K.tocsc(), "mode 0 block")]
        for k in range(1, self.K + 1):
            facs.append(Factorized((self.L.K + 1j * k * zeta * self.L.B).tocsc(), f"mode {k} block"))

        def apply(v):
            R = self.unpack(v)
            X = np.zeros_like(R)
            X[0] = facs[0].solve(R[0].real)
            for k in range(1, self.K + 1):
                X[k] = facs[k].solve(R[k])
            return self.pack(X)
        return apply

    def sample_signal(self, X, taus):
        out = []
        for t in taus:
            v = X[0].real.copy()
            for k in range(1, self.K + 1):
                v += 2 * (X[k] * np.exp(1j * k * t)).real
            out.append(v)
        return np.array(out)


def full_time_residual(hs: HarmonicSystem, X, zeta, n_samples: int = 64) -> tuple[float, float]:
    """Residual of the untruncated time-domain equations at sample times.

    Uses the exact tau-derivative of the trigonometric polynomial and the
    quadratic term evaluated pointwise (so truncation and aliasing show up).
    Returns (max residual, max size of K x) in the energy-dual norm.
    """
    ops = hs.ops
    K = hs.L.K
    Bd = hs.L.Bdiag
    b = Bd
    w = np.where(b > 0, 1.0 / np.where(b > 0, b, 1.0), hs.state.mesh.h ** 2)
    worst = 0.0
    scale = 0.0
    for t in np.linspace(0, 2 * np.pi, n_samples, endpoint=False):
        x = X[0].real.copy()
        xt = np.zeros(hs.n)
        for k in range(1, hs.K + 1):
            e = np.exp(1j * k * t)
            x += 2 * (X[k] * e).real
            xt += 2 * (1j * k * X[k] * e).real
        z = x[:hs.nz]
        r = zeta * Bd * xt + K @ x
        if hs.lam != 0.0:
            r[:hs.nz] += hs.lam * ops.conv_apply(ops.rel(z), z)
        worst = max(worst, float(np.sqrt(np.sum(w * r ** 2))))
        scale = max(scale, float(np.sqrt(np.sum(w * (K @ x) ** 2))))
    return worst, scale


@dataclass
class HarmonicResult:
    X: np.ndarray = field(repr=False)
    zeta: float
    residual: float
    norm: float
    iterations: int
    trivial: bool
    history: list = field(default_factory=list)


def newton_harmonic(hs: HarmonicSystem, X0, zeta, tol: float = 1e-10, max_iter: int = 30,
                    free_zeta: bool = False, phase_ref=None, trivial_tol: float = 1e-8) -> HarmonicResult:
    """Newton-GMRES on the truncated system.

    With ``free_zeta`` the frequency is an unknown and the phase is fixed by
    Im(phase_ref^H B X_1) = 0.
    """
    X = np.array(X0, dtype=complex)
    X[0] = X[0].real
    zeta = float(zeta)
    pre = hs.block_preconditioner(zeta)
    Bd = hs.L.Bdiag
    ref = None
    if free_zeta:
        ref = np.asarray(phase_ref if phase_ref is not None else X[1], dtype=complex)
    N = hs.size + (1 if free_zeta else 0)
    history = []
    it = 0
    while True:
        R = hs.residual(X, zeta)
        res = hs.residual_norm(R)
        history.append(res)
        if not np.isfinite(res):
            raise SolverError("harmonic balance diverged", res)
        if res < tol or it >= max_iter:
            break
        rv = hs.pack(R)
        if free_zeta:
            rv = np.append(rv, np.vdot(ref, Bd * X[1]).imag)

        def mv(v):
            if free_zeta:
                dX, dz = hs.unpack(v[:-1]), v[-1]
            else:
                dX, dz = hs.unpack(v), 0.0
            out = hs.pack(hs.jac_apply(X, zeta, dX, dz))
            if free_zeta:
                out = np.append(out, np.vdot(ref, Bd * dX[1]).imag)
            return out

        def pv(v):
            if free_zeta:
                return np.append(pre(v[:-1]), v[-1])
            return pre(v)

        A = spla.LinearOperator((N, N), matvec=mv, dtype=float)
        P = spla.LinearOperator((N, N), matvec=pv, dtype=float)
        dx, info = spla.gmres(A, -rv, M=P, rtol=min(1e-3, 0.1 * res) if res > 0 else 1e-12,
                              atol=0.0, restart=60, maxiter=20)
        if free_zeta:
            X = X + hs.unpack(dx[:-1])
            zeta += dx[-1]
        else:
            X = X + hs.unpack(dx)
        X[0] = X[0].real
        it += 1
    if res >= tol:
        raise SolverError(f"harmonic balance Newton stagnated at residual {res:.3e}", res)
    nrm = hs.norm(X)
    return HarmonicResult(X=X, zeta=zeta, residual=res, norm=nrm, iterations=it,
                          trivial=nrm < trivial_tol, history=history)


def solve_periodic_nonlinear(lam: float, zeta_guess: float, params: Params, mesh: Mesh, K_trunc: int = 8,
                             init=None, state: SteadyState | None = None, free_zeta: bool = False,
                             phase_ref=None, tol: float = 1e-10, max_iter: int = 30) -> HarmonicResult:
    """Periodic solutions of the perturbation system about the steady state at ``lam``.

    ``init`` is an array of mode coefficients (K_trunc+1, n) or None (zero).
    Below the energy threshold every start converges to the zero solution.
    """
    if lam < 0:
        raise ValidationError("lambda must be nonnegative")
    pr = params.replace(lam=lam)
    if state is None or state.params != pr:
        state = solve_steady(pr, mesh, initial_guess=state)
    hs = HarmonicSystem(state, K_trunc)
    X0 = np.zeros((K_trunc + 1, hs.n), dtype=complex) if init is None else np.asarray(init)
    return newton_harmonic(hs, X0, zeta_guess, tol=tol, max_iter=max_iter, free_zeta=free_zeta,
                           phase_ref=phase_ref)


def random_modes(hs: HarmonicSystem, rng, amplitude: float):
    """Random solenoidal small start with given RMS energy norm (pressure zero)."""
    ops = hs.ops
    vp = hs.L.varpi
    X = np.zeros((hs.K + 1, hs.n), dtype=complex)
    for k in range(hs.K + 1):
        a = ops.project(rng.standard_normal(hs.nz), vp)[0]
        b = ops.project(rng.standard_normal(hs.nz), vp)[0] if k else 0.0
        X[k, :hs.nz] = a + 1j * b
        if hs.L.spring:
            X[k, hs.L.xis] = rng.standard_normal(2) + (1j * rng.standard_normal(2) if k else 0.0)
    X[0] = X[0].real
    return X * (amplitude / hs.norm(X))
