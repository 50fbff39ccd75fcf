"""Linearization about a steady state, its spectrum and the adjoint frame.

Perturbations are written as x = (z, xi, p): coupled velocity z, body
displacement xi and pressure p.  With c = omega_n^2 / varpi the linear
dynamics read ``B dx/dt + K x = 0`` where

    K = [[A + lam N,  c Pb^T,  Gp],
         [-c Pb,      0,       0 ],
         [D,          0,       0 ]],      B = diag(M, c I, 0),

and N = C(V) + J(u0) Rrel is the convection linearized about u0.  Eigenpairs
solve ``K x = nu B x``; the mode behaves like exp(-nu t), so Re nu > 0 is
decay.  The energy zᵀMz + c|xi|² is the natural metric for this pencil.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import operators
from .linalg import Factorized
from .model import SolverError, ValidationError
from .steady import SteadyState

SIMPLICITY_GAP = 1e-6


@dataclass
class LinearizedOperator:
    state: SteadyState = field(repr=False)
    lam: float
    omega_n_sq: float
    varpi: float
    spring: bool
    K: sp.csr_matrix = field(repr=False)
    Bdiag: np.ndarray = field(repr=False)

    @property
    def mesh(self):
        return self.state.mesh

    @property
    def nz(self) -> int:
        return self.mesh.nz

    @property
    def nxi(self) -> int:
        return 2 if self.spring else 0

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def c(self) -> float:
        return self.omega_n_sq / self.varpi

    @property
    def gauge(self) -> bool:
        return self.mesh.outflow == "wall"

    # slices into x
    @property
    def zs(self):
        return slice(0, self.nz)

    @property
    def xis(self):
        return slice(self.nz, self.nz + self.nxi)

    @property
    def ps(self):
        return slice(self.nz + self.nxi, self.nz + self.nxi + self.mesh.npres)

    @property
    def B(self) -> sp.csr_matrix:
        return sp.diags(self.Bdiag).tocsr()

    def pack(self, z, xi=None, p=None):
        x = np.zeros(self.n, dtype=np.result_type(z, xi if xi is not None else 0.0,
                                                  p if p is not None else 0.0))
        x[self.zs] = z
        if xi is not None and self.spring:
            x[self.xis] = xi
        if p is not None:
            x[self.ps] = p
        return x

    def apply(self, x):
        """K x without the assembled matrix (convection applied matrix-free)."""
        ops = operators(self.mesh)
        z = x[self.zs]
        out = np.zeros(self.n, dtype=x.dtype)
        p = x[self.ps]
        rz = ops.A @ z + ops.Gp @ p
        if self.lam != 0.0:
            V = self.state.transport()
            rz = rz + self.lam * (ops.conv_apply(V, z) + ops.conv_apply(ops.rel(z), self.state.u0))
        if self.spring:
            xi = x[self.xis]
            rz[self.mesh.nfree:self.mesh.nfree + 2] += self.c * xi
            out[self.xis] = -self.c * ops.body(z)
        out[self.zs] = rz
        out[self.ps] = ops.D @ z
        if self.gauge:
            out[self.ps] += x[-1]
            out[-1] = np.sum(p)
        return out

    def residual(self, nu, x) -> float:
        """||B^-1 (K x - nu B x)|| in the energy metric over ||x|| in the same metric."""
        r = self.K @ x - nu * (self.Bdiag * x)
        b = self.Bdiag
        w = np.where(b > 0, 1.0 / np.where(b > 0, b, 1.0), self.mesh.h ** 2)
        num = np.sqrt(np.sum(w * np.abs(r) ** 2))
        den = np.sqrt(np.sum(b * np.abs(x) ** 2))
        return float(num / den)

    def energy_apply(self, W):
        """The operator L on W = (z, xi) with D z = 0, pressure eliminated by the projection."""
        ops = operators(self.mesh)
        x = self.pack(W[:self.nz], W[self.nz:] if self.spring else None)
        r = self.K @ x
        out = np.empty(self.nz + self.nxi, dtype=r.dtype)
        out[:self.nz] = ops.project(r[self.zs] / ops.mass(self.varpi), self.varpi)[0]
        out[self.nz:] = r[self.xis] / self.c
        return out

    def energy_adjoint_apply(self, W):
        """Adjoint of ``energy_apply`` in the energy metric."""
        ops = operators(self.mesh)
        x = self.pack(W[:self.nz], W[self.nz:] if self.spring else None)
        r = self.K.T @ x
        out = np.empty(self.nz + self.nxi, dtype=r.dtype)
        out[:self.nz] = ops.project(r[self.zs] / ops.mass(self.varpi), self.varpi)[0]
        out[self.nz:] = r[self.xis] / self.c
        return out

    def energy_inner(self, U, W):
        ops = operators(self.mesh)
        m = ops.mass(self.varpi)
        return np.sum(m * U[:self.nz] * W[:self.nz]) + self.c * np.sum(U[self.nz:] * W[self.nz:])


def _convection_linearization(state: SteadyState):
    ops = operators(state.mesh)
    return (ops.conv_matrix(state.transport()) + ops.conv_jacobian(state.u0) @ ops.Rrel).tocsr()


def _assemble(state: SteadyState, zz_block, spring: bool, omega_n_sq: float, varpi: float):
    mesh = state.mesh
    ops = operators(mesh)
    nz, npres = mesh.nz, mesh.npres
    c = omega_n_sq / varpi
    blocks = [[zz_block, None, ops.Gp], [None, None, None], [ops.D, None, None]]
    if spring:
        blocks[0][1] = c * ops.Pb.T
        blocks[1][0] = -c * ops.Pb
        blocks[1][1] = sp.csr_matrix((2, 2))
    else:
        blocks = [[blocks[0][0], blocks[0][2]], [blocks[2][0], blocks[2][2]]]
    if mesh.outflow == "wall":
        one = sp.csr_matrix(np.ones((npres, 1)))
        blocks = [row + [None] for row in blocks]
        blocks[-1][-1] = one
        blocks.append([None] * (len(blocks[0]) - 2) + [one.T, None])
    K = sp.bmat(blocks, format="csr")
    Bdiag = np.zeros(K.shape[0])
    Bdiag[:nz] = ops.mass(varpi)
    if spring:
        Bdiag[nz:nz + 2] = c
    return K, Bdiag


def assemble_linearization(state: SteadyState, params=None, spring: bool = True) -> LinearizedOperator:
    """Linearized coupled operator about ``state``.

    ``spring=False`` drops the displacement (free body without spring); with
    u0 = 0 and lam = 0 that is the symmetric Stokes pencil (A, M).
    """
    pr = params or state.params
    ops = operators(state.mesh)
    zz = ops.A
    if pr.lam != 0.0:
        zz = (ops.A + pr.lam * _convection_linearization(state)).tocsr()
    K, Bdiag = _assemble(state, zz, spring, pr.omega_n_sq, pr.varpi)
    return LinearizedOperator(state=state, lam=pr.lam, omega_n_sq=pr.omega_n_sq, varpi=pr.varpi,
                              spring=spring, K=K, Bdiag=Bdiag)


def assemble_S011(state: SteadyState, params=None, spring: bool = True) -> LinearizedOperator:
    """Derivative of K with respect to lam along the steady branch.

    Only the velocity block is nonzero: N + lam (C(E u0') + J(u0') Rrel),
    with u0' the stored sensitivity.
    """
    if state.du0_dlambda is None:
        raise ValidationError("state has no sensitivity du0/dlambda; solve with sensitivity=True")
    pr = params or state.params
    ops = operators(state.mesh)
    du = state.du0_dlambda
    S = _convection_linearization(state)
    if pr.lam != 0.0:
        S = S + pr.lam * (ops.conv_matrix(ops.ext(du)) + ops.conv_jacobian(du) @ ops.Rrel)
    mesh = state.mesh
    n = mesh.nz + (2 if spring else 0) + mesh.npres + (1 if mesh.outflow == "wall" else 0)
    full = sp.bmat([[S.tocsr(), None], [None, sp.csr_matrix((n - mesh.nz, n - mesh.nz))]], format="csr")
    c = pr.omega_n_sq / pr.varpi
    Bdiag = np.zeros(n)
    Bdiag[:mesh.nz] = ops.mass(pr.varpi)
    if spring:
        Bdiag[mesh.nz:mesh.nz + 2] = c
    return LinearizedOperator(state=state, lam=pr.lam, omega_n_sq=pr.omega_n_sq, varpi=pr.varpi,
                              spring=spring, K=full, Bdiag=Bdiag)


# ---------------------------------------------------------------------------
# eigenpairs

@dataclass
class EigenPair:
    nu: complex
    x: np.ndarray = field(repr=False)
    residual: float

    @property
    def growth(self) -> float:
        """Growth rate -Re nu (positive means unstable)."""
        return -self.nu.real


def _normalize(L: LinearizedOperator, x):
    x = x / np.sqrt(np.sum(L.Bdiag * np.abs(x) ** 2))
    # fix the phase on the largest energy component
    k = int(np.argmax(L.Bdiag * np.abs(x) ** 2))
    return x * (abs(x[k]) / x[k])


def eigs(L: LinearizedOperator, shift: complex, n: int = 6, tol: float = 0.0,
         max_retries: int = 3, left: bool = False) -> list[EigenPair]:
    """The ``n`` eigenvalues of K x = nu B x nearest ``shift`` (shift-invert Arnoldi).

    ``left=True`` computes left eigenvectors y (K^T y = nu B y) instead.
    """
    N = L.n
    if n < 1 or n > N - 2:
        raise ValidationError(f"n must be in [1, {N - 2}]")
    Kop = L.K.T.tocsr() if left else L.K
    rng = np.random.default_rng(2718)
    s = complex(shift)
    last = None
    for attempt in range(max_retries + 1):
        try:
            fac = Factorized((Kop - s * L.B).astype(complex), "shift-invert factorization")
            op = spla.LinearOperator((N, N), matvec=lambda v: fac.solve(L.Bdiag * v), dtype=complex)
            v0 = fac.solve(L.Bdiag * (rng.standard_normal(N) + 0j))
            theta, vecs = spla.eigs(op, k=n, which="LM", tol=tol, v0=v0,
                                    ncv=min(N - 1, max(2 * n + 1, 20)), maxiter=5000)
            break
        except (SolverError, spla.ArpackNoConvergence, RuntimeError) as exc:
            last = exc
            scale = max(1.0, abs(s))
            s = s + 1e-7 * scale * (1 + 1j) * (attempt + 1)
    else:
        raise SolverError(f"eigenvalue iteration failed near shift {shift}: {last}")
    out = []
    for t, v in zip(theta, vecs.T):
        nu = s + 1.0 / t
        v = _normalize(L, v)
        out.append(EigenPair(nu=complex(nu), x=v, residual=_residual(L, nu, v, left)))
    out.sort(key=lambda e: abs(e.nu - shift))
    return out


def _residual(L, nu, x, left=False):
    if not left:
        return L.residual(nu, x)
    r = L.K.T @ x - nu * (L.Bdiag * x)
    b = L.Bdiag
    w = np.where(b > 0, 1.0 / np.where(b > 0, b, 1.0), L.mesh.h ** 2)
    return float(np.sqrt(np.sum(w * np.abs(r) ** 2)) / np.sqrt(np.sum(b * np.abs(x) ** 2)))


def dense_spectrum(L: LinearizedOperator) -> np.ndarray:
    """All finite eigenvalues of the pencil by the dense QZ algorithm (small meshes)."""
    from scipy.linalg import eig
    w = eig(L.K.toarray(), np.diag(L.Bdiag), right=False)
    return w[np.isfinite(w)]


def rightmost(L: LinearizedOperator, shifts, n: int = 6) -> EigenPair:
    """Least stable eigenpair (smallest Re nu) found around the given shifts."""
    best = None
    for s in shifts:
        for e in eigs(L, s, n):
            if best is None or e.nu.real < best.nu.real:
                best = e
    return best


# ---------------------------------------------------------------------------
# adjoint frame

def pair(L: LinearizedOperator, a, b):
    """Bilinear energy pairing a^T B b (no complex conjugation)."""
    return np.sum(a * L.Bdiag * b)


def fourier_pairing(Bdiag, a_modes, b_modes):
    """(a|b) = integral over one period 2π of a(τ)ᵀ B b(τ) dτ for real periodic signals.

    ``a_modes[k]`` is the coefficient of exp(i k τ) for k = 0..K; negative
    modes are the conjugates.
    """
    total = np.sum(Bdiag * a_modes[0] * np.conj(b_modes[0])).real
    for k in range(1, min(len(a_modes), len(b_modes))):
        total += 2.0 * np.sum(Bdiag * a_modes[k] * np.conj(b_modes[k])).real
    return 2 * np.pi * total


def tau_derivative(modes):
    return [1j * k * m for k, m in enumerate(modes)]


@dataclass
class AdjointFrame:
    L: LinearizedOperator = field(repr=False)
    nu0: complex
    v0: np.ndarray = field(repr=False)
    v0_dag: np.ndarray = field(repr=False)
    gap: float
    residual: float
    adjoint_residual: float

    @property
    def zeta0(self) -> float:
        return float(self.nu0.imag)

    # mode-1 Fourier coefficients (exp(i τ)) of the real frame, mode 0 empty
    def modes(self, which: str):
        z = np.zeros_like(self.v0)
        table = {
            "v1": np.conj(self.v0) / 2,           # Re[v0 e^{-iτ}]
            "v2": 1j * np.conj(self.v0) / 2,      # Im[v0 e^{-iτ}]
            "v1_dag": self.v0_dag / 2,            # Re[v0† e^{iτ}]
            "v2_dag": 1j * self.v0_dag / 2,       # -Im[v0† e^{iτ}]
        }
        return [z, table[which]]

    def field(self, which: str, tau: float):
        m = self.modes(which)[1]
        return 2.0 * (m * np.exp(1j * tau)).real

    def pairing(self, a: str, b: str, derivative: bool = False):
        am = self.modes(a)
        if derivative:
            am = tau_derivative(am)
        return fourier_pairing(self.L.Bdiag, am, self.modes(b))

    def table(self) -> dict:
        t = {f"({a}|{b})": self.pairing(a, b) for a in ("v1", "v2") for b in ("v1_dag", "v2_dag")}
        t["((v1)_tau|v1_dag)"] = self.pairing("v1", "v1_dag", derivative=True)
        t["((v1)_tau|v2_dag)"] = self.pairing("v1", "v2_dag", derivative=True)
        t["<v0_dag,v0>"] = pair(self.L, self.v0_dag, self.v0)
        return t


def adjoint_frame(L: LinearizedOperator, ep: EigenPair, n_check: int = 6) -> AdjointFrame:
    """Left eigenvector at the same eigenvalue, scaled so that <v0†, v0> = 1/π."""
    near = eigs(L, ep.nu, n_check)
    others = [abs(e.nu - ep.nu) for e in near if abs(e.nu - ep.nu) > 1e-9 * max(1.0, abs(ep.nu))]
    gap = min(others) if others else np.inf
    if gap <= SIMPLICITY_GAP:
        raise SolverError(f"eigenvalue {ep.nu} is not separated from its neighbours (gap {gap:.2e})")
    left = eigs(L, ep.nu, 1, left=True)[0]
    if abs(left.nu - ep.nu) > 1e-6 * max(1.0, abs(ep.nu)):
        raise SolverError("adjoint eigenvalue does not match the direct one")
    y = left.x
    d = pair(L, y, ep.x)
    if abs(d) < 1e-10 * np.sqrt(np.sum(L.Bdiag * abs(y) ** 2)):
        raise SolverError("defective eigenvalue: left and right eigenvectors are B-orthogonal")
    y = y / (np.pi * d)
    return AdjointFrame(L=L, nu0=ep.nu, v0=ep.x, v0_dag=y, gap=float(gap), residual=ep.residual,
                        adjoint_residual=left.residual)


@dataclass
class CrossingSpeed:
    nu_prime: complex            # <v0†, S v0> / <v0†, v0>, the eigenvalue derivative
    bracket: complex             # <v0†, S v0> with <v0†, v0> = 1/π
    real_part_fourier: float     # π^-1 (S v1 | v1†)

    def as_dict(self):
        return {"nu_prime": [self.nu_prime.real, self.nu_prime.imag],
                "bracket": [self.bracket.real, self.bracket.imag],
                "real_part_fourier": self.real_part_fourier,
                "growth_speed": -self.nu_prime.real}


def crossing_speed(frame: AdjointFrame, S: LinearizedOperator) -> CrossingSpeed:
    """d nu / d lam at the frame's eigenvalue, plus the two bracket evaluations."""
    L = frame.L
    Sv = S.K @ frame.v0
    bracket = np.sum(frame.v0_dag * Sv)
    nu_prime = bracket / pair(L, frame.v0_dag, frame.v0)
    # (S v1 | v1†) by quadrature over one period: S acts on real samples of v1(τ),
    # and B^-1 S v1 paired in the B metric is the plain dot product on B's support
    n = 16
    four = 0.0
    for tau in 2 * np.pi * np.arange(n) / n:
        Sv1 = S.K @ frame.field("v1", tau)
        four += np.sum(np.where(L.Bdiag > 0, Sv1 * frame.field("v1_dag", tau), 0.0))
    four *= 2 * np.pi / n / np.pi
    return CrossingSpeed(nu_prime=complex(nu_prime), bracket=complex(bracket), real_part_fourier=float(four))


# ---------------------------------------------------------------------------
# (H2') report

@dataclass
class H2Report:
    ok: bool
    nu0: complex
    simplicity_margin: float
    distances: dict
    tol: float

    def as_dict(self):
        return {"ok": bool(self.ok), "nu0": [self.nu0.real, self.nu0.imag],
                "simplicity_margin": self.simplicity_margin,
                "distances": {str(k): v for k, v in self.distances.items()}, "tol": self.tol}


def check_H2prime(spectrum, nu0: complex, k_max: int, tol: float = SIMPLICITY_GAP) -> H2Report:
    """Simplicity of nu0 and distance of every i k zeta0 (2 <= k <= k_max) to the spectrum.

    zeta0 = Im nu0; at a crossing nu0 = i zeta0.

    ``spectrum`` is an iterable of eigenvalues (or EigenPairs), which should
    cover the neighbourhoods of i k zeta0.
    """
    vals = np.array([e.nu if isinstance(e, EigenPair) else e for e in spectrum], dtype=complex)
    nu0 = complex(nu0)
    d0 = np.abs(vals - nu0)
    own = d0 <= max(tol, 1e-9 * max(1.0, abs(nu0)))
    if own.sum() > 1:
        margin = 0.0
    else:
        margin = float(np.min(d0[~own])) if np.any(~own) else np.inf
    dist = {}
    for k in range(2, k_max + 1):
        dist[k] = float(np.min(np.abs(vals - 1j * k * nu0.imag))) if len(vals) else np.inf
    ok = margin > tol and all(v > tol for v in dist.values())
    return H2Report(ok=ok, nu0=nu0, simplicity_margin=margin, distances=dist, tol=tol)


def harmonic_spectrum(L: LinearizedOperator, zeta0: float, k_max: int, n: int = 6):
    """Eigenvalues around i k zeta0 for k = 1..k_max (and their conjugates)."""
    out = []
    for k in range(1, k_max + 1):
        for e in eigs(L, 1j * k * zeta0, n):
            out.extend([e.nu, np.conj(e.nu)])
    vals = []
    for v in out:
        if not any(abs(v - w) < 1e-9 * max(1.0, abs(v)) for w in vals):
            vals.append(v)
    return np.array(vals)
