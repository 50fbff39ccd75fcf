"""Steady flow past the spring-mounted body, its sensitivity and the thresholds.

The steady velocity ``u0`` is the absolute velocity written in the body
frame: it equals e1 on the body and vanishes on the inflow and lateral walls.
The transport field is ``V = u0 - e1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import eigh, null_space

from .model import Params, SolverError, ValidationError, validate
from .discretization import Mesh, operators
from .linalg import Factorized, saddle, smallest_singular_value


@dataclass
class SteadyState:
    mesh: Mesh = field(repr=False)
    params: Params
    u0: np.ndarray = field(repr=False)
    p0: np.ndarray = field(repr=False)
    chi0: np.ndarray
    residual: float
    iterations: int = 0
    du0_dlambda: Optional[np.ndarray] = field(default=None, repr=False)
    dp0_dlambda: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def lam(self) -> float:
        return self.params.lam

    def transport(self) -> np.ndarray:
        ops = operators(self.mesh)
        return ops.ext(self.u0) - ops.unit_fields[:, 0]

    def force(self) -> np.ndarray:
        """Hydrodynamic force on the body (includes the discrete convective flux)."""
        ops = operators(self.mesh)
        return ops.traction(self.u0, self.p0, self.transport(), self.params.lam)

    def closure(self) -> np.ndarray:
        """omega_n^2 chi0 + varpi * force; zero for a consistent state."""
        return self.params.omega_n_sq * self.chi0 + self.params.varpi * self.force()


class Unbounded:
    """Threshold with no restriction on lambda (nonpositive Rayleigh maximum)."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "Unbounded"

    def __le__(self, other):
        return isinstance(other, Unbounded)

    def __ge__(self, other):
        return True


UNBOUNDED = Unbounded()


def _le(a, b) -> bool:
    if isinstance(b, Unbounded):
        return True
    if isinstance(a, Unbounded):
        return False
    return a <= b


@dataclass
class Thresholds:
    lambda1: object
    lambda2: object
    theta1: float = 0.0
    theta2: float = 0.0

    def gamma(self, lam: float) -> float:
        if isinstance(self.lambda2, Unbounded):
            return 1.0
        return 1.0 - lam / self.lambda2

    def ordered(self) -> bool:
        return _le(self.lambda2, self.lambda1)

    def as_dict(self) -> dict:
        f = lambda v: None if isinstance(v, Unbounded) else float(v)  # noqa: E731
        return {"lambda1": f(self.lambda1), "lambda2": f(self.lambda2),
                "theta1": float(self.theta1), "theta2": float(self.theta2)}


# ---------------------------------------------------------------------------
# steady Navier-Stokes

class _SteadyProblem:
    def __init__(self, mesh: Mesh, params: Params):
        validate(params)
        self.mesh = mesh
        self.params = params
        self.ops = operators(mesh)
        nf = mesh.nfree
        self.free = slice(0, nf)
        self.gauge = mesh.outflow == "wall"
        self.zb = np.array([1.0, 0.0])
        self.e1 = self.ops.unit_fields[:, 0]

    def join(self, zf):
        return np.concatenate([zf, self.zb])

    def residual(self, lam, zf, p):
        ops = self.ops
        z = self.join(zf)
        V = ops.ext(z) - self.e1
        rm = ops.A @ z + ops.Gp @ p
        if lam != 0.0:
            rm = rm + lam * ops.conv_apply(V, z)
        return np.concatenate([rm[self.free], ops.D @ z])

    def jacobian_z(self, lam, z):
        ops = self.ops
        if lam == 0.0:
            return ops.A
        V = ops.ext(z) - self.e1
        return (ops.A + lam * (ops.conv_matrix(V) + ops.conv_jacobian(z) @ ops.E)).tocsr()

    def newton_matrix(self, lam, z):
        ops = self.ops
        J = self.jacobian_z(lam, z)
        f = self.free
        return saddle(J[f, f], ops.Gp[f, :], ops.D[:, f], gauge=self.gauge)

    def solve_linear(self, mat, rhs):
        n = self.mesh.nfree + self.mesh.npres
        if self.gauge:
            rhs = np.append(rhs, 0.0)
        return Factorized(mat, "steady Newton step").solve(rhs)[:n]

    def oseen_guess(self, lam):
        ops = self.ops
        f = self.free
        K = ops.A
        if lam != 0.0:
            K = (ops.A + lam * ops.conv_matrix(-self.e1)).tocsr()
        mat = saddle(K[f, f], ops.Gp[f, :], ops.D[:, f], gauge=self.gauge)
        zb_cols = K[:, self.mesh.nfree:]
        rhs = -np.concatenate([(zb_cols @ self.zb)[f], ops.D[:, self.mesh.nfree:] @ self.zb])
        x = self.solve_linear(mat, rhs)
        return x[:self.mesh.nfree], x[self.mesh.nfree:]


def _gauge_pressure(mesh, p):
    if mesh.outflow == "wall":
        return p - p.mean()
    return p


def solve_steady(params: Params, mesh: Mesh, initial_guess=None, tol: float = 1e-10,
                 max_iter: int = 30, sensitivity: bool = False) -> SteadyState:
    """Newton iteration for the discrete steady problem with body velocity e1."""
    prob = _SteadyProblem(mesh, params)
    lam = params.lam
    nf = mesh.nfree
    if initial_guess is None:
        zf, p = prob.oseen_guess(lam)
    else:
        if isinstance(initial_guess, SteadyState):
            zf, p = initial_guess.u0[:nf].copy(), initial_guess.p0.copy()
        else:
            z0, p0 = initial_guess
            zf, p = np.asarray(z0)[:nf].copy(), np.asarray(p0).copy()
    r = prob.residual(lam, zf, p)
    res = np.linalg.norm(r)
    it = 0
    history = [res]
    while res >= tol and it < max_iter:
        mat = prob.newton_matrix(lam, prob.join(zf))
        dx = prob.solve_linear(mat, r)
        zf = zf - dx[:nf]
        p = p - dx[nf:]
        r = prob.residual(lam, zf, p)
        new = np.linalg.norm(r)
        it += 1
        history.append(new)
        if not np.isfinite(new):
            raise SolverError("steady Newton diverged", new)
        if it >= 4 and new > 0.5 * history[-4] and new > tol:
            # no progress over three steps: stagnation
            if new > 1e3 * tol:
                raise SolverError(f"steady Newton stagnated at residual {new:.3e}", new)
        res = new
    if res >= tol:
        raise SolverError(f"steady Newton did not converge: residual {res:.3e}", res)
    p = _gauge_pressure(mesh, p)
    z = prob.join(zf)
    st = SteadyState(mesh=mesh, params=params, u0=z, p0=p, chi0=np.zeros(2), residual=float(res),
                     iterations=it)
    st.chi0 = -(params.varpi / params.omega_n_sq) * st.force()
    if sensitivity:
        attach_sensitivity(st)
    return st


def steady_residual(state: SteadyState) -> float:
    """Independent re-evaluation of the steady residual of ``state``."""
    ops = operators(state.mesh)
    z, p, lam = state.u0, state.p0, state.params.lam
    V = ops.ext(z) - ops.unit_fields[:, 0]
    # assembled matrix here, matrix-free product inside the solver
    rm = ops.A @ z + ops.Gp @ p + lam * (ops.conv_matrix(V) @ z)
    body_ok = np.abs(ops.body(z) - np.array([1.0, 0.0])).max()
    return float(np.linalg.norm(np.concatenate([rm[:state.mesh.nfree], ops.D @ z])) + body_ok)


def attach_sensitivity(state: SteadyState) -> SteadyState:
    """Fill du0/dlambda by solving J du = -dR/dlambda (body velocity fixed)."""
    prob = _SteadyProblem(state.mesh, state.params)
    ops = prob.ops
    nf = state.mesh.nfree
    z = state.u0
    V = ops.ext(z) - prob.e1
    dR = np.concatenate([ops.conv_apply(V, z)[:nf], np.zeros(state.mesh.npres)])
    mat = prob.newton_matrix(state.params.lam, z)
    dx = prob.solve_linear(mat, -dR)
    du = np.zeros(state.mesh.nz)
    du[:nf] = dx[:nf]
    state.du0_dlambda = du
    state.dp0_dlambda = _gauge_pressure(state.mesh, dx[nf:])
    return state


def continue_steady(params: Params, mesh: Mesh, lambda_range, steps: int, tol: float = 1e-10):
    """Predictor-corrector continuation in lambda; every state carries its sensitivity."""
    a, b = float(lambda_range[0]), float(lambda_range[1])
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    grid = np.array([a]) if (a == b or steps == 1) else np.linspace(a, b, steps)
    out = []
    prev = None
    for lam in grid:
        pr = params.replace(lam=float(lam))
        guess = None
        if prev is not None:
            dl = lam - prev.params.lam
            guess = (prev.u0 + dl * prev.du0_dlambda, prev.p0 + dl * prev.dp0_dlambda)
        try:
            st = solve_steady(pr, mesh, initial_guess=guess, tol=tol, sensitivity=True)
        except SolverError as exc:
            last = out[-1].params.lam if out else None
            raise SolverError(f"continuation failed at lambda={lam:.6g} (last good lambda={last}): {exc}",
                              exc.residual) from None
        out.append(st)
        prev = st
    return out


# ---------------------------------------------------------------------------
# thresholds

def threshold_form(state: SteadyState):
    """Symmetric matrix Q with z^T Q z = (rel(z) . grad u0, z) in the skew discretization."""
    ops = operators(state.mesh)
    Q = ops.conv_jacobian(state.u0) @ ops.Rrel
    return (0.5 * (Q + Q.T)).tocsr()


def _max_rayleigh(Qs, A, D, tol=1e-14):
    """Largest theta with -Qs x = theta A x on {D x = 0}."""
    n = A.shape[0]
    if Qs.nnz == 0 or abs(Qs).max() == 0.0:
        return 0.0, None
    K = saddle(A, D.T, D)
    fac = Factorized(K, "threshold saddle solve")
    m = D.shape[0]

    def op(x):
        return fac.solve(np.concatenate([-(Qs @ x), np.zeros(m)]))[:n]

    lin = spla.LinearOperator((n, n), matvec=op, dtype=float)
    rng = np.random.default_rng(12345)
    v0 = op(rng.standard_normal(n))
    k = min(4, n - 2)
    vals, vecs = spla.eigs(lin, k=k, which="LR", tol=tol, v0=v0, ncv=min(n - 1, max(2 * k + 1, 24)))
    i = int(np.argmax(vals.real))
    return float(vals[i].real), np.real(vecs[:, i])


def compute_thresholds(state: SteadyState, tol: float = 1e-14) -> Thresholds:
    """lambda1 (fields vanishing on the body) and lambda2 (body motion allowed)."""
    ops = operators(state.mesh)
    Qs = threshold_form(state)
    f = slice(0, state.mesh.nfree)
    th1, _ = _max_rayleigh(Qs[f, f], ops.A[f, f].tocsr(), ops.D[:, f].tocsr(), tol)
    th2, _ = _max_rayleigh(Qs, ops.A, ops.D, tol)
    l1 = UNBOUNDED if th1 <= 0 else 1.0 / th1
    l2 = UNBOUNDED if th2 <= 0 else 1.0 / th2
    return Thresholds(lambda1=l1, lambda2=l2, theta1=th1, theta2=th2)


def dense_thresholds(state: SteadyState) -> tuple[float, float]:
    """Dense reference for (theta1, theta2) via an orthonormal null-space basis of D."""
    ops = operators(state.mesh)
    Qs = threshold_form(state).toarray()
    A = ops.A.toarray()
    D = ops.D.toarray()
    out = []
    for sl in (slice(0, state.mesh.nfree), slice(0, state.mesh.nz)):
        N = null_space(D[:, sl])
        w = eigh(N.T @ (-Qs[sl, sl]) @ N, N.T @ A[sl, sl] @ N, eigvals_only=True)
        out.append(float(w[-1]))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# invertibility of the steady linearization

def steady_linearization(state: SteadyState) -> sp.csc_matrix:
    """Matrix of the linearized steady problem on (fluid velocity, pressure, displacement).

    Body velocity is zero; the displacement row is omega_n^2/varpi chi + force.
    """
    mesh = state.mesh
    ops = operators(mesh)
    pr = state.params
    prob = _SteadyProblem(mesh, pr)
    J = prob.jacobian_z(pr.lam, state.u0)
    nf = mesh.nfree
    f = slice(0, nf)
    b = slice(nf, nf + 2)
    spring = sp.identity(2, format="csr") * (pr.omega_n_sq / pr.varpi)
    blocks = [[J[f, f], ops.Gp[f, :], None],
              [ops.D[:, f], None, None],
              [J[b, f], ops.Gp[b, :], spring]]
    if prob.gauge:
        one = sp.csr_matrix(np.ones((mesh.npres, 1)))
        blocks = [row + [None] for row in blocks]
        blocks[1][3] = one
        blocks.append([None, one.T, None, None])
    return sp.bmat(blocks, format="csc")


@dataclass
class H1Report:
    ok: bool
    sigma_min: float
    norm: float
    threshold: float

    def as_dict(self):
        return {"ok": bool(self.ok), "sigma_min": self.sigma_min, "norm": self.norm,
                "relative_threshold": self.threshold}


def h1_report(matrix, rel_threshold: float = 1e-8) -> H1Report:
    smin, nrm = smallest_singular_value(sp.csc_matrix(matrix))
    return H1Report(ok=bool(smin > rel_threshold * nrm), sigma_min=smin, norm=nrm, threshold=rel_threshold)


def check_H1prime(state: SteadyState, params: Params | None = None, rel_threshold: float = 1e-8) -> H1Report:
    """Trivial kernel of the steady linearization: sigma_min > threshold * ||L||."""
    if params is not None and params != state.params:
        state = SteadyState(mesh=state.mesh, params=params, u0=state.u0, p0=state.p0,
                            chi0=state.chi0, residual=state.residual)
    return h1_report(steady_linearization(state), rel_threshold)


# ---------------------------------------------------------------------------
# persistence

def save_state(state: SteadyState, directory) -> dict:
    """Write u0/p0 (and sensitivity) snapshots plus ``state.json``; returns the summary."""
    from pathlib import Path
    import json
    from .discretization import write_snapshot
    from .discretization.snapshot import atomic_write_text

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_snapshot(d / "u0.bin", state.mesh, state.u0, {"field": "u0"})
    write_snapshot(d / "p0.bin", state.mesh, state.p0, {"field": "p0"})
    if state.du0_dlambda is not None:
        write_snapshot(d / "du0_dlambda.bin", state.mesh, state.du0_dlambda, {"field": "du0_dlambda"})
    info = {
        "lambda": state.params.lam, "omega_n_sq": state.params.omega_n_sq, "varpi": state.params.varpi,
        "chi0": [float(v) for v in state.chi0], "drag": [float(v) for v in state.force()],
        "residual": state.residual, "iterations": state.iterations, "mesh": state.mesh.spec.to_dict(),
    }
    atomic_write_text(d / "state.json", json.dumps(info, indent=2, sort_keys=True))
    return info


def load_state(directory) -> SteadyState:
    from pathlib import Path
    import json
    from .discretization import MeshSpec, build_mesh, read_snapshot

    d = Path(directory)
    info = json.loads((d / "state.json").read_text(encoding="utf-8"))
    ms = info["mesh"]
    mesh = build_mesh(MeshSpec(box=tuple(ms["box"]), body=tuple(ms["body"]), h=ms["h"],
                               outflow=ms["outflow"], dim=ms["dim"]))
    params = Params(lam=info["lambda"], omega_n_sq=info["omega_n_sq"], varpi=info["varpi"])
    u0 = read_snapshot(d / "u0.bin")[0]
    p0 = read_snapshot(d / "p0.bin")[0]
    if u0.shape[0] != mesh.nz or p0.shape[0] != mesh.npres:
        raise ValidationError(f"{d}: snapshot sizes do not match the stored mesh")
    du = read_snapshot(d / "du0_dlambda.bin")[0] if (d / "du0_dlambda.bin").exists() else None
    return SteadyState(mesh=mesh, params=params, u0=u0, p0=p0, chi0=np.array(info["chi0"]),
                       residual=info["residual"], iterations=info["iterations"], du0_dlambda=du)
