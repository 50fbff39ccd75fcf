"""Discrete operators on the coupled body-fluid space.

A coupled field is a vector ``z`` of length ``mesh.nz``: free face
velocities followed by the two components of the rigid body velocity.  All
matrices here are assembled once per mesh and never mutated.

Conventions
-----------
* ``E``      extension z -> all faces (body faces take the body velocity,
             wall faces 0).
* ``A``      viscous form 2 (D u, D v) on z, assembled from strain samples.
             Natural boundary condition on the outflow side is zero traction.
* ``D``      divergence on fluid cells, (D z)_c = flux / h.  Cell weight h^2.
* ``C(a)``   skew-symmetric convection with transport field ``a`` (given on
             all faces).  Exactly skew on the whole coupled space.
* Traction on the body is the body block of the momentum operator, so the
  discrete coupled system conserves energy exactly as the continuum one.
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..model import ValidationError, SolverError
from .mesh import Mesh, FREE, BODY, WALL


def _coo(rows, cols, vals, shape):
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=shape).tocsr()


class _Pattern:
    """Fixed sparsity pattern for matrices whose entries are linear in a vector.

    Entry e contributes ``coef[e] * x[src[e]]`` to position (row[e], col[e]).
    """

    def __init__(self, row, col, src, coef, shape):
        self.shape = shape
        key = row.astype(np.int64) * shape[1] + col
        order = np.lexsort((col, row))
        key_sorted = key[order]
        uniq, start = np.unique(key_sorted, return_index=True)
        slot_sorted = np.repeat(np.arange(len(uniq)), np.diff(np.append(start, len(key_sorted))))
        slot = np.empty_like(slot_sorted)
        slot[order] = slot_sorted
        urow = uniq // shape[1]
        self.indices = (uniq % shape[1]).astype(np.int32)
        self.indptr = np.searchsorted(urow, np.arange(shape[0] + 1)).astype(np.int32)
        self.slot = slot
        self.nslots = len(uniq)
        self.src = src
        self.coef = coef

    def matrix(self, x):
        vals = np.bincount(self.slot, weights=self.coef * x[self.src], minlength=self.nslots) \
            if not np.iscomplexobj(x) else \
            np.bincount(self.slot, weights=(self.coef * x[self.src]).real, minlength=self.nslots) + \
            1j * np.bincount(self.slot, weights=(self.coef * x[self.src]).imag, minlength=self.nslots)
        return sp.csr_matrix((vals, self.indices.copy(), self.indptr.copy()), shape=self.shape)


def _strain_and_grad_rows(mesh: Mesh):
    """Scaled derivative samples.

    Returns two sparse matrices over ``nf + 2`` columns (the last two hold a
    uniform far-field value per component, zero for coupled fields):

    * ``Sd`` with ||Sd u||^2 = 2 ||D(u)||^2
    * ``Sg`` with ||Sg u||^2 = ||grad u||^2
    """
    h = mesh.h
    nx, ny, nf = mesh.nx, mesh.ny, mesh.nf
    interior = mesh.interior_body_faces()
    fluid = mesh.pmap >= 0
    s2 = np.sqrt(2.0)

    d_rows, d_cols, d_vals = [], [], []
    g_rows, g_cols, g_vals = [], [], []
    nd = 0
    ng = 0

    # cell samples: d u1/dx1, d u2/dx2 (weight h^2, derivative 1/h)
    jc, ic = np.divmod(np.arange(mesh.ncells), nx)
    ic, jc = ic[fluid], jc[fluid]
    n = len(ic)
    for a, b in ((mesh.uid(ic, jc), mesh.uid(ic + 1, jc)), (mesh.vid(ic, jc), mesh.vid(ic, jc + 1))):
        r = np.arange(n)
        d_rows += [nd + r, nd + r]
        d_cols += [b, a]
        d_vals += [np.full(n, s2), np.full(n, -s2)]
        g_rows += [ng + r, ng + r]
        g_cols += [b, a]
        g_vals += [np.ones(n), -np.ones(n)]
        nd += n
        ng += n

    # node samples: d u1/dx2 and d u2/dx1 at grid nodes
    I, J = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    quad = np.zeros(I.shape)
    for di, dj in ((-1, -1), (0, -1), (-1, 0), (0, 0)):
        c = mesh.cid(I + di, J + dj)
        quad += np.where(c >= 0, fluid[np.maximum(c, 0)], False)
    phi = quad / 4.0
    keep = phi > 0
    I, J, phi = I[keep], J[keep], phi[keep]
    scale = h * np.sqrt(phi)

    def diff_terms(a, b, comp, missing_lo):
        """(cols_a, cols_b, inv_dist, valid) for b - a across a node."""
        ghost_a = a < 0
        ghost_b = b < 0
        half = ghost_a | ghost_b | interior[np.maximum(a, 0)] & ~ghost_a | interior[np.maximum(b, 0)] & ~ghost_b
        inv = np.where(half, 2.0 / h, 1.0 / h)
        ca = np.where(ghost_a, nf + comp, a)
        cb = np.where(ghost_b, nf + comp, b)
        valid = ~missing_lo
        return ca, cb, inv, valid

    a21, b21 = mesh.uid(I, J - 1), mesh.uid(I, J)
    ca21, cb21, inv21, _ = diff_terms(a21, b21, 0, np.zeros(I.shape, bool))
    a12, b12 = mesh.vid(I - 1, J), mesh.vid(I, J)
    missing = (I == 0) & (mesh.outflow == "natural")
    ca12, cb12, inv12, has12 = diff_terms(a12, b12, 1, missing)

    m = len(I)
    r = np.arange(m)
    # gradient samples
    g_rows += [ng + r, ng + r]
    g_cols += [cb21, ca21]
    g_vals += [scale * inv21, -scale * inv21]
    ng += m
    r12 = np.nonzero(has12)[0]
    rr = np.arange(len(r12))
    g_rows += [ng + rr, ng + rr]
    g_cols += [cb12[r12], ca12[r12]]
    g_vals += [scale[r12] * inv12[r12], -scale[r12] * inv12[r12]]
    ng += len(r12)
    # strain samples (shear rate u1,2 + u2,1); outflow nodes carry no shear sample
    rr = np.arange(len(r12))
    d_rows += [nd + rr] * 4
    d_cols += [cb21[r12], ca21[r12], cb12[r12], ca12[r12]]
    sc = scale[r12]
    d_vals += [sc * inv21[r12], -sc * inv21[r12], sc * inv12[r12], -sc * inv12[r12]]
    nd += len(r12)

    Sd = _coo(d_rows, d_cols, d_vals, (nd, nf + 2))
    Sg = _coo(g_rows, g_cols, g_vals, (ng, nf + 2))
    return Sd, Sg


def convection_entries(mesh: Mesh):
    """Flux-form convection on momentum control volumes around every face.

    Returns arrays (row, trans, val, coef) over *all faces* such that
    ``(B(a) b)[row] += coef * a[trans] * b[val]`` approximates the integral
    of div(a (x) b) over the control volume of ``row``.  Sides whose stencil
    leaves the grid are dropped.
    """
    h = mesh.h
    nx, ny = mesh.nx, mesh.ny
    uid, vid = mesh.uid, mesh.vid
    out = []

    Iu, Ju = np.meshgrid(np.arange(nx + 1), np.arange(ny), indexing="ij")
    Iu, Ju = Iu.ravel(), Ju.ravel()
    fu = uid(Iu, Ju)
    Iv, Jv = np.meshgrid(np.arange(nx), np.arange(ny + 1), indexing="ij")
    Iv, Jv = Iv.ravel(), Jv.ravel()
    fv = vid(Iv, Jv)
    i, j = Iu, Ju
    u_sides = [
        (+1, uid(i, j), uid(i + 1, j), uid(i, j), uid(i + 1, j)),
        (-1, uid(i - 1, j), uid(i, j), uid(i - 1, j), uid(i, j)),
        (+1, vid(i - 1, j + 1), vid(i, j + 1), uid(i, j), uid(i, j + 1)),
        (-1, vid(i - 1, j), vid(i, j), uid(i, j - 1), uid(i, j)),
    ]
    i, j = Iv, Jv
    v_sides = [
        (+1, uid(i + 1, j - 1), uid(i + 1, j), vid(i, j), vid(i + 1, j)),
        (-1, uid(i, j - 1), uid(i, j), vid(i - 1, j), vid(i, j)),
        (+1, vid(i, j), vid(i, j + 1), vid(i, j), vid(i, j + 1)),
        (-1, vid(i, j - 1), vid(i, j), vid(i, j - 1), vid(i, j)),
    ]
    for rows, sides in ((fu, u_sides), (fv, v_sides)):
        for sign, a1, a2, b1, b2 in sides:
            ok = (a1 >= 0) & (a2 >= 0) & (b1 >= 0) & (b2 >= 0)
            r = rows[ok]
            for a in (a1[ok], a2[ok]):
                for b in (b1[ok], b2[ok]):
                    out.append((r, a, b, np.full(len(r), sign * h / 4.0)))
    row = np.concatenate([o[0] for o in out])
    tr = np.concatenate([o[1] for o in out])
    val = np.concatenate([o[2] for o in out])
    coef = np.concatenate([o[3] for o in out])
    return row, tr, val, coef


class Operators:
    """Immutable operator set for one mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        nf, nz, nfree = mesh.nf, mesh.nz, mesh.nfree
        self.h = mesh.h
        kind = mesh.face_kind
        comp = mesh.face_component()
        self.face_comp = comp

        # extension z -> faces
        f = np.nonzero(kind != WALL)[0]
        self.E = sp.csr_matrix((np.ones(len(f)), (f, mesh.zmap[f])), shape=(nf, nz))
        # constant unit fields on faces
        self.unit_fields = np.stack([(comp == 0).astype(float), (comp == 1).astype(float)], axis=1)
        # body-velocity extractor and the relative-velocity map z -> E z - (uniform body velocity)
        self.Pb = sp.csr_matrix((np.ones(2), ([0, 1], [nfree, nfree + 1])), shape=(2, nz))
        self.Rrel = (self.E - sp.csr_matrix(self.unit_fields) @ self.Pb).tocsr()

        # fluid mass on free faces (outflow faces are half cells)
        m = np.full(nfree, self.h ** 2)
        outflow = mesh.outflow_faces()
        m[mesh.zmap[outflow]] = 0.5 * self.h ** 2
        self.fluid_mass = m

        # viscous forms
        Sd, Sg = _strain_and_grad_rows(mesh)
        self.Sd_faces = Sd
        self.Sg_faces = Sg
        Ez = sp.bmat([[self.E], [sp.csr_matrix((2, nz))]]).tocsr()
        self.Sd = (Sd @ Ez).tocsr()
        self.Sg = (Sg @ Ez).tocsr()
        self.A = (self.Sd.T @ self.Sd).tocsr()

        # divergence on fluid cells
        nx = mesh.nx
        jc, ic = np.divmod(np.arange(mesh.ncells), nx)
        fl = mesh.pmap >= 0
        ic, jc = ic[fl], jc[fl]
        rows = mesh.pmap[fl]
        cols = [mesh.uid(ic + 1, jc), mesh.uid(ic, jc), mesh.vid(ic, jc + 1), mesh.vid(ic, jc)]
        vals = [np.full(len(rows), s / self.h) for s in (1.0, -1.0, 1.0, -1.0)]
        self.Dfaces = _coo([rows] * 4, cols, vals, (mesh.npres, nf))
        self.D = (self.Dfaces @ self.E).tocsr()
        self.cell_weight = self.h ** 2
        # -D^T W: the pressure-gradient block of the momentum rows
        self.Gp = (-(self.D.T) * self.cell_weight).tocsr()

        # skew convection on z: C(a) = (B_z(a) - B_z(a)^T) / 2, B_z = E^T B(a) E
        row, tr, val, coef = convection_entries(mesh)
        self._full_conv = (row, tr, val, coef)
        zr = mesh.zmap[row]
        zv = mesh.zmap[val]
        ok = (zr >= 0) & (zv >= 0)
        zr, zv, tr, coef = zr[ok], zv[ok], tr[ok], coef[ok]
        self._crow = np.concatenate([zr, zv])
        self._ccol = np.concatenate([zv, zr])
        self._ctr = np.concatenate([tr, tr])
        self._ccoef = np.concatenate([0.5 * coef, -0.5 * coef])
        self._cpat = _Pattern(self._crow, self._ccol, self._ctr, self._ccoef, (nz, nz))
        self._jpat = _Pattern(self._crow, self._ctr, self._ccol, self._ccoef, (nz, nf))

        self._lock = threading.Lock()
        self._proj = {}

    # -- basic maps -------------------------------------------------------
    def ext(self, z):
        return self.E @ z

    def rel(self, z):
        """Face field of fluid velocity relative to the body, z -> E z - zhat."""
        return self.Rrel @ z

    def body(self, z):
        return z[self.mesh.nfree:self.mesh.nfree + 2]

    def mass(self, varpi: float) -> np.ndarray:
        if varpi == 0:
            raise ValidationError("varpi = 0 leaves the body weight 1/varpi undefined")
        return np.concatenate([self.fluid_mass, np.full(2, 1.0 / varpi)])

    def uniform(self, vec) -> np.ndarray:
        """Coupled field equal to ``vec`` on every non-wall face and on the body."""
        z = np.zeros(self.mesh.nz)
        comp = self.face_comp[self.mesh.face_kind == FREE]
        z[:self.mesh.nfree] = np.asarray(vec, float)[comp]
        z[self.mesh.nfree:] = vec
        return z

    # -- convection -------------------------------------------------------
    def conv_matrix(self, a_faces) -> sp.csr_matrix:
        """Sparse C(a) on z."""
        return self._cpat.matrix(np.asarray(a_faces))

    def conv_jacobian(self, b) -> sp.csr_matrix:
        """Sparse J(b) (nz x nf) with J(b) a = C(a) b."""
        return self._jpat.matrix(np.asarray(b))

    def conv_apply(self, a_faces, b):
        """C(a) b without assembling a matrix."""
        t = self._ccoef * a_faces[self._ctr] * b[self._ccol]
        if np.iscomplexobj(t):
            return (np.bincount(self._crow, weights=t.real, minlength=self.mesh.nz)
                    + 1j * np.bincount(self._crow, weights=t.imag, minlength=self.mesh.nz))
        return np.bincount(self._crow, weights=t, minlength=self.mesh.nz)

    def flux_convection_faces(self, a_faces, b_faces):
        """Non-symmetrized flux form B(a) b on all faces (diagnostic)."""
        row, tr, val, coef = self._full_conv
        return np.bincount(row, weights=coef * a_faces[tr] * b_faces[val], minlength=self.mesh.nf)

    @property
    def d1(self) -> sp.csr_matrix:
        """Streamwise derivative e1 . grad as a skew operator on z."""
        return self.conv_matrix(self.unit_fields[:, 0])

    # -- projection -------------------------------------------------------
    def _projector(self, varpi):
        with self._lock:
            fac = self._proj.get(varpi)
            if fac is None:
                minv = 1.0 / self.mass(varpi)
                S = (self.D @ sp.diags(minv) @ self.D.T).tocsc()
                if self.mesh.outflow == "wall":
                    one = np.ones((S.shape[0], 1))
                    S = sp.bmat([[S, sp.csc_matrix(one)], [sp.csc_matrix(one.T), None]]).tocsc()
                fac = (spla.splu(S), minv, S)
                self._proj[varpi] = fac
            return fac

    def project(self, f, varpi: float, tol: float = 1e-9):
        """M-orthogonal projection onto {D z = 0}; returns (Pf, q) with Pf = f - M^-1 D^T q."""
        lu, minv, S = self._projector(varpi)
        rhs = self.D @ f
        if self.mesh.outflow == "wall":
            rhs = np.append(rhs, 0.0)
        q = lu.solve(rhs) if not np.iscomplexobj(rhs) else lu.solve(rhs.real) + 1j * lu.solve(rhs.imag)
        res = np.linalg.norm(S @ q - rhs)
        if not np.isfinite(res) or res > tol * max(1.0, np.linalg.norm(rhs)):
            raise SolverError(f"projection solve failed, residual {res:.3e}", res)
        q = q[:self.mesh.npres]
        return f - minv * (self.D.T @ q), q

    def grad_field(self, p, varpi: float):
        """G p = -M^-1 D^T W p: fluid pressure gradient plus body part -varpi * int p n."""
        return -(1.0 / self.mass(varpi)) * (self.D.T @ (self.cell_weight * p))

    # -- body force -------------------------------------------------------
    def traction(self, z, p, transport=None, lam: float = 0.0):
        """Hydrodynamic force on the body: body rows of A z - D^T W p (+ lam C(a) z)."""
        r = self.A @ z + self.Gp @ p
        if transport is not None and lam != 0.0:
            r = r + lam * self.conv_apply(transport, z)
        return r[self.mesh.nfree:self.mesh.nfree + 2]

    def strain_norm_faces(self, u_faces, far=(0.0, 0.0)):
        x = np.concatenate([u_faces, np.asarray(far, dtype=float)])
        nd = np.linalg.norm(self.Sd_faces @ x) / np.sqrt(2.0)
        ng = np.linalg.norm(self.Sg_faces @ x)
        return float(nd), float(ng)


_CACHE: dict = {}


def operators(mesh: Mesh) -> Operators:
    """Operator set for ``mesh`` (cached per mesh object)."""
    key = id(mesh)
    hit = _CACHE.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    ops = Operators(mesh)
    if len(_CACHE) > 16:
        _CACHE.clear()
    _CACHE[key] = (mesh, ops)
    return ops
