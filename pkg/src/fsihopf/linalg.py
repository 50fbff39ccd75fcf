"""Small sparse linear-algebra helpers shared by the solver modules."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import SolverError


class Factorized:
    """Sparse LU of a square matrix; solves real or complex right-hand sides."""

    def __init__(self, mat, what: str = "linear system"):
        self.mat = sp.csc_matrix(mat)
        self.what = what
        self.is_complex = np.iscomplexobj(self.mat.data)
        try:
            self.lu = spla.splu(self.mat, permc_spec="COLAMD")
        except RuntimeError as exc:  # exactly singular
            raise SolverError(f"{what}: factorization failed ({exc})") from None

    @property
    def shape(self):
        return self.mat.shape

    def solve(self, rhs, trans: str = "N"):
        rhs = np.asarray(rhs)
        if np.iscomplexobj(rhs) and not self.is_complex:
            return self.lu.solve(np.ascontiguousarray(rhs.real), trans=trans) + \
                1j * self.lu.solve(np.ascontiguousarray(rhs.imag), trans=trans)
        if self.is_complex and not np.iscomplexobj(rhs):
            rhs = rhs.astype(complex)
        x = self.lu.solve(np.ascontiguousarray(rhs), trans=trans)
        if not np.all(np.isfinite(x)):
            raise SolverError(f"{self.what}: non-finite solution")
        return x


def saddle(K, G, D, gauge: bool = False):
    """Block matrix [[K, G], [D, 0]] (plus a zero-mean border on the second block)."""
    n2 = D.shape[0]
    if gauge:
        one = sp.csr_matrix(np.ones((n2, 1)))
        return sp.bmat([[K, G, None], [D, None, one], [None, one.T, None]], format="csc")
    return sp.bmat([[K, G], [D, None]], format="csc")


def smallest_singular_value(mat, tol: float = 1e-12):
    """sigma_min and ||mat||_2 of a sparse square matrix via LU + Lanczos."""
    n = mat.shape[0]
    if n <= 400:
        s = np.linalg.svd(mat.toarray(), compute_uv=False)
        return float(s[-1]), float(s[0])
    fac = Factorized(mat, "singular value solve")
    inv = spla.LinearOperator((n, n), matvec=lambda x: fac.solve(fac.solve(x), trans="T"), dtype=float)
    big = spla.eigsh(inv, k=1, which="LM", tol=tol, return_eigenvectors=False)[0]
    matT = sp.csr_matrix(mat.T)
    mm = spla.LinearOperator((n, n), matvec=lambda x: matT @ (mat @ x), dtype=float)
    nrm2 = spla.eigsh(mm, k=1, which="LA", tol=1e-8, return_eigenvectors=False)[0]
    return float(1.0 / np.sqrt(big)), float(np.sqrt(nrm2))
