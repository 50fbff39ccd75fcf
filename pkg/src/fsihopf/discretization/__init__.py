"""Staggered-grid discretization of the coupled body-fluid space.

Coupled fields are plain numpy vectors of length ``mesh.nz`` (free face
velocities, then the body velocity); pressures are vectors over fluid cells.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh, MeshSpec, build_mesh, FREE, BODY, WALL
from .operators import Operators, operators, convection_entries
from .snapshot import write_snapshot, read_snapshot, export_cell_csv

__all__ = [
    "Mesh", "MeshSpec", "build_mesh", "Operators", "operators", "inner", "project",
    "convection", "traction_integral", "strain_norm", "divergence", "write_snapshot",
    "read_snapshot", "export_cell_csv", "FREE", "BODY", "WALL", "convection_entries",
]


def inner(mesh: Mesh, f, g, varpi: float):
    """Weighted product varpi^-1 fhat.ghat + sum over fluid faces f g vol."""
    m = operators(mesh).mass(varpi)
    return np.sum(m * f * g)


def project(mesh: Mesh, f, varpi: float):
    """Orthogonal projection onto discretely solenoidal coupled fields."""
    return operators(mesh).project(np.asarray(f), varpi)[0]


def divergence(mesh: Mesh, z):
    return operators(mesh).D @ z


def convection(mesh: Mesh, a, b):
    """Skew-symmetric transport of ``b`` by ``a``.

    ``a`` is either a coupled field (length nz, extended to faces) or a face
    field (length nf); ``b`` is a coupled field.
    """
    ops = operators(mesh)
    a = np.asarray(a)
    if a.shape[0] == mesh.nz:
        a = ops.ext(a)
    return ops.conv_apply(a, np.asarray(b))


def traction_integral(mesh: Mesh, u, p, transport=None, lam: float = 0.0):
    """Force exerted on the body, sum over body faces of the discrete (2D(u) - pI) n.

    With ``transport`` and ``lam`` the convective momentum flux through the
    body control volumes is included, which is what the coupled scheme uses.
    """
    return operators(mesh).traction(np.asarray(u), np.asarray(p), transport, lam)


def strain_norm(mesh: Mesh, u, far=(0.0, 0.0)):
    """(||D(u)||, ||grad u||) for a coupled field or a full face field."""
    ops = operators(mesh)
    u = np.asarray(u)
    if u.shape[0] == mesh.nz:
        u = ops.ext(u)
    return ops.strain_norm_faces(u, far)
