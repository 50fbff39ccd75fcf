"""Staggered grid around an axis-aligned rectangular body.

Layout (2D only)::

    cells     (i, j)  0 <= i < nx, 0 <= j < ny, centre (x0 + (i+1/2)h, y0 + (j+1/2)h)
    u-faces   (i, j)  0 <= i <= nx, 0 <= j < ny,  at (x0 + i h, y0 + (j+1/2)h)
    v-faces   (i, j)  0 <= i < nx, 0 <= j <= ny,  at (x0 + (i+1/2)h, y0 + j h)

The free stream is -e1 in the body frame, so the wake lies towards -x and the
outflow boundary is the left side x = x0.  Every face is one of

* FREE  unknown fluid velocity (includes the outflow faces at x = x0)
* BODY  on or inside the body rectangle, value = rigid body velocity component
* WALL  inflow / lateral box wall, value 0

Coupled unknowns are ``z = (free face values, body velocity)``; the map from
``z`` to all faces is the extension operator built in ``operators``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from ..model import ValidationError

FREE, BODY, WALL = 0, 1, 2
OUTFLOW_KINDS = ("natural", "wall")


@dataclass(frozen=True)
class MeshSpec:
    box: tuple = (-16.0, 8.0, -8.0, 8.0)
    body: tuple = (-0.5, 0.5, -0.5, 0.5)
    h: float = 0.25
    outflow: str = "natural"
    dim: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box"] = list(self.box)
        d["body"] = list(self.body)
        return d


def _steps(a: float, b: float, h: float, what: str) -> int:
    n = (b - a) / h
    k = int(round(n))
    if abs(n - k) > 1e-9 * max(1.0, abs(n)):
        raise ValidationError(f"{what} is not a whole number of cells of size h={h}")
    return k


@dataclass(frozen=True, eq=False)
class Mesh:
    spec: MeshSpec
    nx: int
    ny: int
    ib0: int
    ib1: int
    jb0: int
    jb1: int
    face_kind: np.ndarray = field(repr=False)
    zmap: np.ndarray = field(repr=False)
    pmap: np.ndarray = field(repr=False)
    nfree: int = 0
    npres: int = 0

    # -- geometry ---------------------------------------------------------
    @property
    def h(self) -> float:
        return float(self.spec.h)

    @property
    def x0(self) -> float:
        return float(self.spec.box[0])

    @property
    def y0(self) -> float:
        return float(self.spec.box[2])

    @property
    def outflow(self) -> str:
        return self.spec.outflow

    @property
    def nu(self) -> int:
        return (self.nx + 1) * self.ny

    @property
    def nv(self) -> int:
        return self.nx * (self.ny + 1)

    @property
    def nf(self) -> int:
        return self.nu + self.nv

    @property
    def nz(self) -> int:
        return self.nfree + 2

    @property
    def ncells(self) -> int:
        return self.nx * self.ny

    @property
    def body_slice(self) -> slice:
        return slice(self.nfree, self.nfree + 2)

    def uid(self, i, j):
        """Global index of u-face (i, j), -1 where out of range."""
        i = np.asarray(i)
        j = np.asarray(j)
        ok = (i >= 0) & (i <= self.nx) & (j >= 0) & (j < self.ny)
        return np.where(ok, j * (self.nx + 1) + i, -1)

    def vid(self, i, j):
        i = np.asarray(i)
        j = np.asarray(j)
        ok = (i >= 0) & (i < self.nx) & (j >= 0) & (j <= self.ny)
        return np.where(ok, self.nu + j * self.nx + i, -1)

    def cid(self, i, j):
        i = np.asarray(i)
        j = np.asarray(j)
        ok = (i >= 0) & (i < self.nx) & (j >= 0) & (j < self.ny)
        return np.where(ok, j * self.nx + i, -1)

    def face_component(self) -> np.ndarray:
        comp = np.zeros(self.nf, dtype=np.int64)
        comp[self.nu:] = 1
        return comp

    def face_xy(self) -> tuple[np.ndarray, np.ndarray]:
        h, x0, y0 = self.h, self.x0, self.y0
        ju, iu = np.divmod(np.arange(self.nu), self.nx + 1)
        jv, iv = np.divmod(np.arange(self.nv), self.nx)
        x = np.concatenate([x0 + iu * h, x0 + (iv + 0.5) * h])
        y = np.concatenate([y0 + (ju + 0.5) * h, y0 + jv * h])
        return x, y

    def cell_xy(self) -> tuple[np.ndarray, np.ndarray]:
        j, i = np.divmod(np.arange(self.ncells), self.nx)
        return self.x0 + (i + 0.5) * self.h, self.y0 + (j + 0.5) * self.h

    def cell_is_fluid(self) -> np.ndarray:
        return self.pmap >= 0

    def outflow_faces(self) -> np.ndarray:
        """Boolean mask over faces: u-faces on x = x0 when the outflow is natural."""
        m = np.zeros(self.nf, dtype=bool)
        if self.outflow == "natural":
            m[self.uid(0, np.arange(self.ny))] = True
        return m

    def interior_body_faces(self) -> np.ndarray:
        """Body faces strictly inside the rectangle (not on its edges)."""
        m = np.zeros(self.nf, dtype=bool)
        ii, jj = np.meshgrid(np.arange(self.ib0 + 1, self.ib1), np.arange(self.jb0, self.jb1), indexing="ij")
        m[self.uid(ii, jj).ravel()] = True
        ii, jj = np.meshgrid(np.arange(self.ib0, self.ib1), np.arange(self.jb0 + 1, self.jb1), indexing="ij")
        m[self.vid(ii, jj).ravel()] = True
        return m

    def mirror(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Reflection y -> y0 + y1 - y on faces and cells.

        Returns (face_perm, face_sign, cell_perm): reflected field is
        ``sign * f[perm]``.  Only meaningful when box and body are symmetric.
        """
        ny, nx = self.ny, self.nx
        ju, iu = np.divmod(np.arange(self.nu), nx + 1)
        jv, iv = np.divmod(np.arange(self.nv), nx)
        perm = np.concatenate([self.uid(iu, ny - 1 - ju), self.vid(iv, ny - jv)])
        sign = np.concatenate([np.ones(self.nu), -np.ones(self.nv)])
        jc, ic = np.divmod(np.arange(self.ncells), nx)
        cperm = self.cid(ic, ny - 1 - jc)
        return perm, sign, cperm

    def is_mirror_symmetric(self) -> bool:
        x0, x1, y0, y1 = self.spec.box
        bx0, bx1, by0, by1 = self.spec.body
        return abs((y0 + y1) - (by0 + by1)) < 1e-12 * max(1.0, abs(y1 - y0))

    def summary(self) -> dict:
        return {
            "nx": self.nx, "ny": self.ny, "h": self.h,
            "fluid_cells": int(self.npres), "body_cells": int(self.ncells - self.npres),
            "free_faces": int(self.nfree), "outflow": self.outflow,
            "box": list(self.spec.box), "body": list(self.spec.body),
        }


def build_mesh(spec: MeshSpec | None = None, **overrides) -> Mesh:
    """Build the grid for ``spec`` (keyword overrides replace spec fields)."""
    if spec is None:
        spec = MeshSpec()
    if overrides:
        d = asdict(spec)
        d.update(overrides)
        spec = MeshSpec(**d)
    spec = MeshSpec(box=tuple(float(v) for v in spec.box), body=tuple(float(v) for v in spec.body),
                    h=float(spec.h), outflow=str(spec.outflow), dim=int(spec.dim))
    if spec.dim != 2:
        raise ValidationError("only dim=2 meshes are implemented")
    if spec.outflow not in OUTFLOW_KINDS:
        raise ValidationError(f"outflow must be one of {OUTFLOW_KINDS}")
    h = spec.h
    if not (h > 0):
        raise ValidationError("h must be positive")
    x0, x1, y0, y1 = spec.box
    bx0, bx1, by0, by1 = spec.body
    if not (x1 > x0 and y1 > y0 and bx1 > bx0 and by1 > by0):
        raise ValidationError("box and body must have positive extent")
    if h > min(bx1 - bx0, by1 - by0):
        raise ValidationError(f"h={h} is larger than the body")
    nx = _steps(x0, x1, h, "box width")
    ny = _steps(y0, y1, h, "box height")
    ib0 = _steps(x0, bx0, h, "body left edge offset")
    ib1 = _steps(x0, bx1, h, "body right edge offset")
    jb0 = _steps(y0, by0, h, "body bottom edge offset")
    jb1 = _steps(y0, by1, h, "body top edge offset")
    if min(ib1 - ib0, jb1 - jb0) < 4:
        raise ValidationError("resolution too coarse: fewer than 4 cells across the body")
    if ib0 < 1 or jb0 < 1 or ib1 > nx - 1 or jb1 > ny - 1:
        raise ValidationError("body touches the box boundary")

    nu = (nx + 1) * ny
    nv = nx * (ny + 1)
    kind = np.full(nu + nv, FREE, dtype=np.int8)
    ju, iu = np.divmod(np.arange(nu), nx + 1)
    jv, iv = np.divmod(np.arange(nv), nx)
    ku = kind[:nu]
    kv = kind[nu:]
    ku[iu == nx] = WALL
    if spec.outflow == "wall":
        ku[iu == 0] = WALL
    ku[(iu >= ib0) & (iu <= ib1) & (ju >= jb0) & (ju < jb1)] = BODY
    kv[(jv == 0) | (jv == ny)] = WALL
    kv[(iv >= ib0) & (iv < ib1) & (jv >= jb0) & (jv <= jb1)] = BODY

    comp = np.concatenate([np.zeros(nu, dtype=np.int64), np.ones(nv, dtype=np.int64)])
    free = kind == FREE
    nfree = int(free.sum())
    zmap = np.full(nu + nv, -1, dtype=np.int64)
    zmap[free] = np.arange(nfree)
    zmap[kind == BODY] = nfree + comp[kind == BODY]

    jc, ic = np.divmod(np.arange(nx * ny), nx)
    solid = (ic >= ib0) & (ic < ib1) & (jc >= jb0) & (jc < jb1)
    pmap = np.full(nx * ny, -1, dtype=np.int64)
    pmap[~solid] = np.arange(int((~solid).sum()))
    for arr in (kind, zmap, pmap):
        arr.setflags(write=False)
    return Mesh(spec=spec, nx=nx, ny=ny, ib0=ib0, ib1=ib1, jb0=jb0, jb1=jb1,
                face_kind=kind, zmap=zmap, pmap=pmap, nfree=nfree, npres=int((~solid).sum()))
