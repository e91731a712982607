"""Parabolic cylinders, tensor meshes, and the discrete calculus on them.

A cylinder is a time interval times a box.  Meshes are uniform tensor grids
with spatial step ``h = 1/M`` and time step ``tau = c_tau h**2`` (parabolic
aspect fixed under refinement).  Scalar fields are multilinear in space and
linear in time within each slab; vector fields are constant per space-time
cell.  All integrals are normalized by the measure of the domain.

Triadic cylinders at scale ``n`` have time extent ``9**n`` and spatial side
``3**n``, centered at the origin; they partition exactly into ``3**((2+d)(n-m))``
translates of the scale-``m`` cylinder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Cylinder",
    "Mesh",
    "ScalarField",
    "VectorField",
    "gradient",
    "constraint_residual",
    "msp_bound",
    "triadic_children",
    "submesh",
    "restrict_scalar",
    "restrict_vector",
]


class MeshError(ValueError):
    pass


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Cylinder:
    """Time interval times a box; optionally a triadic cylinder of index n."""

    t0: float
    t1: float
    box: tuple  # ((lo, hi), ...) per spatial axis
    n: int | None = None

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise MeshError(f"degenerate time interval ({self.t0}, {self.t1})")
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        object.__setattr__(self, "box", box)
        for lo, hi in box:
            if not lo < hi:
                raise MeshError(f"degenerate box edge ({lo}, {hi})")
        if self.n is not None:
            half_t, half_x = 9.0 ** self.n / 2.0, 3.0 ** self.n / 2.0
            ok = (abs(self.t0 + half_t) < 1e-12 and abs(self.t1 - half_t) < 1e-12
                  and all(abs(lo + half_x) < 1e-12 and abs(hi - half_x) < 1e-12
                          for lo, hi in box))
            if not ok:
                raise MeshError(f"extents do not match triadic index n={self.n}")

    @staticmethod
    def triadic(n: int, d: int) -> "Cylinder":
        ht, hx = 9.0 ** n / 2.0, 3.0 ** n / 2.0
        return Cylinder(-ht, ht, tuple((-hx, hx) for _ in range(d)), n=n)

    @staticmethod
    def box_cylinder(t0: float, t1: float, box: Sequence) -> "Cylinder":
        return Cylinder(t0, t1, tuple(tuple(e) for e in box))

    @property
    def d(self) -> int:
        return len(self.box)

    @property
    def duration(self) -> float:
        return self.t1 - self.t0

    @property
    def side_lengths(self) -> tuple:
        return tuple(hi - lo for lo, hi in self.box)

    @property
    def space_volume(self) -> float:
        return float(np.prod(self.side_lengths))

    @property
    def volume(self) -> float:
        return self.duration * self.space_volume

    def translate(self, dt: float, dx: Sequence[float]) -> "Cylinder":
        box = tuple((lo + dxi, hi + dxi) for (lo, hi), dxi in zip(self.box, dx))
        return Cylinder(self.t0 + dt, self.t1 + dt, box)


def triadic_children(cyl: Cylinder, m: int) -> list[Cylinder]:
    """Partition a triadic cylinder of index n into translates at scale m < n."""
    if cyl.n is None:
        raise MeshError("triadic_children requires a triadic cylinder")
    if m >= cyl.n:
        raise MeshError(f"child scale m={m} must be below n={cyl.n}")
    n, d = cyl.n, cyl.d
    kt = 9 ** (n - m)
    kx = 3 ** (n - m)
    child0 = Cylinder.triadic(m, d)
    out = []
    toff = [9.0 ** m * (i - (kt - 1) / 2.0) for i in range(kt)]
    xoff = [3.0 ** m * (i - (kx - 1) / 2.0) for i in range(kx)]
    for it in range(kt):
        for flat in range(kx ** d):
            idx = np.unravel_index(flat, (kx,) * d)
            out.append(child0.translate(toff[it], [xoff[i] for i in idx]))
    return out


# ---------------------------------------------------------------------------
# 1d building blocks (uniform grid with n cells of width h)


def mass1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n + 1, 2.0 * h / 3.0)
    main[0] = main[-1] = h / 3.0
    off = np.full(n, h / 6.0)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def stiff1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n + 1, 2.0 / h)
    main[0] = main[-1] = 1.0 / h
    off = np.full(n, -1.0 / h)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def avg1d(n: int) -> sp.csr_matrix:
    return sp.diags([np.full(n, 0.5), np.full(n, 0.5)], [0, 1],
                    shape=(n, n + 1), format="csr")


def diff1d(n: int, h: float) -> sp.csr_matrix:
    return sp.diags([np.full(n, -1.0 / h), np.full(n, 1.0 / h)], [0, 1],
                    shape=(n, n + 1), format="csr")


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class Mesh:
    """Uniform tensor mesh on a cylinder: M cells per unit length, tau = c_tau/M^2."""

    cylinder: Cylinder
    M: int
    c_tau: float = 1.0

    def __post_init__(self):
        if self.M < 2:
            raise MeshError(f"M must be >= 2, got {self.M}")
        if not 0.0 < self.c_tau <= 1.0:
            raise MeshError(f"c_tau must lie in (0, 1], got {self.c_tau}")
        for length in self.cylinder.side_lengths:
            nc = length * self.M
            if abs(nc - round(nc)) > 1e-9:
                raise MeshError(f"side length {length} not commensurate with M={self.M}")
        ns = self.cylinder.duration / self.tau
        if abs(ns - round(ns)) > 1e-9:
            raise MeshError(
                f"duration {self.cylinder.duration} not an integer multiple of tau={self.tau}")

    # -- sizes ----------------------------------------------------------------

    @property
    def d(self) -> int:
        return self.cylinder.d

    @property
    def h(self) -> float:
        return 1.0 / self.M

    @property
    def tau(self) -> float:
        return self.c_tau / self.M ** 2

    @cached_property
    def ncells_axis(self) -> tuple:
        return tuple(int(round(length * self.M)) for length in self.cylinder.side_lengths)

    @cached_property
    def nsteps(self) -> int:
        return int(round(self.cylinder.duration / self.tau))

    @property
    def nnodes_axis(self) -> tuple:
        return tuple(n + 1 for n in self.ncells_axis)

    @cached_property
    def nnodes(self) -> int:
        return int(np.prod(self.nnodes_axis))

    @cached_property
    def ncells(self) -> int:
        return int(np.prod(self.ncells_axis))

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    # -- coordinates ------------------------------------------------------------

    @cached_property
    def node_coords(self) -> list:
        """Per-axis node coordinate arrays."""
        return [lo + np.arange(n + 1) * self.h
                for (lo, _), n in zip(self.cylinder.box, self.ncells_axis)]

    @cached_property
    def cell_centers(self) -> list:
        return [lo + (np.arange(n) + 0.5) * self.h
                for (lo, _), n in zip(self.cylinder.box, self.ncells_axis)]

    @cached_property
    def time_levels(self) -> np.ndarray:
        return self.cylinder.t0 + np.arange(self.nsteps + 1) * self.tau

    @cached_property
    def slab_midtimes(self) -> np.ndarray:
        return self.cylinder.t0 + (np.arange(self.nsteps) + 0.5) * self.tau

    def node_grid(self) -> list:
        """Broadcastable meshgrid of node coordinates (ij indexing)."""
        return np.meshgrid(*self.node_coords, indexing="ij")

    def cell_grid(self) -> list:
        return np.meshgrid(*self.cell_centers, indexing="ij")

    # -- spatial operators ------------------------------------------------------

    @cached_property
    def mass(self) -> sp.csr_matrix:
        """Consistent Q1 mass matrix on the spatial grid."""
        out = mass1d(self.ncells_axis[0], self.h)
        for n in self.ncells_axis[1:]:
            out = sp.kron(out, mass1d(n, self.h), format="csr")
        return out

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Exact Q1 stiffness (sum over axes of kron(mass,...,stiff,...,mass))."""
        d = self.d
        out = None
        for a in range(d):
            term = None
            for b in range(d):
                f = stiff1d(self.ncells_axis[b], self.h) if a == b \
                    else mass1d(self.ncells_axis[b], self.h)
                term = f if term is None else sp.kron(term, f, format="csr")
            out = term if out is None else out + term
        return out.tocsr()

    @cached_property
    def grad_ops(self) -> list:
        """Cell-averaged gradient operators, one (ncells x nnodes) matrix per axis."""
        d = self.d
        ops = []
        for a in range(d):
            term = None
            for b in range(d):
                f = diff1d(self.ncells_axis[b], self.h) if a == b else avg1d(self.ncells_axis[b])
                term = f if term is None else sp.kron(term, f, format="csr")
            ops.append(term.tocsr())
        return ops

    @cached_property
    def cell_avg(self) -> sp.csr_matrix:
        """Cell-average of the multilinear interpolant (mean of cell corners)."""
        out = avg1d(self.ncells_axis[0])
        for n in self.ncells_axis[1:]:
            out = sp.kron(out, avg1d(n), format="csr")
        return out

    @cached_property
    def grad_stacked(self) -> sp.csr_matrix:
        """All gradient components stacked: (d*ncells) x nnodes."""
        return sp.vstack(self.grad_ops, format="csr")

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        idx = np.arange(self.nnodes).reshape(self.nnodes_axis)
        sl = tuple(slice(1, -1) for _ in range(self.d))
        return idx[sl].ravel()

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        mask = np.ones(self.nnodes, dtype=bool)
        mask[self.interior_nodes] = False
        return np.nonzero(mask)[0]

    def selector(self, nodes: np.ndarray) -> sp.csr_matrix:
        """nnodes x len(nodes) injection matrix."""
        return sp.csr_matrix((np.ones(len(nodes)), (nodes, np.arange(len(nodes)))),
                             shape=(self.nnodes, len(nodes)))

    # -- coefficient sampling -----------------------------------------------------

    def coefficients(self, fld, k0: int, k1: int) -> np.ndarray:
        """Matrices at cell centers for slabs k0..k1-1; shape (k1-k0, ncells, d, d)."""
        tmid = self.slab_midtimes[k0:k1][:, None]
        grids = np.meshgrid(*self.cell_centers, indexing="ij")
        xs = [g.ravel()[None, :] for g in grids]
        return fld.at(tmid, xs)


# ---------------------------------------------------------------------------
# fields


@dataclass
class ScalarField:
    """Nodal values at every time level: shape (nsteps+1, nnodes)."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        want = (self.mesh.nsteps + 1, self.mesh.nnodes)
        if v.shape != want:
            raise MeshError(f"scalar field shape {v.shape} != {want}")
        if not np.isfinite(v).all():
            raise MeshError("scalar field contains non-finite entries")
        self.values = v

    @staticmethod
    def from_function(mesh: Mesh, fn: Callable) -> "ScalarField":
        """Sample ``fn(t, x_1, ..., x_d)`` at nodes and time levels."""
        grids = [g.ravel() for g in mesh.node_grid()]
        vals = np.empty((mesh.nsteps + 1, mesh.nnodes))
        for l, t in enumerate(mesh.time_levels):
            vals[l] = np.asarray(fn(t, *grids), dtype=float)
        return ScalarField(mesh, vals)

    @staticmethod
    def zeros(mesh: Mesh) -> "ScalarField":
        return ScalarField(mesh, np.zeros((mesh.nsteps + 1, mesh.nnodes)))

    def cell_means(self) -> np.ndarray:
        """Exact integral mean over each space-time cell, shape (nsteps, ncells)."""
        lev = self.values @ self.mesh.cell_avg.T
        return 0.5 * (lev[:-1] + lev[1:])

    def mean(self) -> float:
        """Normalized integral over the whole cylinder."""
        return float(self.cell_means().mean())

    def copy(self) -> "ScalarField":
        return ScalarField(self.mesh, self.values.copy())


@dataclass
class VectorField:
    """One d-vector per space-time cell: shape (nsteps, ncells, d)."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        want = (self.mesh.nsteps, self.mesh.ncells, self.mesh.d)
        if v.shape != want:
            raise MeshError(f"vector field shape {v.shape} != {want}")
        if not np.isfinite(v).all():
            raise MeshError("vector field contains non-finite entries")
        self.values = v

    @staticmethod
    def zeros(mesh: Mesh) -> "VectorField":
        return VectorField(mesh, np.zeros((mesh.nsteps, mesh.ncells, mesh.d)))

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=(0, 1))

    def copy(self) -> "VectorField":
        return VectorField(self.mesh, self.values.copy())


def gradient(u: ScalarField) -> VectorField:
    """Cell-averaged spatial gradient at the time midpoint of each slab."""
    mesh = u.mesh
    mid = 0.5 * (u.values[:-1] + u.values[1:])           # (K, nnodes)
    comps = [mid @ G.T for G in mesh.grad_ops]            # each (K, ncells)
    return VectorField(mesh, np.stack(comps, axis=-1))


def constraint_residual(v: ScalarField, h: VectorField, mode: str) -> float:
    """Max over discrete test functions of the normalized defect in dt v = div h.

    ``mode='zero-lateral-test'`` tests against interior nodal functions (the
    pairing used by the free-boundary candidate space); ``'free-lateral-test'``
    tests against all nodal functions (zero normal flux holds weakly).
    """
    mesh = v.mesh
    if h.mesh is not mesh and (h.mesh.cylinder != mesh.cylinder or h.mesh.M != mesh.M
                               or h.mesh.c_tau != mesh.c_tau):
        raise MeshError("scalar and vector fields live on different meshes")
    if mode not in ("zero-lateral-test", "free-lateral-test"):
        raise MeshError(f"unknown mode {mode!r}")
    tau, vol = mesh.tau, mesh.cell_volume
    dv = v.values[1:] - v.values[:-1]                     # (K, nnodes)
    rows = dv @ mesh.mass.T
    for a, G in enumerate(mesh.grad_ops):
        rows += tau * vol * (h.values[:, :, a] @ G)
    # test function chi_slab * psi_i has squared H1-type norm tau * psi.(M+L)psi,
    # which for a nodal basis function is the diagonal entry of M + L
    psi_norm2 = (mesh.mass + mesh.stiffness).diagonal()
    if mode == "zero-lateral-test":
        rows = rows[:, mesh.interior_nodes]
        psi_norm2 = psi_norm2[mesh.interior_nodes]
    scale = np.sqrt(tau * psi_norm2)
    return float(np.max(np.abs(rows) / scale[None, :])) if rows.size else 0.0


# ---------------------------------------------------------------------------
# triadic averages and the multiscale bound


def triadic_cell_block_means(f: ScalarField, m: int) -> np.ndarray:
    """Averages (f)_{z+child} over the scale-m triadic children, flattened.

    The mesh must live on a triadic cylinder with index n > m and resolve the
    children exactly (always true for integer M).
    """
    mesh = f.mesh
    n = mesh.cylinder.n
    if n is None or m >= n:
        raise MeshError("block means need a triadic cylinder and m < n")
    means = f.cell_means()                                # (K, ncells)
    K = mesh.nsteps
    bt = int(round((9 ** m) * mesh.M ** 2 / mesh.c_tau))
    shape = [K // bt, bt]
    for nc in mesh.ncells_axis:
        bx = 3 ** m * mesh.M
        shape += [nc // bx, bx]
    a = means.reshape(shape)
    # average over the fine axes (1, 3, 5, ...)
    fine_axes = tuple(range(1, len(shape), 2))
    return a.mean(axis=fine_axes).ravel()


def msp_bound(f: ScalarField, on: Cylinder | None = None) -> float:
    """L2 norm plus scale-weighted root-mean-square triadic averages.

    Returns ``||f||_L2 + sum_{m=0}^{n-1} 3^m ( |Z_m|^{-1} sum_z (f)_{z+child_m}^2 )^{1/2}``
    with unit constants; the calibrated comparison constant against the dual
    norm lives in :mod:`parhom.calibration`.
    """
    mesh = f.mesh
    cyl = on if on is not None else mesh.cylinder
    if cyl.n is None:
        raise MeshError("msp_bound requires a triadic cylinder")
    if mesh.cylinder != cyl:
        raise MeshError("field mesh does not live on the given cylinder")
    n = cyl.n
    means = f.cell_means()
    total = float(np.sqrt((means ** 2).mean()))  # midpoint-quadrature L2
    for m in range(0, n):
        bm = triadic_cell_block_means(f, m)
        total += 3.0 ** m * float(np.sqrt(np.mean(bm ** 2)))
    return total


# ---------------------------------------------------------------------------
# restriction to subcylinders


def submesh(mesh: Mesh, subcyl: Cylinder) -> tuple:
    """Mesh on an aligned subcylinder plus (level, node, cell) index arrays."""
    sub = Mesh(subcyl, mesh.M, mesh.c_tau)
    l0 = (subcyl.t0 - mesh.cylinder.t0) / mesh.tau
    if abs(l0 - round(l0)) > 1e-9:
        raise MeshError("subcylinder not aligned with mesh in time")
    l0 = int(round(l0))
    levels = l0 + np.arange(sub.nsteps + 1)
    node_ax, cell_ax = [], []
    for ax in range(mesh.d):
        off = (subcyl.box[ax][0] - mesh.cylinder.box[ax][0]) * mesh.M
        if abs(off - round(off)) > 1e-9:
            raise MeshError("subcylinder not aligned with mesh in space")
        off = int(round(off))
        node_ax.append(off + np.arange(sub.ncells_axis[ax] + 1))
        cell_ax.append(off + np.arange(sub.ncells_axis[ax]))
    nodes = np.ravel_multi_index(np.meshgrid(*node_ax, indexing="ij"),
                                 mesh.nnodes_axis).ravel()
    cells = np.ravel_multi_index(np.meshgrid(*cell_ax, indexing="ij"),
                                 mesh.ncells_axis).ravel()
    return sub, levels, nodes, cells


def restrict_scalar(f: ScalarField, subcyl: Cylinder) -> ScalarField:
    sub, levels, nodes, _ = submesh(f.mesh, subcyl)
    return ScalarField(sub, f.values[np.ix_(levels, nodes)])


def restrict_vector(f: VectorField, subcyl: Cylinder) -> VectorField:
    sub, levels, _, cells = submesh(f.mesh, subcyl)
    return VectorField(sub, f.values[np.ix_(levels[:-1], cells)])


# ---------------------------------------------------------------------------
# export


def export_csv(f: ScalarField, path: str) -> None:
    """One row per (time level, node): t, x_1..x_d, value."""
    mesh = f.mesh
    grids = [g.ravel() for g in mesh.node_grid()]
    with open(path, "w") as fh:
        fh.write("t," + ",".join(f"x{i+1}" for i in range(mesh.d)) + ",value\n")
        for l, t in enumerate(mesh.time_levels):
            for j in range(mesh.nnodes):
                coords = ",".join(format(g[j], ".17g") for g in grids)
                fh.write(f"{t:.17g},{coords},{f.values[l, j]:.17g}\n")


def export_raw(f, path_prefix: str) -> None:
    """Little-endian float64 block plus a JSON sidecar describing the shape."""
    vals = np.ascontiguousarray(f.values, dtype="<f8")
    vals.tofile(path_prefix + ".f64")
    kind = "scalar" if isinstance(f, ScalarField) else "vector"
    meta = {
        "kind": kind,
        "shape": list(vals.shape),
        "dtype": "<f8",
        "order": "C",
        "cylinder": {"t0": f.mesh.cylinder.t0, "t1": f.mesh.cylinder.t1,
                     "box": [list(e) for e in f.mesh.cylinder.box]},
        "M": f.mesh.M,
        "c_tau": f.mesh.c_tau,
    }
    with open(path_prefix + ".json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
