"""End-to-end homogenization-error and large-scale regularity experiments.

``homogenization_error`` solves the oscillating-coefficient problem with
``a(t/eps^2, x/eps)`` and the frozen-matrix problem with identical data on
the same mesh, then measures the gradient and flux differences in the dual
parabolic norm and the solution difference in L2 -- the three error
functionals whose decay in eps quantifies homogenization (including the weak
convergence of gradients and fluxes).  ``rate_scan`` aggregates over seeds
and fits a log-log slope.  ``lipschitz_diagnostic`` measures large-scale
interior gradient-norm ratios of caloric functions, the C^{0,1}-type
quantity.  ``two_scale_defect`` reports the energy distance between the
heterogeneous solution and the cutoff corrector expansion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import CoefficientField, FieldSpec, RescaledField, sample_field
from .mesh import (Cylinder, Mesh, MeshError, ScalarField, VectorField,
                   gradient, restrict_vector, restrict_scalar)
from .norms import norm
from .solver import CDProblem, solve_cd

__all__ = ["ErrorReport", "homogenization_error", "rate_scan",
           "lipschitz_diagnostic", "two_scale_defect", "default_cylinder",
           "boundary_datum"]


@dataclass
class ErrorReport:
    eps: float
    grad_dual_err: float
    flux_dual_err: float
    l2_err: float
    datum: str
    seed: int
    M: int
    c_tau: float

    def row(self) -> dict:
        return {"eps": self.eps, "seed": self.seed, "datum": self.datum,
                "grad_dual_err": self.grad_dual_err,
                "flux_dual_err": self.flux_dual_err, "l2_err": self.l2_err,
                "M": self.M, "c_tau": self.c_tau}


def default_cylinder(d: int) -> Cylinder:
    """The unit experiment cylinder (-1/4, 0) x (-1/2, 1/2)^d."""
    return Cylinder.box_cylinder(-0.25, 0.0, [(-0.5, 0.5)] * d)


_DATA = {
    "affine": lambda t, *x: x[0],
    "affine+sine": lambda t, *x: x[0] + 0.3 * np.sin(np.pi * (x[1] if len(x) > 1 else x[0])),
    "bump": lambda t, *x: np.exp(-4.0 * sum(xi ** 2 for xi in x)),
}


def boundary_datum(name: str, mesh: Mesh) -> ScalarField:
    if name not in _DATA:
        raise MeshError(f"unknown boundary datum {name!r}; have {sorted(_DATA)}")
    return ScalarField.from_function(mesh, _DATA[name])


def _flux_field(mesh: Mesh, fld, grad: VectorField) -> VectorField:
    K, nc = mesh.nsteps, mesh.ncells
    out = np.empty_like(grad.values)
    chunk = max(1, min(K, 4_000_000 // max(1, nc)))
    for k0 in range(0, K, chunk):
        k1 = min(K, k0 + chunk)
        a = mesh.coefficients(fld, k0, k1)
        out[k0:k1] = np.einsum("kcab,kcb->kca", a, grad.values[k0:k1])
    return VectorField(mesh, out)


def homogenization_error(spec: FieldSpec, eps: float, f: str | ScalarField,
                         ahom_est: np.ndarray, seed: int,
                         cells_per_eps: int = 4, c_tau: float = 1.0,
                         cylinder: Cylinder | None = None) -> ErrorReport:
    """Errors between the eps-problem and the homogenized problem.

    The mesh must resolve the parabolic eps-cells: at least ``cells_per_eps``
    cells per eps in space (time follows from the parabolic aspect).
    """
    d = spec.dimension
    cyl = cylinder or default_cylinder(d)
    M = int(round(cells_per_eps / eps))
    if abs(M * eps - cells_per_eps) > 1e-9 or M < cells_per_eps:
        raise MeshError(
            f"eps={eps} needs a mesh with M = {cells_per_eps}/eps cells per "
            f"unit length; got a non-integer or under-resolved M={M}")
    mesh = Mesh(cyl, M, c_tau)
    fld = RescaledField(sample_field(spec, seed), eps)
    datum = f if isinstance(f, str) else "custom"
    fdata = boundary_datum(f, mesh) if isinstance(f, str) else f
    u_eps = solve_cd(CDProblem(fld, mesh, fdata))
    ahom_fld = sample_field(FieldSpec.constant(np.asarray(ahom_est, dtype=float)), 0)
    u_hom = solve_cd(CDProblem(ahom_fld, mesh, fdata))
    g_eps = gradient(u_eps)
    g_hom = gradient(u_hom)
    gdiff = VectorField(mesh, g_eps.values - g_hom.values)
    flux_eps = _flux_field(mesh, fld, g_eps)
    flux_hom = _flux_field(mesh, ahom_fld, g_hom)
    fdiff = VectorField(mesh, flux_eps.values - flux_hom.values)
    udiff = ScalarField(mesh, u_eps.values - u_hom.values)
    return ErrorReport(eps=eps,
                       grad_dual_err=norm(gdiff, "hatH-1par"),
                       flux_dual_err=norm(fdiff, "hatH-1par"),
                       l2_err=norm(udiff, "L2"),
                       datum=datum, seed=seed, M=M, c_tau=c_tau)


@dataclass
class RateScan:
    rows: list
    means: list
    alphas: dict        # fitted log-log slope per error kind, or None


def rate_scan(spec: FieldSpec, eps_list, f: str, ahom_est: np.ndarray,
              N: int, seed0: int, cells_per_eps: int = 4,
              threads: int = 1) -> RateScan:
    """Mean errors with standard errors per eps, plus fitted slopes."""
    eps_list = list(eps_list)
    rows = []
    means = []
    from concurrent.futures import ThreadPoolExecutor
    for eps in eps_list:
        reps = [None] * N

        def work(k):
            reps[k] = homogenization_error(spec, eps, f, ahom_est, seed0 + k,
                                           cells_per_eps=cells_per_eps)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(work, range(N)))
        else:
            for k in range(N):
                work(k)
        rows.extend(r.row() for r in reps)
        entry = {"eps": eps, "N": N}
        for kind in ("grad_dual_err", "flux_dual_err", "l2_err"):
            vals = np.array([getattr(r, kind) for r in reps])
            entry[kind] = float(vals.mean())
            entry[kind + "_stderr"] = float(vals.std(ddof=1) / np.sqrt(N)) if N > 1 else 0.0
        means.append(entry)
    alphas = {}
    for kind in ("grad_dual_err", "flux_dual_err", "l2_err"):
        vals = np.array([m[kind] for m in means])
        if (vals > 1e-13).all() and len(vals) >= 2:
            # slope of log err against log eps: err ~ eps^alpha, alpha > 0 = decay
            alphas[kind] = float(np.polyfit(np.log(eps_list), np.log(vals), 1)[0])
        else:
            alphas[kind] = None
    return RateScan(rows=rows, means=means, alphas=alphas)


def lipschitz_diagnostic(spec: FieldSpec, R: int, r_list, N: int, seed0: int,
                         M: int = 2, c_tau: float = 1.0) -> dict:
    """Interior gradient-norm ratios of caloric samples on nested cylinders.

    Samples solve the heterogeneous equation on Q_R = (-R^2, 0) x (-R, R)^d
    with random smooth boundary data; for each r the ratio
    ||grad u||_{L2(Q_r)} / ||grad u||_{L2(Q_R)} is recorded.
    """
    d = spec.dimension
    r_list = sorted(r_list)
    if r_list[0] < 1 or r_list[-1] > R:
        raise MeshError("radii must satisfy 1 <= r <= R")
    cyl = Cylinder.box_cylinder(-float(R * R), 0.0, [(-float(R), float(R))] * d)
    mesh = Mesh(cyl, M, c_tau)
    ratios = np.empty((N, len(r_list)))
    for k in range(N):
        fld = sample_field(spec, seed0 + k)
        rng = np.random.default_rng(seed0 + 7919 * k)
        cs = rng.standard_normal(2 * d + 1)

        def datum(t, *x):
            out = cs[0] * np.ones_like(x[0])
            for a in range(d):
                out = out + cs[1 + 2 * a] * np.sin(np.pi * x[a] / R) \
                    + cs[2 + 2 * a] * np.cos(0.5 * np.pi * x[a] / R)
            return out

        f = ScalarField.from_function(mesh, datum)
        u = solve_cd(CDProblem(fld, mesh, f))
        g = gradient(u)
        denom = norm(g, "L2") * np.sqrt(cyl.volume)
        for j, r in enumerate(r_list):
            sub = Cylinder.box_cylinder(-float(r * r), 0.0,
                                        [(-float(r), float(r))] * d)
            gr = restrict_vector(g, sub)
            ratios[k, j] = norm(gr, "L2") * np.sqrt(sub.volume) / max(denom, 1e-300)
    out = {"R": R, "r_list": list(r_list), "N": N,
           "max_ratio": ratios.max(axis=0).tolist(),
           "median_ratio": np.median(ratios, axis=0).tolist(),
           "q90_ratio": np.quantile(ratios, 0.9, axis=0).tolist()}
    return out


def _smoothstep(theta: np.ndarray) -> np.ndarray:
    t = np.clip(theta, 0.0, 1.0)
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


def cutoff(mesh: Mesh, r: float) -> ScalarField:
    """Tensor smoothstep cutoff: 1 inside the 2r-margin, 0 outside the r-margin."""
    cyl = mesh.cylinder
    grids = [g.ravel() for g in mesh.node_grid()]
    vals = np.ones((mesh.nsteps + 1, mesh.nnodes))
    tgrid = mesh.time_levels
    zt = _smoothstep((tgrid - cyl.t0 - r * r) / max(r * r, 1e-300))
    for a, (lo, hi) in enumerate(cyl.box):
        za = _smoothstep((grids[a] - lo - r) / r) * _smoothstep((hi - r - grids[a]) / r)
        vals *= za[None, :]
    vals *= zt[:, None]
    return ScalarField(mesh, vals)


def two_scale_defect(spec: FieldSpec, eps: float, f: str, ahom_est: np.ndarray,
                     bundles: list, seed: int, cells_per_eps: int = 4,
                     r: float | None = None) -> dict:
    """Distance between u_eps and the cutoff corrector expansion (reported).

    ``bundles`` supplies one corrector per coordinate direction at the scale
    matching eps = 3^{-n}; ``r`` is the mesoscale (default eps^{1/4}).
    """
    d = spec.dimension
    cyl = default_cylinder(d)
    M = int(round(cells_per_eps / eps))
    mesh = Mesh(cyl, M)
    fld = RescaledField(sample_field(spec, seed), eps)
    fdata = boundary_datum(f, mesh)
    u_eps = solve_cd(CDProblem(fld, mesh, fdata))
    ahom_fld = sample_field(FieldSpec.constant(np.asarray(ahom_est, dtype=float)), 0)
    u_hom = solve_cd(CDProblem(ahom_fld, mesh, fdata))
    r = r if r is not None else eps ** 0.25
    zeta = cutoff(mesh, r)
    # nodal du/dx_a of the homogenized solution via averaged cell gradients
    g_hom = gradient(u_hom)
    w = u_hom.values.copy()
    grids = [g.ravel() for g in mesh.node_grid()]
    tl = mesh.time_levels
    for a in range(d):
        b = bundles[a]
        phin = b.phi
        pts = [np.clip(grids[x] / eps, phin.mesh.cylinder.box[x][0],
                       phin.mesh.cylinder.box[x][1] - 1e-12) for x in range(d)]
        du = _node_values_from_cells(mesh, g_hom, a)
        for l, t in enumerate(tl):
            ts = np.clip(t / (eps * eps), phin.mesh.cylinder.t0,
                         phin.mesh.cylinder.t1 - 1e-12)
            phi_vals = _interp_scalar(phin, ts, pts)
            w[l] += eps * zeta.values[l] * du[min(l, mesh.nsteps - 1)] * phi_vals
    diff = ScalarField(mesh, u_eps.values - w)
    gdiff = gradient(diff)
    return {"eps": eps, "r": r,
            "l2": norm(diff, "L2"),
            "grad_l2": norm(gdiff, "L2"),
            "ref_l2": norm(ScalarField(mesh, u_eps.values - u_hom.values), "L2")}


def _node_values_from_cells(mesh: Mesh, g: VectorField, a: int) -> np.ndarray:
    """Nodal values of one gradient component by adjacent-cell averaging."""
    counts = mesh.cell_avg.T @ np.ones(mesh.ncells)
    vals = g.values[:, :, a] @ mesh.cell_avg
    return vals / counts[None, :]


def _interp_scalar(f: ScalarField, t: float, pts: list) -> np.ndarray:
    """Multilinear space / linear time interpolation of a scalar field."""
    mesh = f.mesh
    lev = (t - mesh.cylinder.t0) / mesh.tau
    l0 = int(np.clip(np.floor(lev), 0, mesh.nsteps - 1))
    wt = lev - l0
    vals = (1 - wt) * f.values[l0] + wt * f.values[l0 + 1]
    grid = vals.reshape(mesh.nnodes_axis)
    coords = [(np.asarray(p) - mesh.cylinder.box[a][0]) / mesh.h
              for a, p in enumerate(pts)]
    idx = []
    wts = []
    for a, c in enumerate(coords):
        i0 = np.clip(np.floor(c).astype(int), 0, mesh.ncells_axis[a] - 1)
        idx.append(i0)
        wts.append(c - i0)
    if mesh.d == 1:
        return (1 - wts[0]) * grid[idx[0]] + wts[0] * grid[idx[0] + 1]
    if mesh.d == 2:
        i, j = idx
        wx, wy = wts
        return ((1 - wx) * (1 - wy) * grid[i, j] + wx * (1 - wy) * grid[i + 1, j]
                + (1 - wx) * wy * grid[i, j + 1] + wx * wy * grid[i + 1, j + 1])
    i, j, k = idx
    wx, wy, wz = wts
    out = np.zeros_like(wx)
    for dx, fx in ((0, 1 - wx), (1, wx)):
        for dy, fy in ((0, 1 - wy), (1, wy)):
            for dz, fz in ((0, 1 - wz), (1, wz)):
                out += fx * fy * fz * grid[i + dx, j + dy, k + dz]
    return out
