"""Cauchy-Dirichlet solves: implicit time stepping and the variational backend.

``solve_cd`` marches the heterogeneous equation dt u = div(a grad u) + w* by
implicit Euler with coefficients frozen at slab midpoints; ``solve_dual``
marches the time-reversed equation for the transposed coefficients.  The
variational backend minimizes the nonnegative functional

    J[u, w*] = inf_g { integral of A(grad u, g) - grad u . g :
                       -div g = w* - dt u }

whose minimum is zero exactly at the solution; with right-endpoint gradient
quadrature in time its Euler-Lagrange system *is* the implicit Euler scheme,
so the two backends agree to solver precision and cross-validate each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .field import CoefficientField
from .kernel import KernelProblem, KernelSolver
from .mesh import Mesh, MeshError, ScalarField, VectorField

__all__ = ["CDProblem", "solve_cd", "solve_dual", "variational_solve"]


@dataclass
class CDProblem:
    """Initial-boundary data for a parabolic solve on a mesh.

    ``f`` supplies the boundary data (its trace on the parabolic boundary:
    lateral + initial for forward, lateral + final for the dual);
    ``w_star`` is an optional right-hand side.
    """

    field: CoefficientField
    mesh: Mesh
    f: ScalarField
    w_star: ScalarField | None = None
    direction: str = "forward"

    def __post_init__(self):
        if self.direction not in ("forward", "dual"):
            raise MeshError("direction must be 'forward' or 'dual'")
        if self.f.mesh is not self.mesh and self.f.mesh != self.mesh:
            raise MeshError("boundary data lives on a different mesh")


class StepFailure(RuntimeError):
    def __init__(self, msg, step, residual):
        super().__init__(msg)
        self.step = step
        self.residual = residual


def _stiffness_for(mesh: Mesh, a: np.ndarray) -> sp.csr_matrix:
    """vol * Gbar' a Gbar for cellwise matrices a (one slab)."""
    d = mesh.d
    out = None
    for ia in range(d):
        for ib in range(d):
            w = a[:, ia, ib] * mesh.cell_volume
            term = mesh.grad_ops[ia].T @ sp.diags(w) @ mesh.grad_ops[ib]
            out = term if out is None else out + term
    return out.tocsr()


def _march(fld: CoefficientField, mesh: Mesh, f: ScalarField,
           w_star: ScalarField | None, transpose: bool, reverse: bool,
           residual_tol: float = 1e-10) -> ScalarField:
    """Implicit Euler; ``reverse`` marches final->initial (dual orientation)."""
    K = mesh.nsteps
    tau = mesh.tau
    interior = mesh.interior_nodes
    boundary = mesh.boundary_nodes
    Msp = mesh.mass
    u = np.empty((K + 1, mesh.nnodes))
    if reverse:
        u[K] = f.values[K]
    else:
        u[0] = f.values[0]
    wbar = None
    if w_star is not None:
        wbar = 0.5 * (w_star.values[:-1] + w_star.values[1:]) @ Msp.T
    lu = None
    cached_cells = None
    order = range(K - 1, -1, -1) if reverse else range(K)
    for k in order:
        a = mesh.coefficients(fld, k, k + 1)[0]
        if transpose:
            a = np.swapaxes(a, -1, -2)
        key = a.tobytes()
        if cached_cells != key:
            L = _stiffness_for(mesh, a)
            Asys = (Msp / tau + L).tocsr()
            lu = spla.splu(Asys[interior][:, interior].tocsc())
            A_ib = Asys[interior][:, boundary]
            cached_cells = key
        known_level = k + 1 if reverse else k
        new_level = k if reverse else k + 1
        u[new_level] = f.values[new_level]
        rhs = (Msp @ u[known_level])[interior] / tau
        if wbar is not None:
            rhs = rhs + wbar[k][interior]
        rhs = rhs - A_ib @ u[new_level][boundary]
        sol = lu.solve(rhs)
        u[new_level][interior] = sol
        # verify the linear solve met its contract
        r = (Asys @ u[new_level])[interior] - ((Msp @ u[known_level])[interior] / tau)
        if wbar is not None:
            r = r - wbar[k][interior]
        rel = np.linalg.norm(r) / max(1.0, np.linalg.norm(rhs))
        if rel > residual_tol:
            raise StepFailure(
                f"linear step {k} missed residual contract: {rel:.2e}", k, rel)
    return ScalarField(mesh, u)


def solve_cd(p: CDProblem, residual_tol: float = 1e-10) -> ScalarField:
    """Implicit-Euler solution matching the boundary data on the parabolic boundary."""
    if p.direction == "dual":
        return solve_dual(p, residual_tol)
    return _march(p.field, p.mesh, p.f, p.w_star, transpose=False, reverse=False,
                  residual_tol=residual_tol)


def solve_dual(p: CDProblem, residual_tol: float = 1e-10) -> ScalarField:
    """Time-reversed solve for the transposed coefficients (final data given)."""
    return _march(p.field, p.mesh, p.f, p.w_star, transpose=True, reverse=True,
                  residual_tol=residual_tol)


def variational_solve(p: CDProblem, method: str = "direct"):
    """Minimize the well-posedness functional; returns (u, jmin, kkt_residual).

    The functional is jointly minimized over (u, g) subject to the discrete
    divergence constraint; its minimum is zero (to solver precision) and the
    minimizer reproduces :func:`solve_cd` exactly under right-endpoint
    quadrature.
    """
    if p.direction != "forward":
        raise MeshError("variational backend handles forward problems")
    mesh = p.mesh
    K, d = mesh.nsteps, mesh.d
    # offset scalar: full boundary field; unknown v vanishes on lateral+initial
    prob = KernelProblem(mesh, p.field, "sqcup", tilt=True, tquad="right")
    solver = KernelSolver(prob, method=method)
    # gradient offset: right-endpoint gradient of f
    Gf = np.empty((K, mesh.ncells, d))
    for a in range(d):
        Gf[:, :, a] = p.f.values[1:] @ mesh.grad_ops[a].T
    S_off = np.concatenate([Gf, np.zeros_like(Gf)], axis=-1)
    # constraint data: tau (M wbar*) - M (f_{k+1} - f_k) on interior tests
    Msp = mesh.mass
    dfm = (p.f.values[1:] - p.f.values[:-1]) @ Msp.T
    b = -dfm[:, mesh.interior_nodes]
    if p.w_star is not None:
        wbar = 0.5 * (p.w_star.values[:-1] + p.w_star.values[1:]) @ Msp.T
        b = b + mesh.tau * wbar[:, mesh.interior_nodes]
    res = solver.solve(S_off=S_off, b=b)
    u = ScalarField(mesh, p.f.values + res.v)
    return u, res.value, res.kkt_residual
