"""Finite-volume correctors extracted from the duality-defect maximizers.

The corrector with slope e at scale n lives on the host cylinder of scale
n+1.  Its gradient and flux are read off the maximizer S of the duality
defect at X_e = -(e, ahom e):

    grad u = 1/2 (pi_1 S + pi_2 A S),     a grad u = 1/2 (pi_2 S + pi_1 A S),

where pi_1, pi_2 project onto the first/second d components.  The scalar
potential is recovered by a space-time least-squares solve (gradient match
plus the interior-tested evolution rows), which also measures the curl
defect of the discrete gradient; phi = u - e.x is normalized to zero mean
over the inner cylinder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._pencil import KronPencilSolver, SymTridiag
from .field import CoefficientField, bigA
from .kernel import KernelProblem, KernelSolver
from .mesh import (Cylinder, Mesh, MeshError, ScalarField, VectorField,
                   restrict_scalar, restrict_vector)
from .norms import norm

__all__ = ["CorrectorBundle", "build_corrector", "corrector_error"]


@dataclass
class CorrectorBundle:
    e: np.ndarray
    n: int
    ahom_est: np.ndarray
    phi: ScalarField            # on the host cylinder box_{n+1}
    grad_u: VectorField         # e + grad phi (from the maximizer, exact)
    flux: VectorField           # a (e + grad phi) (from the maximizer, exact)
    curl_defect: float          # least-squares reconstruction residual
    evolution_defect: float     # interior-tested evolution row residual
    kkt_residual: float
    seed: int


def _apply_bigA(mesh: Mesh, fld: CoefficientField, S: np.ndarray) -> np.ndarray:
    K, nc = mesh.nsteps, mesh.ncells
    out = np.empty_like(S)
    chunk = max(1, min(K, 4_000_000 // max(1, nc)))
    for k0 in range(0, K, chunk):
        k1 = min(K, k0 + chunk)
        A = bigA(mesh.coefficients(fld, k0, k1))
        out[k0:k1] = np.einsum("kcab,kcb->kca", A, S[k0:k1])
    return out


def _integrate_gradient(mesh: Mesh, g: VectorField, mrows: np.ndarray):
    """Potential u with cell-averaged gradient ~ g and evolution rows ~ mrows.

    Least squares over nodal space-time fields:
        vol * sum_k |Gbar ubar_k - g_k|^2  +  w_t * sum_k |M du_k - mrows_k|^2
    solved exactly through the Kronecker pencil.  Returns (u values,
    gradient defect, evolution defect).
    """
    K = mesh.nsteps
    d = mesh.d
    vol = mesh.cell_volume
    interior = mesh.interior_nodes
    Msp = mesh.mass
    RtM = Msp[interior].toarray()
    A = None
    for a in range(d):
        term = (mesh.grad_ops[a].T @ mesh.grad_ops[a]) * vol
        A = term if A is None else A + term
    B = RtM.T @ RtM
    # weights: balance the two terms at the scale of a unit gradient
    w_t = vol / (Msp.diagonal().mean() ** 2 * K) * mesh.nnodes
    # time-smoothness tie-break: boundary-mode time profiles are invisible to
    # the interior-tested evolution rows; a small mass-weighted difference
    # penalty selects the time-smoothest reconstruction (exact on consistent
    # data, where the true potential already has zero penalty gradient)
    Bmat = w_t * B
    gamma = 1e-4 * w_t * (np.trace(B) / Msp.diagonal().sum())
    Bmat = Bmat + gamma * Msp.toarray()
    P = SymTridiag(np.r_[0.25, np.full(K - 1, 0.5), 0.25], np.full(K, 0.25))
    Q = SymTridiag(np.r_[1.0, np.full(K - 1, 2.0), 1.0], np.full(K, -1.0))
    solver = KronPencilSolver(P, Q, A.toarray(), Bmat)
    # rhs: At' (Gbar' vol g) + Dt-pattern of (M' mrows)
    r = np.zeros((K + 1, mesh.nnodes))
    gg = np.zeros((K, mesh.nnodes))
    for a in range(d):
        gg += vol * (g.values[:, :, a] @ mesh.grad_ops[a])
    r[:-1] += 0.5 * gg
    r[1:] += 0.5 * gg
    mm = w_t * (mrows @ RtM)
    r[:-1] -= mm
    r[1:] += mm
    u, _ = solver.solve(r)
    # defects at the optimum, relative to the data scale
    ubar = 0.5 * (u[:-1] + u[1:])
    gdef = 0.0
    for a in range(d):
        gdef += np.sum((ubar @ mesh.grad_ops[a].T - g.values[:, :, a]) ** 2)
    gscale = np.sqrt(np.mean(g.values ** 2)) + 1e-300
    edef = np.sum(((u[1:] - u[:-1]) @ RtM.T - mrows) ** 2)
    escale = np.sqrt(np.mean(mrows ** 2)) + 1e-300
    return u, float(np.sqrt(gdef / (K * mesh.ncells)) / gscale), \
        float(np.sqrt(edef / max(1, mrows.size)) / escale)


def build_corrector(fld: CoefficientField, n: int, e: np.ndarray,
                    ahom_est: np.ndarray, M: int = 2, c_tau: float = 1.0,
                    method: str = "auto", curl_tol: float = 1e-3) -> CorrectorBundle:
    """Corrector with slope e at scale n, hosted on the scale n+1 cylinder."""
    d = fld.d
    e = np.asarray(e, dtype=float)
    ahom_est = np.asarray(ahom_est, dtype=float)
    host = Cylinder.triadic(n + 1, d)
    mesh = Mesh(host, M, c_tau)
    X_e = -np.concatenate([e, ahom_est @ e])
    # S(., box_{n+1}, X_e, 0) is minus the minimizer of mu at X_e
    ks = KernelSolver(KernelProblem(mesh, fld, "c0"), method=method)
    S_off = np.broadcast_to(X_e, (mesh.nsteps, mesh.ncells, 2 * d)).copy()
    res = ks.solve(S_off=S_off)
    S = -res.S_tot
    AS = _apply_bigA(mesh, fld, S)
    grad_u = 0.5 * (S[:, :, :d] + AS[:, :, d:])
    flux_u = 0.5 * (S[:, :, d:] + AS[:, :, :d])
    gradf = VectorField(mesh, grad_u)
    fluxf = VectorField(mesh, flux_u)
    # evolution rows: M du = -tau vol Gbar' flux on interior tests
    mrows = np.zeros((mesh.nsteps, len(mesh.interior_nodes)))
    for a in range(d):
        mrows -= mesh.tau * mesh.cell_volume * (
            flux_u[:, :, a] @ mesh.grad_ops[a][:, mesh.interior_nodes])
    u_vals, curl_defect, evo_defect = _integrate_gradient(mesh, gradf, mrows)
    if curl_defect > curl_tol:
        raise MeshError(
            f"corrector gradient not integrable: curl residual {curl_defect:.2e} "
            f"> {curl_tol:.1e}")
    xnodes = mesh.node_grid()
    ex = sum(e[a] * xnodes[a].ravel() for a in range(d))
    phi_vals = u_vals - ex[None, :]
    phi = ScalarField(mesh, phi_vals)
    inner = Cylinder.triadic(n, d)
    shift = restrict_scalar(phi, inner).mean()
    phi = ScalarField(mesh, phi_vals - shift)
    return CorrectorBundle(e=e, n=n, ahom_est=ahom_est, phi=phi,
                           grad_u=gradf, flux=fluxf,
                           curl_defect=curl_defect, evolution_defect=evo_defect,
                           kkt_residual=res.kkt_residual, seed=fld.seed)


def corrector_error(bundle: CorrectorBundle) -> dict:
    """The three scale-normalized corrector norms on the inner cylinder.

    Returns {'l2', 'grad_dual', 'flux_dual', 'total'}: the L2 norm of phi,
    the dual norms of grad phi and of the flux defect a(e+grad phi) - ahom e,
    all on box_n and multiplied by 3^{-n}.
    """
    n = bundle.n
    d = len(bundle.e)
    inner = Cylinder.triadic(n, d)
    phi_r = restrict_scalar(bundle.phi, inner)
    mesh_r = phi_r.mesh
    grad_phi = restrict_vector(
        VectorField(bundle.grad_u.mesh,
                    bundle.grad_u.values - bundle.e[None, None, :]), inner)
    fdef_vals = bundle.flux.values - (bundle.ahom_est @ bundle.e)[None, None, :]
    flux_def = restrict_vector(VectorField(bundle.flux.mesh, fdef_vals), inner)
    scale = 3.0 ** (-n)
    l2 = scale * norm(phi_r, "L2")
    gd = scale * norm(grad_phi, "hatH-1par")
    fd = scale * norm(flux_def, "hatH-1par")
    return {"l2": l2, "grad_dual": gd, "flux_dual": fd, "total": l2 + gd + fd}
