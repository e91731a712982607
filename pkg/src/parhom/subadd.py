"""The subadditive energies mu, mu*, their duality defect J, and its identities.

For a coefficient field on a discrete cylinder:

* ``mu(V, X)``  minimizes the normalized integral of ``1/2 (X+S).A (X+S)``
  over pairs ``S = (grad v, h)`` with v vanishing on the whole space-time
  boundary and the flux h tied to dt v against *all* nodal test functions;
* ``mu_star(V, X*)`` maximizes ``-1/2 S.A S + X*.S`` over free scalars with
  interior-tested flux constraint;
* ``J(V, X, X*) = mu(V, X) + mu_star(V, X*) - X.X*`` with maximizer equal to
  the difference of the two optimizers.

Because both optimizers are linear in (X, X*), a single :class:`JForm`
computed from ``4d`` solves carries the full quadratic form of J and all of
its derivative identities.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import CoefficientField, split_sym_skew
from .kernel import KernelProblem, KernelResult, KernelSolver
from .mesh import Mesh, MeshError, ScalarField, VectorField, constraint_residual

__all__ = ["SPair", "JReport", "JForm", "mu", "mu_star", "j_quantity",
           "verify_identities", "basis_X"]


@dataclass
class SPair:
    """An element of a candidate space: potential plus (gradient, flux) parts."""

    v: ScalarField
    grad: VectorField
    flux: VectorField
    space: str                      # 'C0' (zero-boundary) or 'C' (free)
    kkt_residual: float

    def constraint_defect(self) -> float:
        mode = "free-lateral-test" if self.space == "C0" else "zero-lateral-test"
        dgrad = VectorField(self.grad.mesh, self.grad.values)
        return constraint_residual(self.v, _flux_minus_offset(self), mode)


def _flux_minus_offset(pair: SPair) -> VectorField:
    # the constraint ties dt v to div h where h is the flux *deviation*;
    # for optimizers built from an affine offset X the deviation is stored
    return pair.flux


@dataclass
class JReport:
    mu: float
    mu_star: float
    j: float
    avg_S: np.ndarray
    avg_AS: np.ndarray
    kkt_residual_mu: float
    kkt_residual_mu_star: float
    cylinder: str
    seed: int
    X: np.ndarray
    Xstar: np.ndarray

    def row(self) -> dict:
        out = {
            "cylinder": self.cylinder, "seed": self.seed,
            "mu": self.mu, "mu_star": self.mu_star, "j": self.j,
            "res_mu": self.kkt_residual_mu, "res_mu_star": self.kkt_residual_mu_star,
        }
        for i, v in enumerate(self.X):
            out[f"X{i}"] = v
        for i, v in enumerate(self.Xstar):
            out[f"Xstar{i}"] = v
        for i, v in enumerate(self.avg_S):
            out[f"avgS{i}"] = v
        for i, v in enumerate(self.avg_AS):
            out[f"avgAS{i}"] = v
        return out


def basis_X(d: int) -> np.ndarray:
    return np.eye(2 * d)


def _cylinder_id(mesh: Mesh) -> str:
    c = mesh.cylinder
    if c.n is not None:
        return f"box{c.n}/M{mesh.M}"
    return f"({c.t0},{c.t1})x{c.box}/M{mesh.M}"


def field_pairing(mesh: Mesh, fld: CoefficientField, S: np.ndarray):
    """(integral of S, integral of A S) for a cellwise 2d-valued array."""
    K, nc = mesh.nsteps, mesh.ncells
    d = mesh.d
    avg_S = S.mean(axis=(0, 1))
    avg_AS = np.zeros(2 * d)
    chunk = max(1, min(K, 4_000_000 // max(1, nc)))
    from .field import bigA
    for k0 in range(0, K, chunk):
        k1 = min(K, k0 + chunk)
        a = mesh.coefficients(fld, k0, k1)
        A = bigA(a)
        avg_AS += np.einsum("kcab,kcb->a", A, S[k0:k1])
    avg_AS /= (K * nc)
    return avg_S, avg_AS


def _pair_from_result(mesh: Mesh, res: KernelResult, space: str) -> SPair:
    d = mesh.d
    v = ScalarField(mesh, res.v)
    grad = VectorField(mesh, res.S_tot[:, :, :d].copy())
    flux = VectorField(mesh, res.S_tot[:, :, d:].copy())
    return SPair(v=v, grad=grad, flux=flux, space=space,
                 kkt_residual=res.kkt_residual)


def _const_offset(mesh: Mesh, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.broadcast_to(X, (mesh.nsteps, mesh.ncells, len(X))).copy()


def mu(fld: CoefficientField, mesh: Mesh, X: np.ndarray, method: str = "auto",
       solver: KernelSolver | None = None):
    """Value and minimizer of the primal subadditive energy.

    Returns (value, SPair, kkt_residual); the SPair holds the *total*
    gradient/flux fields X + (grad v, h).
    """
    if mesh.M < 2:
        raise MeshError("mesh too coarse to host the constraint spaces (M < 2)")
    ks = solver or KernelSolver(KernelProblem(mesh, fld, "c0"), method=method)
    res = ks.solve(S_off=_const_offset(mesh, X))
    return res.value, _pair_from_result(mesh, res, "C0"), res.kkt_residual


def mu_star(fld: CoefficientField, mesh: Mesh, Xstar: np.ndarray,
            method: str = "auto", solver: KernelSolver | None = None):
    """Value and maximizer of the dual subadditive energy."""
    if mesh.M < 2:
        raise MeshError("mesh too coarse to host the constraint spaces (M < 2)")
    Xstar = np.asarray(Xstar, dtype=float)
    ks = solver or KernelSolver(KernelProblem(mesh, fld, "c"), method=method)
    res = ks.solve(lin=_const_offset(mesh, -Xstar))
    value = -res.value
    return value, _pair_from_result(mesh, res, "C"), res.kkt_residual


class JForm:
    """The full quadratic form of J on a (field, mesh), from 4d basis solves.

    Stationarity collapses the quadratic forms to spatial averages of the
    basis optimizers:  mu(X) = 1/2 X.Qmu X with Qmu[:, i] the average of
    A S for the i-th primal minimizer, and  mu*(X*) = 1/2 X*.Qstar X* with
    Qstar[:, i] the average of the i-th dual maximizer.
    """

    def __init__(self, fld: CoefficientField, mesh: Mesh, method: str = "auto",
                 keep_fields: bool = False):
        d = mesh.d
        self.mesh, self.fld = mesh, fld
        self.d = d
        nb = 2 * d
        ks_mu = KernelSolver(KernelProblem(mesh, fld, "c0"), method=method)
        ks_st = KernelSolver(KernelProblem(mesh, fld, "c"), method=method)
        self.avgS0 = np.zeros((nb, nb))     # row i: avg S of mu-minimizer for e_i
        self.avgAS0 = np.zeros((nb, nb))
        self.avgSst = np.zeros((nb, nb))
        self.avgASst = np.zeros((nb, nb))
        self.max_residual = 0.0
        self._S0 = [] if keep_fields else None
        self._Sst = [] if keep_fields else None
        for i in range(nb):
            X = np.zeros(nb)
            X[i] = 1.0
            res = ks_mu.solve(S_off=_const_offset(mesh, X))
            s, As = field_pairing(mesh, fld, res.S_tot)
            self.avgS0[i], self.avgAS0[i] = s, As
            self.max_residual = max(self.max_residual, res.kkt_residual)
            if keep_fields:
                self._S0.append(res.S_tot)
            res = ks_st.solve(lin=_const_offset(mesh, -X))
            s, As = field_pairing(mesh, fld, res.S_tot)
            self.avgSst[i], self.avgASst[i] = s, As
            self.max_residual = max(self.max_residual, res.kkt_residual)
            if keep_fields:
                self._Sst.append(res.S_tot)
        # quadratic forms (symmetrized; asymmetry is a solver diagnostic)
        self.Qmu = 0.5 * (self.avgAS0 + self.avgAS0.T)
        self.Qstar = 0.5 * (self.avgSst + self.avgSst.T)
        self.form_asymmetry = max(float(np.abs(self.avgAS0 - self.avgAS0.T).max()),
                                  float(np.abs(self.avgSst - self.avgSst.T).max()))

    def mu(self, X) -> float:
        X = np.asarray(X, dtype=float)
        return 0.5 * float(X @ self.Qmu @ X)

    def mu_star(self, Xstar) -> float:
        Xstar = np.asarray(Xstar, dtype=float)
        return 0.5 * float(Xstar @ self.Qstar @ Xstar)

    def j(self, X, Xstar) -> float:
        X = np.asarray(X, dtype=float)
        Xstar = np.asarray(Xstar, dtype=float)
        return self.mu(X) + self.mu_star(Xstar) - float(X @ Xstar)

    def avg_S(self, X, Xstar) -> np.ndarray:
        """Spatial average of the J maximizer S = S*(X*) - S0(X)."""
        X = np.asarray(X, dtype=float)
        Xstar = np.asarray(Xstar, dtype=float)
        return Xstar @ self.avgSst - X @ self.avgS0

    def avg_AS(self, X, Xstar) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        Xstar = np.asarray(Xstar, dtype=float)
        return Xstar @ self.avgASst - X @ self.avgAS0

    def grad_X_j(self, X, Xstar) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.Qmu @ X - np.asarray(Xstar, dtype=float)

    def grad_Xstar_j(self, X, Xstar) -> np.ndarray:
        Xstar = np.asarray(Xstar, dtype=float)
        return self.Qstar @ Xstar - np.asarray(X, dtype=float)

    def S_field(self, X, Xstar) -> np.ndarray:
        """Cellwise maximizer field (requires keep_fields=True)."""
        if self._S0 is None:
            raise MeshError("JForm built without keep_fields=True")
        X = np.asarray(X, dtype=float)
        Xstar = np.asarray(Xstar, dtype=float)
        out = np.zeros_like(self._S0[0])
        for i in range(2 * self.d):
            out += Xstar[i] * self._Sst[i] - X[i] * self._S0[i]
        return out


def j_quantity(fld: CoefficientField, mesh: Mesh, X, Xstar,
               method: str = "auto") -> JReport:
    """J through the splitting identity, with maximizer averages recorded."""
    X = np.asarray(X, dtype=float)
    Xstar = np.asarray(Xstar, dtype=float)
    mu_val, pair0, res0 = mu(fld, mesh, X, method=method)
    st_val, pairs, I_res = mu_star(fld, mesh, Xstar, method=method)
    jval = mu_val + st_val - float(X @ Xstar)
    d = mesh.d
    S0 = np.concatenate([pair0.grad.values, pair0.flux.values], axis=-1)
    Sst = np.concatenate([pairs.grad.values, pairs.flux.values], axis=-1)
    S = Sst - S0
    avg_S, avg_AS = field_pairing(mesh, fld, S)
    return JReport(mu=mu_val, mu_star=st_val, j=jval, avg_S=avg_S, avg_AS=avg_AS,
                   kkt_residual_mu=res0, kkt_residual_mu_star=I_res,
                   cylinder=_cylinder_id(mesh), seed=fld.seed,
                   X=X, Xstar=Xstar)


def verify_identities(fld: CoefficientField, mesh: Mesh, X, Xstar,
                      method: str = "auto", fd_step: float = 1e-4) -> dict:
    """Deviations of the derivative/average/convexity identities of J.

    Returns a dict of named absolute deviations; all are zero for the
    continuum quantities and small (solver tolerance) discretely.
    """
    X = np.asarray(X, dtype=float)
    Xstar = np.asarray(Xstar, dtype=float)
    d = mesh.d
    nb = 2 * d
    form = JForm(fld, mesh, method=method, keep_fields=True)
    out = {}
    # (i) grad_X J vs central differences of J values
    fd = np.zeros(nb)
    for a in range(nb):
        e = np.zeros(nb)
        e[a] = fd_step
        fd[a] = (form.j(X + e, Xstar) - form.j(X - e, Xstar)) / (2 * fd_step)
    out["derivative_X_fd"] = float(np.abs(fd - form.grad_X_j(X, Xstar)).max())
    out["derivative_X_avgAS"] = float(
        np.abs(form.grad_X_j(X, Xstar) + form.avg_AS(X, Xstar)).max())
    fd = np.zeros(nb)
    for a in range(nb):
        e = np.zeros(nb)
        e[a] = fd_step
        fd[a] = (form.j(X, Xstar + e) - form.j(X, Xstar - e)) / (2 * fd_step)
    out["derivative_Xstar_fd"] = float(np.abs(fd - form.grad_Xstar_j(X, Xstar)).max())
    out["derivative_Xstar_avgS"] = float(
        np.abs(form.grad_Xstar_j(X, Xstar) - form.avg_S(X, Xstar)).max())
    # (iii) spatial average at X* = 0
    out["spatial_average_X0"] = float(np.abs(form.avg_S(X, np.zeros(nb)) + X).max())
    # (iv) quadratic response against a perturbed element of the solution space
    rng = np.random.default_rng(fld.seed + 12345)
    Xp = X + 0.5 * rng.standard_normal(nb)
    Xsp = Xstar + 0.5 * rng.standard_normal(nb)
    S = form.S_field(X, Xstar)
    T = form.S_field(Xp, Xsp)
    dist2 = float(np.mean(np.sum((T - S) ** 2, axis=-1)))
    _, avg_AT = field_pairing(mesh, fld, T)
    # value of the J functional at T
    valT = _j_functional_at(fld, mesh, T, X, Xstar)
    gap = form.j(X, Xstar) - valT
    out["quadratic_response_gap"] = gap
    out["quadratic_response_dist2"] = dist2
    lam = fld.lam
    ok = (gap >= dist2 / (4.0 * lam) - 1e-9) and (gap <= lam * dist2 + 1e-9)
    out["quadratic_response_ok"] = float(not ok)
    # (v) uniform convexity in X and X*
    X2 = X + rng.standard_normal(nb)
    half = form.j(0.5 * (X + X2), Xstar)
    conv = 0.5 * form.j(X, Xstar) + 0.5 * form.j(X2, Xstar) - half
    dX2 = float(np.sum((X - X2) ** 2))
    ok = (conv >= dX2 / (8.0 * lam) - 1e-9) and (conv <= lam * dX2 + 1e-9)
    out["uniform_convexity_X_ok"] = float(not ok)
    Xs2 = Xstar + rng.standard_normal(nb)
    half = form.j(X, 0.5 * (Xstar + Xs2))
    conv = 0.5 * form.j(X, Xstar) + 0.5 * form.j(X, Xs2) - half
    dXs2 = float(np.sum((Xstar - Xs2) ** 2))
    ok = (conv >= dXs2 / (8.0 * lam) - 1e-9) and (conv <= lam * dXs2 + 1e-9)
    out["uniform_convexity_Xstar_ok"] = float(not ok)
    out["splitting_form_asymmetry"] = form.form_asymmetry
    out["max_kkt_residual"] = form.max_residual
    return out


def _j_functional_at(fld, mesh: Mesh, T: np.ndarray, X, Xstar) -> float:
    """Normalized integral of -1/2 T.A T - X.A T + X*.T."""
    from .field import bigA
    K, nc = mesh.nsteps, mesh.ncells
    X = np.asarray(X, dtype=float)
    Xstar = np.asarray(Xstar, dtype=float)
    total = 0.0
    chunk = max(1, min(K, 4_000_000 // max(1, nc)))
    for k0 in range(0, K, chunk):
        k1 = min(K, k0 + chunk)
        A = bigA(mesh.coefficients(fld, k0, k1))
        AT = np.einsum("kcab,kcb->kca", A, T[k0:k1])
        total += np.einsum("kca,kca->", -0.5 * T[k0:k1] - X, AT)
        total += np.einsum("a,kca->", Xstar, T[k0:k1])
    return total / (K * nc)
