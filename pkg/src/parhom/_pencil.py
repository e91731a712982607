"""Solvers for operators of the form  P (x) A  +  Q (x) B  (+ low-rank borders).

Here P, Q are symmetric tridiagonal "time" matrices of size L and A, B are
symmetric positive semidefinite "space" matrices of size n with
trivial joint kernel of A and B.  Such operators arise from every time-translation
invariant quadratic form in this package (dual-norm Riesz problems, the
subadditive-energy optimality systems for time-independent coefficients, and
the constant-coefficient preconditioner for the space-time KKT solves).

The solve is exact and direct: one congruence W simultaneously diagonalizes
the pencil (A, A+B), after which the operator decouples into n independent
L-by-L symmetric tridiagonal systems, handled by batched Thomas elimination.
Symmetric borders [[T, F],[F^T, 0]] with F = Pt (x) s are eliminated by a
Schur complement, formed densely when the border is small and applied via
conjugate gradients otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = ["SymTridiag", "KronPencilSolver", "Border"]


@dataclass(frozen=True)
class SymTridiag:
    """Symmetric tridiagonal matrix given by its diagonal and off-diagonal."""

    diag: np.ndarray
    off: np.ndarray

    @property
    def size(self) -> int:
        return len(self.diag)

    def toarray(self) -> np.ndarray:
        return (np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        # x has shape (L, ...) -- leading time axis
        y = self.diag.reshape(-1, *([1] * (x.ndim - 1))) * x
        if len(self.off):
            o = self.off.reshape(-1, *([1] * (x.ndim - 1)))
            y[:-1] += o * x[1:]
            y[1:] += o * x[:-1]
        return y


def _dense_if_sparse(m) -> np.ndarray:
    if sp.issparse(m):
        return m.toarray()
    return np.asarray(m, dtype=float)


def _tridiag_null(T: SymTridiag) -> np.ndarray | None:
    """Unit null vector of a PSD symmetric tridiagonal, or None if nonsingular."""
    import scipy.linalg as sla
    scale = max(np.abs(T.diag).max(), 1e-300)
    w, v = sla.eigh_tridiagonal(T.diag / scale, T.off / scale,
                                select="i", select_range=(0, 0))
    if w[0] < 1e-11:
        return np.ascontiguousarray(v[:, 0])
    return None


class _BatchedTridiag:
    """LDL^T factorizations of T_j = a_j P + b_j Q + ridge_j I, batched over j.

    Degenerate members (a_j or b_j essentially zero while the surviving time
    pattern is singular) have their known one-dimensional null space projected
    out of right-hand sides and solutions; a tiny relative ridge guards the
    elimination itself.
    """

    def __init__(self, P: SymTridiag, Q: SymTridiag, a: np.ndarray, b: np.ndarray,
                 ridge_rel: float = 1e-13):
        L = P.size
        self.L = L
        d = np.outer(a, P.diag) + np.outer(b, Q.diag)          # (n, L)
        e = np.outer(a, P.off) + np.outer(b, Q.off)            # (n, L-1)
        scale = np.abs(d).max(axis=1)
        scale[scale == 0.0] = 1.0
        d = d + (ridge_rel * scale)[:, None]
        # Thomas factorization: T = L D L^T with unit lower bidiagonal L
        dd = d.copy()
        w = np.empty_like(e)
        for k in range(L - 1):
            w[:, k] = e[:, k] / dd[:, k]
            dd[:, k + 1] -= w[:, k] * e[:, k]
        self._piv = dd
        self._w = w
        # structural null vectors of nearly pure-P / pure-Q members
        ab = a + b
        self._proj = []
        only_q = np.nonzero(a < 1e-12 * ab)[0]
        if len(only_q):
            z = _tridiag_null(Q)
            if z is not None:
                self._proj.append((only_q, z))
        only_p = np.nonzero(b < 1e-12 * ab)[0]
        if len(only_p):
            z = _tridiag_null(P)
            if z is not None:
                self._proj.append((only_p, z))

    def _project(self, x: np.ndarray) -> None:
        for modes, z in self._proj:
            if x.ndim == 2:
                x[modes] -= np.outer(x[modes] @ z, z)
            else:
                coeff = np.einsum("jlm,l->jm", x[modes], z)
                x[modes] -= coeff[:, None, :] * z[None, :, None]

    def solve(self, r: np.ndarray) -> np.ndarray:
        """Solve T_j x_j = r_j for all j; r has shape (n, L) or (n, L, m)."""
        x = r.astype(float, copy=True)
        self._project(x)
        w = self._w
        if x.ndim == 2:
            for k in range(self.L - 1):
                x[:, k + 1] -= w[:, k] * x[:, k]
            x /= self._piv
            for k in range(self.L - 2, -1, -1):
                x[:, k] -= w[:, k] * x[:, k + 1]
        else:
            for k in range(self.L - 1):
                x[:, k + 1, :] -= w[:, k, None] * x[:, k, :]
            x /= self._piv[:, :, None]
            for k in range(self.L - 2, -1, -1):
                x[:, k, :] -= w[:, k, None] * x[:, k + 1, :]
        self._project(x)
        return x

    def inverse_band(self) -> tuple[np.ndarray, np.ndarray]:
        """Tridiagonal band of T_j^{-1} per mode, via the stable LDL^T recursion.

        Returns (invdiag (n, L), invoff (n, L-1)).  Cost O(n L).
        """
        n, L = self._piv.shape
        invdiag = np.empty((n, L))
        invoff = np.empty((n, L - 1))
        invdiag[:, L - 1] = 1.0 / self._piv[:, L - 1]
        for k in range(L - 2, -1, -1):
            wk = self._w[:, k]
            invoff[:, k] = -wk * invdiag[:, k + 1]
            invdiag[:, k] = 1.0 / self._piv[:, k] + wk * wk * invdiag[:, k + 1]
        return invdiag, invoff


@dataclass(frozen=True)
class Border:
    """Symmetric border block with columns F = Pt (x) s.

    Pt has shape (L, m) (sparse or dense), s has length n; the bordered
    system reads [[T, F], [F^T, 0]] (x, beta) = (r, c).
    """

    Pt: object
    s: np.ndarray


class KronPencilSolver:
    """Exact solver for  T = P (x) A + Q (x) B  plus optional borders.

    Vectors are passed in "field layout" of shape (L, n): leading time axis.
    """

    def __init__(self, P: SymTridiag, Q: SymTridiag, A, B,
                 borders: tuple[Border, ...] = (), dense_border_max: int = 200,
                 schur_tol: float = 1e-13, schur_maxiter: int | None = None):
        self.schur_tol = schur_tol
        self.schur_maxiter = schur_maxiter
        A = _dense_if_sparse(A)
        B = _dense_if_sparse(B)
        n = A.shape[0]
        Z = A + B
        # rank-aware congruence: W spans the complement of ker(Z) = ker(A)/\ker(B)
        # with W' A W = diag(alpha) and W' Z W = I; solutions live in the quotient
        import scipy.linalg as sla
        zev, U = sla.eigh(Z)
        keep = zev > max(zev.max(), 0.0) * 1e-13 + 1e-300
        Y = U[:, keep] / np.sqrt(zev[keep])
        alpha, V = sla.eigh(Y.T @ A @ Y)
        alpha = np.clip(alpha, 0.0, 1.0)
        W = Y @ V
        self.W = np.ascontiguousarray(W)          # n x nmodes, columns are modes
        self.alpha = alpha
        self.beta_coef = 1.0 - alpha
        self.P, self.Q = P, Q
        self.L, self.n = P.size, W.shape[1]
        self._tri = _BatchedTridiag(P, Q, alpha, self.beta_coef)
        self.borders = borders
        self._shat = [self.W.T @ b.s for b in borders]
        self._Pt = [sp.csr_matrix(b.Pt) if not sp.issparse(b.Pt) else b.Pt.tocsr()
                    for b in borders]
        self._m = [pt.shape[1] for pt in self._Pt]
        m_tot = sum(self._m)
        # known null directions of the border Schur complement: block-constant
        # coefficients of a family whose time pattern annihilates constants
        nulls = []
        ofs = 0
        for pt, m in zip(self._Pt, self._m):
            if m > 1 and np.linalg.norm(pt @ np.ones(m)) < 1e-12 * max(1.0, abs(pt).max() * m):
                vec = np.zeros(m_tot)
                vec[ofs:ofs + m] = 1.0 / np.sqrt(m)
                nulls.append(vec)
            ofs += m
        self._schur_null = np.stack(nulls, axis=1) if nulls else None
        self._schur_pinv = None
        self._schur_prec = None
        if 0 < m_tot <= dense_border_max:
            G = self._form_schur_dense()
            import scipy.linalg as sla
            w, U = sla.eigh(G)
            wmax = max(w.max(), 1e-300)
            winv = np.where(w > 1e-12 * wmax, 1.0 / np.maximum(w, 1e-300), 0.0)
            self._schur_pinv = (U, winv)
        elif m_tot > 0:
            self._schur_prec = self._form_schur_band_prec()

    # -- mode-space plumbing -------------------------------------------------

    def _to_modes(self, r: np.ndarray) -> np.ndarray:
        # (L, n) field layout -> (n, L) mode-major
        return (r @ self.W).T

    def _from_modes(self, x: np.ndarray) -> np.ndarray:
        return self.W @ x  # (n, L) -> returns (n, L)? no: W (n,n) @ (n,L) = (n,L)

    def _tsolve_modes(self, rhat: np.ndarray) -> np.ndarray:
        return self._tri.solve(rhat)

    def _F_to_modes(self, beta: np.ndarray) -> np.ndarray:
        """Mode-space image of F beta, shape (n, L)."""
        out = np.zeros((self.n, self.L))
        ofs = 0
        for pt, shat, m in zip(self._Pt, self._shat, self._m):
            tvec = pt @ beta[ofs:ofs + m]
            out += shat[:, None] * tvec[None, :]
            ofs += m
        return out

    def _Ft_of_modes(self, xhat: np.ndarray) -> np.ndarray:
        """F^T x from the mode-space representation xhat of x, shape (m_tot,)."""
        parts = []
        for pt, shat in zip(self._Pt, self._shat):
            parts.append(pt.T @ (shat @ xhat))
        return np.concatenate(parts) if parts else np.zeros(0)

    def _schur_apply(self, beta: np.ndarray) -> np.ndarray:
        return self._Ft_of_modes(self._tsolve_modes(self._F_to_modes(beta)))

    def _form_schur_dense(self) -> np.ndarray:
        """G = F' T^{-1} F, built in column blocks via multi-rhs tridiag solves."""
        m_tot = sum(self._m)
        G = np.empty((m_tot, m_tot))
        block = max(1, min(64, int(2e8 // max(1, 8 * self.n * self.L))))
        for c0 in range(0, m_tot, block):
            c1 = min(m_tot, c0 + block)
            nb = c1 - c0
            rhs = np.zeros((self.n, self.L, nb))
            ofs = 0
            for pt, shat, m in zip(self._Pt, self._shat, self._m):
                lo, hi = max(c0, ofs), min(c1, ofs + m)
                if lo < hi:
                    cols = np.asarray(pt[:, lo - ofs:hi - ofs].todense())  # (L, k)
                    rhs[:, :, lo - c0:hi - c0] += shat[:, None, None] * cols[None, :, :]
                ofs += m
            sol = self._tri.solve(rhs)
            for j in range(nb):
                G[:, c0 + j] = self._Ft_of_modes(sol[:, :, j])
        return 0.5 * (G + G.T)

    def _form_schur_band_prec(self):
        """Sparse approximation of G from the tridiagonal band of T_j^{-1}.

        G = F' T^{-1} F with F = Pt (x) s; replacing T_j^{-1} by its band gives
        Pt' Hband Pt per family pair, a narrow-banded SPD-like matrix that
        preconditions the Schur CG at O(n L) build cost.
        """
        invdiag, invoff = self._tri.inverse_band()
        nf = len(self._Pt)
        blocks = [[None] * nf for _ in range(nf)]
        for a in range(nf):
            for b in range(a, nf):
                wab = self._shat[a] * self._shat[b]          # (n,)
                hd = wab @ invdiag                            # (L,)
                ho = wab @ invoff                             # (L-1,)
                H = sp.diags([ho, hd, ho], [-1, 0, 1], format="csr")
                blk = (self._Pt[a].T @ H @ self._Pt[b]).tocsr()
                blocks[a][b] = blk
                if b != a:
                    blocks[b][a] = blk.T.tocsr()
        G = sp.bmat(blocks, format="csc")
        m = G.shape[0]
        # small diagonal shift keeps the factorization away from the exact
        # null directions; the CG projection handles them regardless
        scale = max(abs(G.diagonal()).max(), 1e-300)
        G = G + (1e-9 * scale) * sp.eye(m, format="csc")
        import scipy.sparse.linalg as sspla
        try:
            return sspla.splu(G.tocsc())
        except RuntimeError:
            return None

    def _schur_solve(self, g: np.ndarray) -> np.ndarray:
        if self._schur_pinv is not None:
            # pseudo-inverse: border families may carry exact consistent
            # dependencies (telescoping sums of constraint rows)
            U, winv = self._schur_pinv
            return U @ (winv * (U.T @ g))
        # preconditioned conjugate gradients on the semidefinite Schur
        # complement, kept in the range space by projecting out the known
        # null directions
        N = self._schur_null
        prec = self._schur_prec

        def _proj(v):
            return v if N is None else v - N @ (N.T @ v)

        def _apply_prec(v):
            return _proj(prec.solve(v)) if prec is not None else v

        beta = np.zeros_like(g)
        r = _proj(g)
        z = _apply_prec(r)
        p = z.copy()
        rz = r @ z
        rr0 = max(r @ r, 1e-300)
        cap = self.schur_maxiter or (10 * len(g) + 50)
        for _ in range(cap):
            if r @ r <= (self.schur_tol ** 2) * rr0:
                break
            Ap = _proj(self._schur_apply(p))
            pAp = p @ Ap
            if pAp <= 1e-300:
                break
            a = rz / pAp
            beta += a * p
            r -= a * Ap
            z = _apply_prec(r)
            rz_new = r @ z
            if rz_new <= 0:
                # indefinite band approximation: restart unpreconditioned
                z = r.copy()
                rz_new = r @ r
            p = z + (rz_new / rz) * p
            rz = rz_new
        return beta

    # -- public interface ------------------------------------------------------

    def solve(self, r: np.ndarray, border_rhs: np.ndarray | None = None):
        """Solve the (bordered) system; r has field layout (L, n).

        Returns (x, beta) where x has field layout and beta collects border
        unknowns (empty when there are no borders).
        """
        rhat = self._to_modes(r)
        if not self.borders:
            xhat = self._tsolve_modes(rhat)
            return np.ascontiguousarray((self.W @ xhat).T), np.zeros(0)
        m_tot = sum(self._m)
        c = np.zeros(m_tot) if border_rhs is None else border_rhs
        y = self._tsolve_modes(rhat)
        g = self._Ft_of_modes(y) - c
        beta = self._schur_solve(g)
        xhat = self._tsolve_modes(rhat - self._F_to_modes(beta))
        return np.ascontiguousarray((self.W @ xhat).T), beta
