import numpy as np
import pytest

from parhom.field import FieldSpec, bigA, sample_field
from parhom.kernel import (KernelProblem, KernelSolver, SizeError,
                           problem_size, solve_kernel)
from parhom.mesh import Cylinder, Mesh


def _dense_saddle_oracle(mesh, fld, X):
    """Independent dense assembly of the primal energy KKT from definitions.

    Unknowns: v at (interior nodes) x (levels 1..K-1), h per (slab, cell, d);
    constraints: for every slab and every node,
        tau vol (int grad psi_i . h) + (M (v_{k+1} - v_k))_i = 0.
    Minimizes sum w * 1/2 (X + S).A (X + S).
    """
    K, nn, nc, d = mesh.nsteps, mesh.nnodes, mesh.ncells, mesh.d
    tau, vol = mesh.tau, mesh.cell_volume
    w = tau * vol / mesh.cylinder.volume
    interior = mesh.interior_nodes
    ni = len(interior)
    G = [np.asarray(g.todense()) for g in mesh.grad_ops]
    Msp = mesh.mass.toarray()
    A = bigA(mesh.coefficients(fld, 0, K))           # (K, nc, 2d, 2d)
    nv = (K - 1) * ni
    nh = K * nc * d
    nl = K * nn

    def vidx(lev, i):
        return (lev - 1) * ni + i

    def hidx(k, c, a):
        return nv + (k * nc + c) * d + a

    n = nv + nh
    Q = np.zeros((n, n))
    cvec = np.zeros(n)
    # S map: for slab k, cell c: Sp = sum_a e_a * (G[a] @ vbar_k)_c, Sq = h
    # build dense S-operator rows per (k, c)
    for k in range(K):
        for c in range(nc):
            rowmap = np.zeros((2 * d, n))
            for a in range(d):
                for j, i_node in enumerate(interior):
                    coeff = G[a][c, i_node]
                    if k >= 1:
                        rowmap[a, vidx(k, j)] += 0.5 * coeff
                    if k + 1 <= K - 1:
                        rowmap[a, vidx(k + 1, j)] += 0.5 * coeff
                rowmap[d + a, hidx(k, c, a)] = 1.0
            Ak = A[k, c]
            Q += w * rowmap.T @ Ak @ rowmap
            cvec += w * rowmap.T @ (Ak @ X)
    B = np.zeros((nl, n))
    for k in range(K):
        for i in range(nn):
            r = k * nn + i
            for c in range(nc):
                for a in range(d):
                    B[r, hidx(k, c, a)] += tau * vol * G[a][c, i]
            for j, i_node in enumerate(interior):
                if k >= 1:
                    B[r, vidx(k, j)] -= Msp[i, i_node]
                if k + 1 <= K - 1:
                    B[r, vidx(k + 1, j)] += Msp[i, i_node]
    KKT = np.block([[Q, B.T], [B, np.zeros((nl, nl))]])
    rhs = np.concatenate([-cvec, np.zeros(nl)])
    sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
    x = sol[:n]
    value = 0.5 * x @ Q @ x + cvec @ x + 0.5 * w * np.einsum(
        "kcab,a,b->", A, X, X)
    return value


@pytest.mark.parametrize("fieldcase", ["constant-skew", "two-phase", "skew-ens"])
def test_kernel_matches_dense_oracle(fieldcase):
    mesh = Mesh(Cylinder.triadic(0, 2), 2)
    if fieldcase == "constant-skew":
        fld = sample_field(FieldSpec.constant(np.array([[2.0, 0.3], [-0.3, 1.0]])), 0)
    elif fieldcase == "two-phase":
        fld = sample_field(FieldSpec.two_phase(2), 7)
    else:
        fld = sample_field(FieldSpec.skew_ensemble(2, 0.5), 11)
    X = np.array([1.0, -0.5, 0.25, 2.0])
    want = _dense_saddle_oracle(mesh, fld, X)
    S_off = np.broadcast_to(X, (mesh.nsteps, mesh.ncells, 4)).copy()
    got = solve_kernel(KernelProblem(mesh, fld, "c0"), S_off=S_off, method="direct")
    assert got.value == pytest.approx(want, abs=1e-9)


def test_backends_agree_constant_field():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    a0 = np.array([[2.0, 0.4], [0.4, 1.0]])
    fld = sample_field(FieldSpec.constant(a0), 0)
    A0 = bigA(a0)
    X = np.array([1.0, 0.5, -0.3, 2.0])
    Xs = np.array([0.7, -1.0, 0.2, 0.4])
    S_off = np.broadcast_to(X, (mesh.nsteps, mesh.ncells, 4)).copy()
    lin = np.broadcast_to(-Xs, (mesh.nsteps, mesh.ncells, 4)).copy()
    for meth in ("direct", "pencil", "gmres"):
        r = solve_kernel(KernelProblem(mesh, fld, "c0"), S_off=S_off, method=meth)
        assert r.value == pytest.approx(0.5 * X @ A0 @ X, abs=1e-10)
        assert r.kkt_residual <= 1e-9
        r2 = solve_kernel(KernelProblem(mesh, fld, "c"), lin=lin, method=meth)
        assert -r2.value == pytest.approx(0.5 * Xs @ np.linalg.solve(A0, Xs), abs=1e-10)


def test_backends_agree_random_fields():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    X = np.array([1.0, 0.0, 0.0, 0.5])
    S_off = np.broadcast_to(X, (mesh.nsteps, mesh.ncells, 4)).copy()
    lin = np.broadcast_to(-X, (mesh.nsteps, mesh.ncells, 4)).copy()
    fld = sample_field(FieldSpec.two_phase(2), 7)
    for prob, kw in ((KernelProblem(mesh, fld, "c0"), {"S_off": S_off}),
                     (KernelProblem(mesh, fld, "c"), {"lin": lin})):
        a = solve_kernel(prob, method="direct", **kw)
        b = solve_kernel(prob, method="gmres", **kw)
        assert b.value == pytest.approx(a.value, abs=1e-10)
    fld_ti = sample_field(FieldSpec.two_phase(2, time_dependent=False), 3)
    for prob, kw in ((KernelProblem(mesh, fld_ti, "c0"), {"S_off": S_off}),
                     (KernelProblem(mesh, fld_ti, "c"), {"lin": lin})):
        a = solve_kernel(prob, method="direct", **kw)
        b = solve_kernel(prob, method="pencil", **kw)
        assert b.value == pytest.approx(a.value, abs=1e-10)


def test_solver_reuse_across_rhs():
    mesh = Mesh(Cylinder.triadic(0, 2), 2)
    fld = sample_field(FieldSpec.two_phase(2), 1)
    ks = KernelSolver(KernelProblem(mesh, fld, "c0"), method="direct")
    for i in (0, 2):   # one gradient direction, one flux direction
        X = np.eye(4)[i]
        S_off = np.broadcast_to(X, (mesh.nsteps, mesh.ncells, 4)).copy()
        reused = ks.solve(S_off=S_off).value
        one_shot = solve_kernel(KernelProblem(mesh, fld, "c0"), S_off=S_off)
        assert reused == pytest.approx(one_shot.value, abs=1e-12)


def test_problem_size():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    assert problem_size(mesh, "c0") == 35 * 25 + 36 * 49


def test_direct_cap_raises():
    # a mesh just above the direct cap must be refused by the direct backend
    import parhom.kernel as k
    old = k.DIRECT_MAX_UNKNOWNS
    try:
        k.DIRECT_MAX_UNKNOWNS = 10
        mesh = Mesh(Cylinder.triadic(0, 2), 2)
        fld = sample_field(FieldSpec.two_phase(2), 0)
        with pytest.raises(SizeError):
            KernelSolver(KernelProblem(mesh, fld, "c0"), method="direct")
    finally:
        k.DIRECT_MAX_UNKNOWNS = old
