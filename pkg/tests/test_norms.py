import numpy as np
import pytest

from parhom.mesh import Cylinder, Mesh, MeshError, ScalarField, VectorField
from parhom.norms import norm


def _dense_dual_oracle(mesh, f_vals, bc):
    """Brute-force dual norm by assembling the full Gram matrix densely."""
    K_, nn = mesh.nsteps, mesh.nnodes
    tau = mesh.tau
    Mt = (np.diag(np.r_[tau / 3, np.full(K_ - 1, 2 * tau / 3), tau / 3])
          + np.diag(np.full(K_, tau / 6), 1) + np.diag(np.full(K_, tau / 6), -1))
    Qt = (np.diag(np.r_[1 / tau, np.full(K_ - 1, 2 / tau), 1 / tau])
          + np.diag(np.full(K_, -1 / tau), 1) + np.diag(np.full(K_, -1 / tau), -1))
    Msp = mesh.mass.toarray()
    L = mesh.stiffness.toarray()
    cu2 = mesh.cylinder.space_volume ** (-2.0 / mesh.d)
    A = cu2 * Msp + L
    interior = mesh.interior_nodes
    B = Msp[interior].T @ np.linalg.solve(L[np.ix_(interior, interior)],
                                          Msp[interior])
    vol = mesh.cylinder.volume
    r = (np.kron(Mt, Msp) @ f_vals.ravel()) / vol
    if bc == "hat":
        Kbig = (np.kron(Mt, A) + np.kron(Qt, B)) / vol
        return np.sqrt(r @ np.linalg.solve(Kbig, r))
    dofn = interior
    Asub, Bsub = A[np.ix_(dofn, dofn)], B[np.ix_(dofn, dofn)]
    Kbig = (np.kron(Mt[1:, 1:], Asub) + np.kron(Qt[1:, 1:], Bsub)) / vol
    rs = r.reshape(K_ + 1, nn)[1:][:, dofn].ravel()
    return np.sqrt(rs @ np.linalg.solve(Kbig, rs))


@pytest.mark.parametrize("bc,kind", [("hat", "hatH-1par"), ("sqcup", "H-1par")])
def test_dual_norm_matches_dense_oracle(bc, kind):
    mesh = Mesh(Cylinder.triadic(0, 2), 4)
    rng = np.random.default_rng(7)
    for _ in range(3):
        f = ScalarField(mesh, rng.standard_normal((mesh.nsteps + 1, mesh.nnodes)))
        want = _dense_dual_oracle(mesh, f.values, bc)
        got = norm(f, kind)
        assert got == pytest.approx(want, abs=1e-10, rel=1e-10)


def test_zero_and_homogeneity():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    zero = ScalarField.zeros(mesh)
    rng = np.random.default_rng(0)
    f = ScalarField(mesh, rng.standard_normal((mesh.nsteps + 1, mesh.nnodes)))
    for kind in ("L2", "Lp", "H1par", "dualH-1", "hatH-1par", "H-1par"):
        assert norm(zero, kind) == 0.0
        f2 = ScalarField(mesh, 2.0 * f.values)
        assert norm(f2, kind) == pytest.approx(2.0 * norm(f, kind), rel=1e-12)


def test_lp_and_errors():
    mesh = Mesh(Cylinder.triadic(0, 1), 2)
    one = ScalarField.from_function(mesh, lambda t, x: np.ones_like(x))
    assert norm(one, "L2") == pytest.approx(1.0)
    assert norm(one, "Lp", p=4.0) == pytest.approx(1.0)
    with pytest.raises(MeshError):
        norm(one, "Lp", p=0.5)
    with pytest.raises(MeshError):
        norm(one, "no-such-norm")


def test_vector_dual_norm_components():
    mesh = Mesh(Cylinder.triadic(0, 2), 2)
    rng = np.random.default_rng(1)
    vals = np.zeros((mesh.nsteps, mesh.ncells, 2))
    vals[:, :, 0] = rng.standard_normal((mesh.nsteps, mesh.ncells))
    g1 = VectorField(mesh, vals)
    vals2 = np.zeros_like(vals)
    vals2[:, :, 1] = vals[:, :, 0]
    g2 = VectorField(mesh, vals2)
    # symmetric square cylinder: component placement cannot change the norm
    assert norm(g1, "hatH-1par") == pytest.approx(norm(g2, "hatH-1par"), rel=1e-10)
    both = VectorField(mesh, vals + vals2)
    assert norm(both, "hatH-1par") <= norm(g1, "hatH-1par") + norm(g2, "hatH-1par") + 1e-12


def test_refinement_consistency():
    # norms of a fixed smooth function converge as the mesh refines
    vals = {}
    for M in (2, 4, 8):
        mesh = Mesh(Cylinder.triadic(0, 2), M)
        f = ScalarField.from_function(
            mesh, lambda t, x, y: np.sin(np.pi * x) * np.cos(np.pi * y) + 0.2 * t)
        vals[M] = (norm(f, "L2"), norm(f, "hatH-1par"))
    for i in range(2):
        e1 = abs(vals[2][i] - vals[8][i])
        e2 = abs(vals[4][i] - vals[8][i])
        assert e2 <= 0.6 * e1 + 1e-12
