import json
import numpy as np
import pytest

from parhom.mesh import (Cylinder, Mesh, MeshError, ScalarField, VectorField,
                         constraint_residual, export_csv, export_raw, gradient,
                         msp_bound, restrict_scalar, submesh, triadic_children)


@pytest.fixture
def mesh2d():
    return Mesh(Cylinder.triadic(1, 2), 2)


def test_triadic_extents():
    c = Cylinder.triadic(2, 3)
    assert c.duration == 81.0
    assert c.side_lengths == (9.0, 9.0, 9.0)
    with pytest.raises(MeshError):
        Cylinder(-1.0, 1.0, ((-1.5, 1.5),), n=1)   # wrong extents for n


def test_mesh_counts(mesh2d):
    assert mesh2d.nsteps == 36              # 9 / (1/4)
    assert mesh2d.ncells_axis == (6, 6)
    assert mesh2d.nnodes == 49
    with pytest.raises(MeshError):
        Mesh(Cylinder.triadic(1, 2), 1)
    with pytest.raises(MeshError):
        Mesh(Cylinder.triadic(1, 2), 2, c_tau=1.5)


def test_gradient_affine_exact(mesh2d):
    u = ScalarField.from_function(mesh2d, lambda t, x, y: x)
    g = gradient(u)
    assert np.allclose(g.values[:, :, 0], 1.0)
    assert np.allclose(g.values[:, :, 1], 0.0)
    u5 = ScalarField.from_function(mesh2d, lambda t, x, y: 5.0 * np.ones_like(x))
    assert np.abs(gradient(u5).values).max() == 0.0


def test_gradient_bilinear_hand_value(mesh2d):
    u = ScalarField.from_function(mesh2d, lambda t, x, y: x * y)
    g = gradient(u)
    cx, cy = np.meshgrid(*mesh2d.cell_centers, indexing="ij")
    assert np.allclose(g.values[0, :, 0], cy.ravel())
    assert np.allclose(g.values[0, :, 1], cx.ravel())


def test_constraint_residual_cases(mesh2d):
    v0 = ScalarField.zeros(mesh2d)
    h0 = VectorField.zeros(mesh2d)
    assert constraint_residual(v0, h0, "free-lateral-test") == 0.0
    # stream-function field: h = rot chi for nodal chi vanishing on the boundary
    chi = ScalarField.from_function(
        mesh2d, lambda t, x, y: np.sin(np.pi * (x + 1.5) / 3) * np.sin(np.pi * (y + 1.5) / 3))
    mid = 0.5 * (chi.values[:-1] + chi.values[1:])
    hx = mid @ mesh2d.grad_ops[1].T
    hy = -(mid @ mesh2d.grad_ops[0].T)
    h = VectorField(mesh2d, np.stack([hx, hy], axis=-1))
    assert constraint_residual(v0, h, "free-lateral-test") <= 1e-12
    # dt v = 1 with zero flux violates the constraint
    vt = ScalarField.from_function(mesh2d, lambda t, x, y: t * np.ones_like(x))
    assert constraint_residual(vt, h0, "free-lateral-test") > 1e-3
    with pytest.raises(MeshError):
        constraint_residual(v0, h0, "bogus-mode")


def test_divergence_is_negative_adjoint_of_gradient(mesh2d):
    # interior-tested rows annihilate gradients of boundary-zero scalars
    rng = np.random.default_rng(0)
    chi = np.zeros((mesh2d.nsteps + 1, mesh2d.nnodes))
    chi[:, mesh2d.interior_nodes] = rng.standard_normal(
        (mesh2d.nsteps + 1, len(mesh2d.interior_nodes)))
    phi = ScalarField(mesh2d, chi)
    g = gradient(phi)
    vol, tau = mesh2d.cell_volume, mesh2d.tau
    # sum over cells of grad psi_i . grad phi equals boundary terms only when
    # integrated against the all-ones function: rows for psi = 1 vanish
    rows = np.zeros((mesh2d.nsteps, mesh2d.nnodes))
    for a in range(2):
        rows += tau * vol * (g.values[:, :, a] @ mesh2d.grad_ops[a])
    assert np.abs(rows.sum(axis=1)).max() <= 1e-12


def test_triadic_children_counts():
    assert len(triadic_children(Cylinder.triadic(1, 2), 0)) == 81
    assert len(triadic_children(Cylinder.triadic(2, 1), 1)) == 27
    kids = triadic_children(Cylinder.triadic(1, 2), 0)
    total = sum(k.volume for k in kids)
    assert total == pytest.approx(Cylinder.triadic(1, 2).volume, rel=1e-12)
    with pytest.raises(MeshError):
        triadic_children(Cylinder.triadic(1, 2), 1)


def test_msp_bound_examples(mesh2d):
    zero = ScalarField.zeros(mesh2d)
    assert msp_bound(zero) == 0.0
    one = ScalarField.from_function(mesh2d, lambda t, x, y: np.ones_like(x))
    assert msp_bound(one) == pytest.approx(2.0, abs=1e-12)
    rng = np.random.default_rng(1)
    f = ScalarField(mesh2d, rng.standard_normal((mesh2d.nsteps + 1, mesh2d.nnodes)))
    c = -2.7
    cf = ScalarField(mesh2d, c * f.values)
    assert msp_bound(cf) == pytest.approx(abs(c) * msp_bound(f), rel=1e-12)


def test_submesh_restriction():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    inner = Cylinder.triadic(0, 2)
    f = ScalarField.from_function(mesh, lambda t, x, y: x + 2 * y + 0.5 * t)
    fr = restrict_scalar(f, inner)
    expect = ScalarField.from_function(fr.mesh, lambda t, x, y: x + 2 * y + 0.5 * t)
    assert np.allclose(fr.values, expect.values)


def test_exports_roundtrip(tmp_path):
    mesh = Mesh(Cylinder.triadic(0, 1), 2)
    f = ScalarField.from_function(mesh, lambda t, x: x + t)
    export_csv(f, str(tmp_path / "f.csv"))
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "t,x1,value"
    assert len(lines) == 1 + (mesh.nsteps + 1) * mesh.nnodes
    export_raw(f, str(tmp_path / "f"))
    meta = json.loads((tmp_path / "f.json").read_text())
    raw = np.fromfile(tmp_path / "f.f64", dtype="<f8").reshape(meta["shape"])
    assert np.array_equal(raw, f.values)
    assert meta["kind"] == "scalar"
