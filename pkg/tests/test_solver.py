import numpy as np
import pytest

from parhom.field import FieldSpec, sample_field
from parhom.mesh import Cylinder, Mesh, ScalarField, VectorField, gradient
from parhom.norms import norm
from parhom.solver import CDProblem, solve_cd, solve_dual, variational_solve
from parhom.calibration import C_ENERGY


def test_affine_caloric_exact():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    fld = sample_field(FieldSpec.constant(np.eye(2)), 0)
    f = ScalarField.from_function(mesh, lambda t, x, y: x)
    u = solve_cd(CDProblem(fld, mesh, f))
    assert np.abs(u.values - f.values).max() <= 1e-12


def test_heat_kernel_oracle_refinement():
    fld = sample_field(FieldSpec.constant(np.eye(1)), 0)
    errs = {}
    for M in (4, 8):
        mesh = Mesh(Cylinder.box_cylinder(0.0, 0.25, [(0.0, 1.0)]), M)
        f = ScalarField.from_function(
            mesh, lambda t, x: np.where(t <= 0, np.sin(np.pi * x), 0.0))
        u = solve_cd(CDProblem(fld, mesh, f))
        exact = ScalarField.from_function(
            mesh, lambda t, x: np.exp(-np.pi ** 2 * t) * np.sin(np.pi * x))
        errs[M] = norm(ScalarField(mesh, u.values - exact.values), "L2")
    assert errs[8] <= 0.5 * errs[4]
    # absolute accuracy consistent with first order in tau = h^2
    assert errs[8] <= 0.55 * (1.0 / 8 ** 2) * np.pi ** 2


def test_maximum_principle_two_phase():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    fld = sample_field(FieldSpec.two_phase(2), 5)
    f = ScalarField.from_function(
        mesh, lambda t, x, y: 0.5 + 0.5 * np.sin(2 * x) * np.cos(3 * y + 0.2 * t))
    u = solve_cd(CDProblem(fld, mesh, f))
    assert u.values.min() >= -1e-9
    assert u.values.max() <= 1.0 + 1e-9


def test_variational_matches_stepping():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    rng = np.random.default_rng(2)
    for seed in range(3):
        fld = sample_field(FieldSpec.two_phase(2), seed)
        cs = rng.standard_normal(3)
        f = ScalarField.from_function(
            mesh, lambda t, x, y: cs[0] * x + cs[1] * np.sin(np.pi * y / 3)
            + 0.05 * cs[2] * t)
        us = solve_cd(CDProblem(fld, mesh, f))
        uv, jmin, res = variational_solve(CDProblem(fld, mesh, f))
        rel = norm(ScalarField(mesh, us.values - uv.values), "L2") \
            / max(norm(us, "L2"), 1e-300)
        assert rel <= 1e-6
        assert jmin >= -1e-9
        assert jmin <= 1e-10


def test_variational_with_source():
    mesh = Mesh(Cylinder.triadic(0, 2), 2)
    fld = sample_field(FieldSpec.two_phase(2), 1)
    f = ScalarField.from_function(mesh, lambda t, x, y: x * y)
    w = ScalarField.from_function(mesh, lambda t, x, y: np.cos(np.pi * x))
    us = solve_cd(CDProblem(fld, mesh, f, w_star=w))
    uv, jmin, _ = variational_solve(CDProblem(fld, mesh, f, w_star=w))
    assert np.abs(us.values - uv.values).max() <= 1e-8
    assert jmin >= -1e-9


def test_dual_affine_and_time_reversal():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    fld = sample_field(FieldSpec.constant(np.eye(2)), 0)
    f = ScalarField.from_function(mesh, lambda t, x, y: 2 * x - y)
    ud = solve_dual(CDProblem(fld, mesh, f, direction="dual"))
    assert np.abs(ud.values - f.values).max() <= 1e-12
    # symmetric time-independent field: dual = time reflection of forward
    fld2 = sample_field(FieldSpec.two_phase(2, time_dependent=False), 9)
    g = ScalarField.from_function(mesh, lambda t, x, y: np.cos(np.pi * x) * y + 0.2 * t)
    udual = solve_dual(CDProblem(fld2, mesh, g, direction="dual"))
    grev = ScalarField(mesh, g.values[::-1].copy())
    ufwd = solve_cd(CDProblem(fld2, mesh, grev))
    assert np.abs(udual.values - ufwd.values[::-1]).max() <= 1e-10


def test_skew_field_breaks_self_duality():
    mesh = Mesh(Cylinder.triadic(0, 2), 2)
    fld = sample_field(FieldSpec.skew_ensemble(2, 0.5), 4)
    f = ScalarField.from_function(mesh, lambda t, x, y: x * y + 0.3 * np.sin(np.pi * x))
    u = solve_cd(CDProblem(fld, mesh, f))
    ud = solve_dual(CDProblem(fld, mesh, f, direction="dual"))
    assert np.abs(u.values - ud.values[::-1]).max() > 1e-6


def test_energy_estimate_calibrated():
    mesh = Mesh(Cylinder.triadic(1, 2), 2)
    rng = np.random.default_rng(3)
    for seed in range(4):
        fld = sample_field(FieldSpec.two_phase(2), seed)
        cs = rng.standard_normal(4)
        f = ScalarField.from_function(
            mesh, lambda t, x, y: cs[0] * x + cs[1] * np.sin(np.pi * y / 3)
            + 0.05 * cs[2] * t + cs[3] * x * y / 3)
        u = solve_cd(CDProblem(fld, mesh, f))
        diff = ScalarField(mesh, u.values - f.values)
        cu = mesh.cylinder.space_volume ** (-1.0 / 2)
        gf = gradient(f)
        fpart = np.sqrt((cu * norm(f, "L2")) ** 2 + norm(gf, "L2") ** 2)
        dtf = ScalarField(mesh, np.vstack(
            [(f.values[1:] - f.values[:-1]) / mesh.tau,
             np.zeros((1, mesh.nnodes))]))
        rhs = fpart + norm(dtf, "dualH-1")
        assert norm(diff, "H1par") <= C_ENERGY * rhs


def test_duality_pairing_near_solution_space():
    # (grad u + grad u*, a grad u - a^T grad u*) is approximately an element
    # of the orthogonality space: its constraint defect in the free-scalar
    # pairing is at the discretization scale, far below the field scale
    mesh = Mesh(Cylinder.triadic(1, 2), 4)
    fld = sample_field(FieldSpec.two_phase(2, time_dependent=False), 2)
    f = ScalarField.from_function(mesh, lambda t, x, y: x + 0.2 * np.sin(np.pi * y / 3))
    g = ScalarField.from_function(mesh, lambda t, x, y: y - 0.1 * np.cos(np.pi * x / 3))
    u = solve_cd(CDProblem(fld, mesh, f))
    ustar = solve_dual(CDProblem(fld, mesh, g, direction="dual"))
    gu, gus = gradient(u), gradient(ustar)
    K = mesh.nsteps
    a = np.concatenate([mesh.coefficients(fld, k, k + 1) for k in range(K)])
    flux = (np.einsum("kcab,kcb->kca", a, gu.values)
            - np.einsum("kcba,kcb->kca", a, gus.values))
    vsum = ScalarField(mesh, u.values + ustar.values)
    from parhom.mesh import constraint_residual
    defect = constraint_residual(vsum, VectorField(mesh, flux), "zero-lateral-test")
    scale = norm(gu, "L2") + norm(gus, "L2")
    assert defect <= 0.05 * scale
