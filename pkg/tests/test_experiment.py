import numpy as np
import pytest

from parhom.experiment import (boundary_datum, default_cylinder,
                               homogenization_error, lipschitz_diagnostic,
                               rate_scan, two_scale_defect)
from parhom.field import FieldSpec, sample_field
from parhom.mesh import Cylinder, Mesh, MeshError, ScalarField


def test_constant_field_errors_vanish():
    a0 = 2.0 * np.eye(2)
    rep = homogenization_error(FieldSpec.constant(a0), 1 / 3, "affine+sine", a0, 0)
    assert rep.grad_dual_err <= 1e-8
    assert rep.flux_dual_err <= 1e-8
    assert rep.l2_err <= 1e-8


def test_affine_datum_constant_field_exact():
    a0 = np.diag([2.0, 1.0])
    mesh = Mesh(default_cylinder(2), 12)
    fld = FieldSpec.constant(a0)
    rep = homogenization_error(fld, 1 / 3, "affine", a0, 0)
    assert rep.l2_err <= 1e-12


def test_under_resolved_refusal():
    spec = FieldSpec.two_phase(2)
    with pytest.raises(MeshError):
        homogenization_error(spec, 0.3, "affine", 2 * np.eye(2), 0)  # 4/0.3 not integer


def test_checkerboard_errors_decrease_smoke():
    spec = FieldSpec.two_phase(2)
    ah = 2.0 * np.eye(2)
    r1 = homogenization_error(spec, 1 / 3, "affine+sine", ah, 3)
    r2 = homogenization_error(spec, 1 / 9, "affine+sine", ah, 3)
    assert r2.l2_err < r1.l2_err
    assert r2.grad_dual_err < r1.grad_dual_err


def test_rate_scan_constant_flags():
    a0 = 2.0 * np.eye(2)
    scan = rate_scan(FieldSpec.constant(a0), [1 / 3, 1 / 9], "affine+sine",
                     a0, 2, 0)
    assert all(v is None for v in scan.alphas.values())


def test_lipschitz_affine_ratio_one():
    a0 = np.eye(2)
    spec = FieldSpec.constant(a0)
    # affine data make grad u constant: every ratio is exactly 1
    from parhom import experiment as ex
    old = ex._DATA.copy()
    try:
        ex._DATA["pure-affine"] = lambda t, *x: 2.0 * x[0] - x[1]
        # run via solve path with deterministic data by patching the rng draw
        out = lipschitz_diagnostic(spec, 3, [1, 3], 1, 0, M=2)
        assert out["max_ratio"][-1] == pytest.approx(1.0, abs=1e-12)
    finally:
        ex._DATA.clear()
        ex._DATA.update(old)
    # directly check the affine case through the solver
    from parhom.mesh import gradient, restrict_vector
    from parhom.solver import CDProblem, solve_cd
    from parhom.norms import norm as _norm
    cyl = Cylinder.box_cylinder(-9.0, 0.0, [(-3.0, 3.0)] * 2)
    mesh = Mesh(cyl, 2)
    fld = sample_field(spec, 0)
    f = ScalarField.from_function(mesh, lambda t, x, y: 2 * x - y)
    u = solve_cd(CDProblem(fld, mesh, f))
    g = gradient(u)
    sub = Cylinder.box_cylinder(-1.0, 0.0, [(-1.0, 1.0)] * 2)
    assert _norm(restrict_vector(g, sub), "L2") == pytest.approx(
        _norm(g, "L2"), rel=1e-12)


def test_lipschitz_reference_mesh_agreement():
    # constant-field ratios computed on M and 2M grids agree to 1% absolute
    spec = FieldSpec.constant(np.eye(2))
    outs = {M: lipschitz_diagnostic(spec, 3, [1, 3], 2, 0, M=M) for M in (2, 4)}
    r_coarse = outs[2]["median_ratio"][0]
    r_fine = outs[4]["median_ratio"][0]
    assert abs(r_coarse - r_fine) <= 0.01


def test_lipschitz_checkerboard_bounded():
    spec = FieldSpec.two_phase(2, time_dependent=False)
    out3 = lipschitz_diagnostic(spec, 3, [1], 4, 0, M=2)
    assert np.isfinite(out3["max_ratio"]).all()
    assert out3["max_ratio"][0] <= 1.0 + 1e-9   # interior energy below total


def test_two_scale_defect_constant():
    a0 = 2.0 * np.eye(2)
    from parhom.corrector import build_corrector
    fld = sample_field(FieldSpec.constant(a0), 0)
    bundles = [build_corrector(fld, 1, np.eye(2)[a], a0, M=2) for a in range(2)]
    out = two_scale_defect(FieldSpec.constant(a0), 1 / 3, "affine+sine", a0,
                           bundles, 0)
    # with zero correctors the expansion reduces to u, and u_eps == u
    assert out["l2"] <= 1e-8
