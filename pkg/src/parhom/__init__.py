"""parhom: a numerical laboratory for quantitative stochastic homogenization
of linear parabolic equations with space-time random coefficients.

Subpackages:

* :mod:`parhom.field`      -- stationary random coefficient fields and their
  convex variational encoding;
* :mod:`parhom.mesh`       -- triadic parabolic cylinders, tensor meshes,
  discrete space-time calculus;
* :mod:`parhom.norms`      -- all norms, including exact discrete negative
  parabolic Sobolev norms;
* :mod:`parhom.kernel`     -- the constrained quadratic solver backends;
* :mod:`parhom.subadd`     -- the subadditive energies mu, mu*, J and their
  identities;
* :mod:`parhom.solver`     -- Cauchy-Dirichlet marching and the variational
  cross-check;
* :mod:`parhom.homog`      -- coarsened/homogenized matrix estimation, decay
  curves, independent oracles;
* :mod:`parhom.corrector`  -- finite-volume correctors and their error
  functionals;
* :mod:`parhom.experiment` -- homogenization-error and regularity
  experiments;
* :mod:`parhom.cli`        -- the configuration-driven runner
  (``python -m parhom.cli`` or the ``parhom`` script).
"""

from .field import (CoefficientField, EllipticMatrix, FieldSpec, bigA, eval_a,
                    fitzpatrick, sample_field)
from .mesh import (Cylinder, Mesh, ScalarField, VectorField,
                   constraint_residual, gradient, msp_bound, triadic_children)
from .norms import norm

__version__ = "0.1.0"

__all__ = [
    "CoefficientField", "EllipticMatrix", "FieldSpec", "bigA", "eval_a",
    "fitzpatrick", "sample_field",
    "Cylinder", "Mesh", "ScalarField", "VectorField", "constraint_residual",
    "gradient", "msp_bound", "triadic_children", "norm",
    "__version__",
]
