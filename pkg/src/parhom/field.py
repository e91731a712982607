"""Stationary random space-time coefficient fields and their variational encoding.

A coefficient field assigns to every unit cell of Z x Z^d a d-by-d elliptic
matrix, independently across cells (hence stationary with unit range of
dependence, by construction).  Values are derived on demand from a
counter-based hash of ``(seed, cell index)``: no storage, O(1) random access,
bitwise reproducibility.

The variational encoding of the (possibly nonsymmetric) matrix ``a`` is the
convex function ``A(p, q) = 1/2 p.s p + 1/2 (q - m p).s^{-1}(q - m p)`` built
from the symmetric/skew parts ``s, m`` of ``a``; it satisfies ``A >= p.q``
with equality exactly on the graph ``q = a p``.  Its Hessian is the
symmetric ``2d x 2d`` block matrix returned by :func:`bigA`.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

__all__ = [
    "EllipticMatrix",
    "FieldSpec",
    "CoefficientField",
    "sample_field",
    "eval_a",
    "fitzpatrick",
    "bigA",
    "split_sym_skew",
]


class FieldError(ValueError):
    """Invalid field specification (ellipticity violated, bad parameters)."""


# ---------------------------------------------------------------------------
# elliptic matrices


def split_sym_skew(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (s, m) with a = s + m, s symmetric, m skew-symmetric."""
    at = np.swapaxes(a, -1, -2)
    return 0.5 * (a + at), 0.5 * (a - at)


def _check_elliptic(a: np.ndarray, lam: float, atol: float = 1e-12) -> bool:
    """Check xi.a xi >= |xi|^2/lam and |a xi| <= lam |xi|."""
    s, _ = split_sym_skew(a)
    ev = np.linalg.eigvalsh(s)
    if ev.min() < 1.0 / lam - atol:
        return False
    op = np.linalg.norm(a, 2) if a.ndim == 2 else max(np.linalg.norm(m, 2) for m in a)
    return op <= lam + atol


@dataclass(frozen=True)
class EllipticMatrix:
    """A d-by-d matrix with ellipticity constant ``lam`` >= 1.

    Satisfies ``xi . a xi >= |xi|^2 / lam`` and ``|a xi| <= lam |xi|``; the
    symmetric part is positive definite.
    """

    entries: np.ndarray
    lam: float

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        object.__setattr__(self, "entries", a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise FieldError(f"matrix must be square, got shape {a.shape}")
        if self.lam < 1.0:
            raise FieldError(f"ellipticity constant must be >= 1, got {self.lam}")
        if not _check_elliptic(a, self.lam):
            raise FieldError(
                f"matrix violates ellipticity with Lambda={self.lam}:\n{a!r}"
            )

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    def sym(self) -> np.ndarray:
        return split_sym_skew(self.entries)[0]

    def skew(self) -> np.ndarray:
        return split_sym_skew(self.entries)[1]


# ---------------------------------------------------------------------------
# counter-based hashing (splitmix64-style finalizer)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


def cell_hash(seed: int, coords: Sequence[np.ndarray], stream: int = 0) -> np.ndarray:
    """Hash integer cell coordinates to uint64, vectorized over cells.

    ``coords`` is a sequence of (broadcastable) integer arrays, one per
    coordinate axis (time first).  Distinct ``stream`` values give
    independent draws on the same cell.
    """
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * np.uint64(stream + 1))
        acc = np.broadcast_arrays(*[np.asarray(c) for c in coords])[0]
        acc = np.full(acc.shape, h, dtype=np.uint64)
        for axis, c in enumerate(coords):
            c64 = np.asarray(c, dtype=np.int64).astype(np.uint64)
            acc = _mix64(acc ^ (c64 + _GOLDEN * np.uint64(axis + 2)))
        return acc


def cell_uniform(seed: int, coords: Sequence[np.ndarray], stream: int = 0) -> np.ndarray:
    """Uniform [0,1) variates, one per cell, from the counter-based hash."""
    bits = cell_hash(seed, coords, stream)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# field specifications

_KINDS = ("constant", "periodic-checkerboard", "random-checkerboard", "random-rotation")


@dataclass(frozen=True)
class FieldSpec:
    """Description of a coefficient-field law on unit cells of Z x Z^d.

    kind:
      * ``constant``: one matrix everywhere (``matrices[0]``).
      * ``periodic-checkerboard``: ``matrices`` cycled by the parity/phase
        ``(t + x_1 + ... + x_d) mod len(matrices)`` with spatial period
        ``period`` (stripes along axis ``axis`` if ``axis >= 0``).
      * ``random-checkerboard``: one matrix per cell, iid with
        ``probabilities``.
      * ``random-rotation``: identity plus an iid uniform skew part of
        amplitude ``skew_amplitude`` per cell.
    time_dependent=False freezes the draw of cell (0, x) for all times.
    """

    kind: str
    dimension: int
    lam: float
    matrices: tuple = ()
    probabilities: tuple = ()
    period: int = 1
    axis: int = -1
    skew_amplitude: float = 0.0
    time_dependent: bool = True

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise FieldError(f"unknown field kind {self.kind!r}; use one of {_KINDS}")
        if self.dimension not in (1, 2, 3):
            raise FieldError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        if self.lam < 1.0:
            raise FieldError(f"Lambda must be >= 1, got {self.lam}")
        mats = tuple(np.asarray(m, dtype=float) for m in self.matrices)
        object.__setattr__(self, "matrices", mats)
        for m in mats:
            EllipticMatrix(m, self.lam)  # raises with the offending matrix
        if self.kind == "constant" and len(mats) != 1:
            raise FieldError("constant field needs exactly one matrix")
        if self.kind == "periodic-checkerboard" and len(mats) < 2:
            raise FieldError("periodic checkerboard needs at least two matrices")
        if self.kind == "random-checkerboard":
            p = np.asarray(self.probabilities, dtype=float)
            if len(mats) < 2 or len(p) != len(mats):
                raise FieldError("random checkerboard needs matching matrices/probabilities")
            if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
                raise FieldError(f"probabilities must be nonnegative and sum to 1, got {p}")
            object.__setattr__(self, "probabilities", tuple(p))
        if self.kind == "random-rotation":
            # skew part leaves xi.a xi = |xi|^2; operator norm needs 1 + amp <= lam
            if not 0.0 <= self.skew_amplitude < 1.0:
                raise FieldError("skew amplitude must lie in [0, 1)")
            if 1.0 + self.skew_amplitude > self.lam + 1e-12:
                raise FieldError(
                    f"skew amplitude {self.skew_amplitude} exceeds Lambda-1={self.lam - 1}"
                )

    # -- convenience constructors ------------------------------------------

    @staticmethod
    def constant(a0: np.ndarray, lam: float | None = None) -> "FieldSpec":
        a0 = np.atleast_2d(np.asarray(a0, dtype=float))
        if lam is None:
            s, _ = split_sym_skew(a0)
            ev = np.linalg.eigvalsh(s)
            lam = max(1.0, 1.0 / ev.min(), np.linalg.norm(a0, 2))
        return FieldSpec("constant", a0.shape[0], float(lam), (a0,))

    @staticmethod
    def two_phase(d: int, a1: float = 1.0, a2: float = 4.0,
                  time_dependent: bool = True) -> "FieldSpec":
        """Equal-probability random checkerboard {a1*I, a2*I}."""
        lam = max(a1, a2, 1.0 / min(a1, a2))
        mats = (a1 * np.eye(d), a2 * np.eye(d))
        return FieldSpec("random-checkerboard", d, lam, mats, (0.5, 0.5),
                         time_dependent=time_dependent)

    @staticmethod
    def laminate(d: int, a1: float = 1.0, a2: float = 4.0, axis: int = 0) -> "FieldSpec":
        """Time-independent stripes {a1*I, a2*I} of unit width, normal to ``axis``."""
        lam = max(a1, a2, 1.0 / min(a1, a2))
        mats = (a1 * np.eye(d), a2 * np.eye(d))
        return FieldSpec("periodic-checkerboard", d, lam, mats, period=1, axis=axis,
                         time_dependent=False)

    @staticmethod
    def skew_ensemble(d: int, amplitude: float = 0.5) -> "FieldSpec":
        """Identity symmetric part plus iid skew of the given amplitude."""
        return FieldSpec("random-rotation", d, 1.0 + amplitude, (np.eye(d),),
                         skew_amplitude=amplitude)


# ---------------------------------------------------------------------------
# realized fields


@dataclass(frozen=True)
class CoefficientField:
    """A realized coefficient field: pure function of (spec, seed, cell)."""

    spec: FieldSpec
    seed: int

    @property
    def d(self) -> int:
        return self.spec.dimension

    @property
    def lam(self) -> float:
        return self.spec.lam

    @property
    def time_dependent(self) -> bool:
        return self.spec.time_dependent and self.spec.kind != "constant"

    def cells(self, tcell: np.ndarray, xcells: Sequence[np.ndarray]) -> np.ndarray:
        """Matrices on unit cells, vectorized; returns shape (*broadcast, d, d).

        ``tcell`` and the ``d`` arrays in ``xcells`` are integer cell indices.
        """
        spec = self.spec
        d = spec.dimension
        tcell = np.asarray(tcell)
        xcells = [np.asarray(x) for x in xcells]
        if len(xcells) != d:
            raise FieldError(f"expected {d} spatial coordinates, got {len(xcells)}")
        if not spec.time_dependent:
            tcell = np.zeros_like(tcell)
        shape = np.broadcast_shapes(tcell.shape, *[x.shape for x in xcells])

        if spec.kind == "constant":
            out = np.empty(shape + (d, d))
            out[...] = spec.matrices[0]
            return out
        if spec.kind == "periodic-checkerboard":
            if spec.axis >= 0:
                phase = xcells[spec.axis] // spec.period
            else:
                phase = tcell + sum(x // spec.period for x in xcells)
            idx = np.broadcast_to(np.mod(phase, len(spec.matrices)), shape)
            return np.stack(spec.matrices)[idx]
        if spec.kind == "random-checkerboard":
            u = cell_uniform(self.seed, [tcell, *xcells])
            edges = np.cumsum(spec.probabilities)
            idx = np.searchsorted(edges, u, side="right")
            idx = np.minimum(idx, len(spec.matrices) - 1)
            return np.stack(spec.matrices)[np.broadcast_to(idx, shape)]
        # random-rotation: iid skew entries, one stream per upper pair
        out = np.zeros(shape + (d, d))
        out[...] = np.eye(d)
        stream = 0
        for i in range(d):
            for j in range(i + 1, d):
                u = cell_uniform(self.seed, [tcell, *xcells], stream=stream)
                kappa = spec.skew_amplitude * (2.0 * u - 1.0)
                out[..., i, j] += kappa
                out[..., j, i] -= kappa
                stream += 1
        return out


    def at(self, t: np.ndarray, xs: Sequence[np.ndarray]) -> np.ndarray:
        """Matrices at space-time points (constant on unit cells), vectorized."""
        tc = np.floor(np.asarray(t)).astype(np.int64)
        xc = [np.floor(np.asarray(x)).astype(np.int64) for x in xs]
        return self.cells(tc, xc)


@dataclass(frozen=True)
class RescaledField:
    """The field a(t / eps^2, x / eps): unit cells shrink to parabolic eps-cells."""

    base: CoefficientField
    eps: float

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def lam(self) -> float:
        return self.base.lam

    @property
    def seed(self) -> int:
        return self.base.seed

    @property
    def time_dependent(self) -> bool:
        return self.base.time_dependent

    def at(self, t: np.ndarray, xs: Sequence[np.ndarray]) -> np.ndarray:
        e = self.eps
        return self.base.at(np.asarray(t) / (e * e), [np.asarray(x) / e for x in xs])


def sample_field(spec: FieldSpec, seed: int) -> CoefficientField:
    """Realize a coefficient field from its law and a 64-bit seed."""
    return CoefficientField(spec, int(seed))


def eval_a(field: CoefficientField, t: float, x: Sequence[float]) -> EllipticMatrix:
    """Evaluate the field at a space-time point (constant on unit cells)."""
    tc = np.floor(np.asarray(t)).astype(np.int64)
    xc = [np.floor(np.asarray(xi)).astype(np.int64) for xi in np.atleast_1d(np.asarray(x, dtype=float))]
    a = field.cells(tc, xc)
    return EllipticMatrix(np.asarray(a, dtype=float).reshape(field.d, field.d), field.lam)


# ---------------------------------------------------------------------------
# the variational encoding


def _as_matrix(a) -> np.ndarray:
    if isinstance(a, EllipticMatrix):
        return a.entries
    return np.asarray(a, dtype=float)


def fitzpatrick(a, p: np.ndarray, q: np.ndarray) -> float | np.ndarray:
    """Convex form ``1/2 p.s p + 1/2 (q - m p).s^{-1}(q - m p)``.

    Always >= p.q, with equality iff q = a p.  Vectorized over leading axes
    of ``a`` (shape (..., d, d)) and ``p, q`` (shape (..., d)).
    """
    a = _as_matrix(a)
    s, m = split_sym_skew(a)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    r = q - np.einsum("...ij,...j->...i", m, p)
    sp = np.einsum("...ij,...j->...i", s, p)
    sinv_r = np.linalg.solve(s, r[..., None])[..., 0]
    val = 0.5 * np.einsum("...i,...i->...", p, sp) + 0.5 * np.einsum("...i,...i->...", r, sinv_r)
    return val if val.ndim else float(val)


def bigA(a) -> np.ndarray:
    """Symmetric ``2d x 2d`` Hessian block matrix of the form of :func:`fitzpatrick`.

    ``1/2 (p,q) . bigA(a) (p,q) == fitzpatrick(a, p, q)`` for all p, q; blocks
    are ``[[s - m s^{-1} m, m s^{-1}], [-s^{-1} m, s^{-1}]]``.  Vectorized
    over leading axes.
    """
    a = _as_matrix(a)
    s, m = split_sym_skew(a)
    d = a.shape[-1]
    sinv = np.linalg.inv(s)
    msinv = m @ sinv
    out = np.empty(a.shape[:-2] + (2 * d, 2 * d))
    out[..., :d, :d] = s - msinv @ m
    out[..., :d, d:] = msinv
    out[..., d:, :d] = -sinv @ m
    out[..., d:, d:] = sinv
    return out
