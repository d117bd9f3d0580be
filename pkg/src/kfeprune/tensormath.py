"""Dense linear-algebra primitives used by the curvature and pruning code.

All routines work on float64 numpy arrays.  Matrices are ordinary 2-D
arrays; ``vec``/``unvec`` use column-major stacking, which is what makes
``kron(s, a) @ vec(x) == vec(a @ x @ s.T)`` hold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SingularityError, SizeError, ValidationError

# Hard ceiling on kron output entries; anything bigger is a mistake at desk scale.
MAX_KRON_ENTRIES = 2 ** 26

# Relative asymmetry tolerated by sym_eig before it refuses the input.
SYM_TOL = 1e-6

# Ridge scale for the normal-equations solver.
LSTSQ_RIDGE = 1e-12


@dataclass
class SymEigen:
    """Eigendecomposition of a symmetric matrix.

    ``vectors`` holds orthonormal eigenvectors in columns, ``values`` the
    matching eigenvalues sorted in descending order.
    """

    vectors: np.ndarray
    values: np.ndarray


@dataclass
class KruskalFactors:
    """Factor matrices of a rank-r Kruskal (CP) tensor, one per mode.

    Every factor has the same column count r; mode k of the tensor has
    ``factors[k].shape[0]`` entries.
    """

    factors: list

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a float64 2-D array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return a


def vec(m) -> np.ndarray:
    """Column-major vectorization: stacks the columns of ``m``."""
    a = as_matrix(m, "vec input")
    return a.reshape(-1, order="F").copy()


def unvec(v, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`; fails if the length does not factor."""
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.size != rows * cols:
        raise DimensionError(f"cannot unvec length {a.size} into {rows}x{cols}")
    return a.reshape(rows, cols, order="F").copy()


def kron(a, b) -> np.ndarray:
    """Kronecker product with a result-size guard."""
    a = as_matrix(a, "kron lhs")
    b = as_matrix(b, "kron rhs")
    entries = a.shape[0] * b.shape[0] * a.shape[1] * b.shape[1]
    if entries > MAX_KRON_ENTRIES:
        raise SizeError(
            f"kron result would hold {entries} entries, budget is {MAX_KRON_ENTRIES}"
        )
    return np.kron(a, b)


def khatri_rao(a, b) -> np.ndarray:
    """Column-wise Kronecker product of two matrices with equal column counts."""
    a = as_matrix(a, "khatri_rao lhs")
    b = as_matrix(b, "khatri_rao rhs")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(
            f"khatri_rao needs equal column counts, got {a.shape[1]} and {b.shape[1]}"
        )
    m, r = a.shape
    n = b.shape[0]
    # column j is kron(a[:, j], b[:, j]); a's row index varies slower
    return (a[:, None, :] * b[None, :, :]).reshape(m * n, r)


def sym_eig(m) -> SymEigen:
    """Eigendecomposition of a (numerically) symmetric matrix.

    The input is symmetrized as (m + m.T)/2 first.  Asymmetry beyond
    ``SYM_TOL`` relative Frobenius norm is treated as a bug in the caller
    and raises instead of being hidden.
    """
    a = as_matrix(m, "sym_eig input")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = np.linalg.norm(a)
    asym = np.linalg.norm(a - a.T)
    if asym > SYM_TOL * max(scale, 1e-30):
        raise ValidationError(
            f"matrix is asymmetric beyond tolerance (rel {asym / max(scale, 1e-30):.3e})"
        )
    sym = (a + a.T) / 2.0
    values, vectors = np.linalg.eigh(sym)
    order = np.argsort(values)[::-1]
    return SymEigen(vectors=vectors[:, order].copy(), values=values[order].copy())


def lstsq(a, b) -> np.ndarray:
    """Least-squares solve of ``a @ x = b`` via ridge-stabilized normal equations.

    The ridge is tied to the scale of ``a.T @ a`` so well-posed systems are
    perturbed negligibly.  A system that stays singular even with the ridge
    (for example an all-zero ``a``) raises SingularityError.
    """
    a = as_matrix(a, "lstsq lhs")
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    b = as_matrix(b, "lstsq rhs")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"lstsq row mismatch: {a.shape[0]} vs {b.shape[0]}")
    gram = a.T @ a
    ridge = LSTSQ_RIDGE * np.trace(gram) / max(gram.shape[0], 1)
    gram = gram + ridge * np.eye(gram.shape[0])
    try:
        x = np.linalg.solve(gram, a.T @ b)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"normal equations singular beyond ridge: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SingularityError("normal equations produced non-finite solution")
    return x[:, 0] if squeeze else x
