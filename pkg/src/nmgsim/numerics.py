"""Dense linear-algebra and integration kernel.

Everything downstream (network solution, equilibrium refinement, modal
analysis, time stepping) funnels through the three operations here: a
pivot-checked LU solve, a real nonsymmetric eigendecomposition that returns
matched left and right eigenvectors, and a classical fixed-step RK4 update.
The heavy factorizations are delegated to LAPACK via scipy (the same
balance -> Hessenberg -> shifted-QR machinery we would otherwise hand-roll),
with the contracts enforced on this side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class SingularMatrix(Exception):
    """LU pivot fell below the breakdown tolerance."""


class NoConvergence(Exception):
    """Eigenvalue iteration failed to converge (pathological input)."""


class NonFiniteDerivative(Exception):
    """An RK4 stage produced NaN or Inf."""


# Pivot breakdown threshold, relative to the matrix infinity norm.
PIVOT_RTOL = 1e-12


def _as_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return a


def lu_solve(a, b) -> np.ndarray:
    """Solve A x = b by LU with partial pivoting.

    Raises SingularMatrix if any pivot magnitude drops below
    PIVOT_RTOL * ||A||_inf, which covers both exactly singular and
    hopelessly ill-conditioned systems.
    """
    a = _as_square(a)
    b = np.asarray(b, dtype=float)
    norm_a = np.linalg.norm(a, np.inf) if a.size else 0.0
    lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if norm_a == 0.0 or np.any(pivots <= PIVOT_RTOL * norm_a):
        raise SingularMatrix(
            f"pivot {pivots.min() if pivots.size else 0.0:.3e} below "
            f"{PIVOT_RTOL:.0e} * ||A||_inf = {PIVOT_RTOL * norm_a:.3e}"
        )
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


@dataclass
class EigenDecomposition:
    """Eigenvalues with paired right and left eigenvectors.

    values[i] goes with right_vectors[:, i] and left_vectors[:, i].
    Right vectors satisfy A v = lambda v; left vectors satisfy
    w^H A = lambda w^H. Columns are unit-norm but not biorthogonalized;
    see `biorthogonal_pair` for the normalized w^H v = 1 pairing.
    """

    values: np.ndarray
    right_vectors: np.ndarray
    left_vectors: np.ndarray


def eig_real(a) -> EigenDecomposition:
    """Full eigendecomposition of a real square matrix.

    Returns all n eigenvalues (with multiplicity, closed under complex
    conjugation) and the matched left/right eigenvectors.
    """
    a = _as_square(a)
    try:
        values, left, right = scipy.linalg.eig(
            a, left=True, right=True, check_finite=False
        )
    except np.linalg.LinAlgError as exc:  # pragma: no cover - pathological
        raise NoConvergence(str(exc)) from exc
    if not np.all(np.isfinite(values)):  # pragma: no cover - pathological
        raise NoConvergence("eigenvalue iteration returned non-finite values")
    return EigenDecomposition(values=values, right_vectors=right, left_vectors=left)


def biorthogonal_pair(dec: EigenDecomposition, i: int):
    """Return (w, v) for mode i rescaled so that w^H v = 1.

    Raises SingularMatrix if the pair is numerically degenerate
    (w nearly orthogonal to v, e.g. a defective cluster).
    """
    v = dec.right_vectors[:, i]
    w = dec.left_vectors[:, i]
    s = np.vdot(w, v)
    if abs(s) < 1e-10 * (np.linalg.norm(w) * np.linalg.norm(v)):
        raise SingularMatrix(f"degenerate left/right pair for mode {i}")
    return w / np.conj(s), v


def rk4_step(f, x, t: float, h: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step of x' = f(t, x)."""
    if not h > 0.0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=float)

    k1 = np.asarray(f(t, x))
    k2 = np.asarray(f(t + 0.5 * h, x + 0.5 * h * k1))
    k3 = np.asarray(f(t + 0.5 * h, x + 0.5 * h * k2))
    k4 = np.asarray(f(t + h, x + h * k3))
    for name, k in (("k1", k1), ("k2", k2), ("k3", k3), ("k4", k4)):
        if not np.all(np.isfinite(k)):
            raise NonFiniteDerivative(f"stage {name} produced non-finite values")
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
