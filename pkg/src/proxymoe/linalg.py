"""Dense Cholesky factorization with incremental one-row extension.

The greedy subset-selection loop needs ``log det`` of a growing family of
principal submatrices.  Refactorizing from scratch costs O(k^3) per query;
extending an existing lower-triangular factor ``P`` by one row costs one
triangular solve (O(k^2)) plus O(k) extra arithmetic:

    P y = k_vec,        sigma^2 = diag - ||y||^2,
    P' = [[P, 0], [y^T, sigma]],   log det' = log det + ln(sigma^2).

Pivots and Schur complements at or below ``JITTER_FLOOR`` are treated as
numerically dependent rather than jittered, which keeps the determinant
identities exact for testing.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonPositiveSchur, NotPositiveDefinite
from .validation import as_matrix, as_vector, check_square, check_symmetric

# Pivots / Schur complements at or below this are considered dependent.
JITTER_FLOOR = 1e-12

# Optional arithmetic-operation counters, installed by count_operations().
_counters = None


@contextmanager
def count_operations():
    """Count arithmetic performed by solves vs. the extension extras.

    Debug instrumentation: within the context, ``solve_flops`` tallies the
    O(order^2) triangular-solve work and ``extend_extra_flops`` tallies
    everything cholesky_extend does beyond the solve, which must stay
    O(order).
    """
    global _counters
    previous = _counters
    _counters = {"solve_flops": 0, "extend_extra_flops": 0}
    try:
        yield _counters
    finally:
        _counters = previous


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor of a positive-definite submatrix.

    ``lower`` satisfies ``lower @ lower.T == m`` for the factored matrix,
    ``log_det`` tracks ``sum(2 * ln(lower[i, i]))``, and ``selected_ids``
    records which items (in order) the factor covers.
    """

    lower: np.ndarray
    log_det: float
    selected_ids: tuple

    @property
    def order(self):
        return self.lower.shape[0]

    def reconstruct(self):
        """Return ``lower @ lower.T``."""
        return self.lower @ self.lower.T


def _default_ids(n):
    return tuple(str(i) for i in range(n))


def cholesky_decompose(m, ids=None):
    """Factor a symmetric positive-definite matrix as ``P @ P.T``.

    Parameters
    ----------
    m : (n, n) array_like
        Symmetric (within 1e-10) positive-definite matrix.
    ids : sequence of str, optional
        Item identifiers covered by the factor; defaults to "0".."n-1".

    Returns
    -------
    CholeskyFactor

    Raises
    ------
    NotPositiveDefinite
        If any pivot is at or below JITTER_FLOOR, e.g. for duplicate-
        contaminated subsets.
    """
    a = as_matrix(m, "matrix")
    check_square(a, "matrix")
    check_symmetric(a, 1e-10, "matrix")
    n = a.shape[0]
    if ids is None:
        ids = _default_ids(n)
    elif len(ids) != n:
        raise DimensionMismatch(f"got {len(ids)} ids for order-{n} matrix")

    lower = np.zeros((n, n))
    log_det = 0.0
    for j in range(n):
        pivot = a[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot <= JITTER_FLOOR:
            raise NotPositiveDefinite(
                f"pivot {pivot:.3e} at column {j} is at or below {JITTER_FLOOR}"
            )
        d = np.sqrt(pivot)
        lower[j, j] = d
        if j + 1 < n:
            lower[j + 1:, j] = (a[j + 1:, j] - lower[j + 1:, :j] @ lower[j, :j]) / d
        log_det += 2.0 * np.log(d)
    return CholeskyFactor(lower=lower, log_det=log_det, selected_ids=tuple(ids))


def solve_lower_triangular(f, k):
    """Solve ``P y = k`` by forward substitution against ``f.lower``."""
    rhs = as_vector(k, "rhs")
    if rhs.shape[0] != f.order:
        raise DimensionMismatch(
            f"rhs length {rhs.shape[0]} does not match factor order {f.order}"
        )
    if f.order == 0:
        return np.zeros(0)
    if _counters is not None:
        _counters["solve_flops"] += f.order * f.order
    return solve_triangular(f.lower, rhs, lower=True, check_finite=False)


def cholesky_extend(f, k, diag, new_id=None):
    """Extend a factor by one item given its cross- and self-similarity.

    Parameters
    ----------
    f : CholeskyFactor
        Factor over the currently selected items.
    k : (order,) array_like
        Similarities between the new item and the selected items.
    diag : float
        The new item's self-similarity.
    new_id : str, optional
        Identifier of the new item; defaults to str(order).

    Returns
    -------
    CholeskyFactor
        Factor of order + 1 with ``log_det`` increased by ``ln(sigma^2)``
        where ``sigma^2 = diag - ||y||^2``.

    Raises
    ------
    NonPositiveSchur
        If ``sigma^2`` is at or below JITTER_FLOOR; the candidate is
        numerically dependent on the selected span and must be skipped.
    """
    y = solve_lower_triangular(f, k)
    sigma2 = float(diag) - float(y @ y)
    if _counters is not None:
        # ||y||^2 plus a handful of scalar ops; no O(order^2) work here.
        _counters["extend_extra_flops"] += 2 * f.order + 4
    if sigma2 <= JITTER_FLOOR:
        raise NonPositiveSchur(
            f"schur complement {sigma2:.3e} is at or below {JITTER_FLOOR}"
        )
    n = f.order
    lower = np.zeros((n + 1, n + 1))
    lower[:n, :n] = f.lower
    lower[n, :n] = y
    lower[n, n] = np.sqrt(sigma2)
    if new_id is None:
        new_id = str(n)
    return CholeskyFactor(
        lower=lower,
        log_det=f.log_det + np.log(sigma2),
        selected_ids=f.selected_ids + (str(new_id),),
    )
