"""Dense symmetric-matrix helpers and seeded Gaussian sampling.

Everything here is float64 and side-effect free; randomness is always driven
by an explicit integer seed.
"""

import logging

import numpy as np

from hybridckf.errors import NotPositiveDefinite, StabilizationFailed

logger = logging.getLogger(__name__)

#: Number of nonzero jitter levels tried after the unjittered attempt.
JITTER_STEPS = 7
DEFAULT_JITTER = 1e-9


def symmetrize(m):
    """Return ``(m + m.T) / 2`` as a float64 array (exactly symmetric)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return 0.5 * (m + m.T)


def cholesky(m):
    """Lower Cholesky factor ``L`` with ``L @ L.T == m``.

    Raises
    ------
    NotPositiveDefinite
        If a pivot is not strictly positive (or the input is non-finite). A
        squared pivot below ``d * eps * max|diag(m)|`` is treated as zero.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        factor = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    # pivots at round-off level count as zero
    floor = m.shape[0] * np.finfo(np.float64).eps * np.max(np.abs(np.diag(m)))
    if not np.all(np.diag(factor) ** 2 > floor):
        raise NotPositiveDefinite("zero pivot")
    return factor


def jitter_schedule(base_jitter=DEFAULT_JITTER):
    """The diagonal loads tried by :func:`ensure_spd`, in order."""
    if not base_jitter > 0:
        raise ValueError("base_jitter must be positive")
    return [0.0] + [base_jitter * 10.0**i for i in range(JITTER_STEPS)]


def stabilize(m, base_jitter=DEFAULT_JITTER):
    """Symmetrize and load the diagonal until a Cholesky factor exists.

    Returns ``(matrix, factor, rung)`` where ``rung`` is the index into
    :func:`jitter_schedule` that succeeded (0 means no jitter was needed).
    Callers that need the factor anyway avoid a second factorization.
    """
    sym = symmetrize(m)
    eye = np.eye(sym.shape[0])
    for rung, lam in enumerate(jitter_schedule(base_jitter)):
        candidate = sym + lam * eye if lam else sym
        try:
            factor = cholesky(candidate)
        except NotPositiveDefinite:
            continue
        if rung > 1:
            logger.debug("covariance repaired with jitter %.1e (rung %d)", lam, rung)
        return candidate, factor, rung
    raise StabilizationFailed(
        f"no jitter up to {base_jitter * 10.0 ** (JITTER_STEPS - 1):.1e} made the matrix SPD"
    )


def ensure_spd(m, base_jitter=DEFAULT_JITTER):
    """Symmetric positive-definite repair of ``m``.

    Returns ``(m + m.T)/2 + lam*I`` for the smallest ``lam`` in
    ``{0, base, 10*base, ..., 1e6*base}`` for which Cholesky succeeds.
    """
    return stabilize(m, base_jitter)[0]


def draw_gaussian(mean, cov_diag, seed):
    """Independent Gaussian draw ``mean + sqrt(cov_diag) * z`` from a seeded stream."""
    mean = np.asarray(mean, dtype=np.float64)
    cov_diag = np.asarray(cov_diag, dtype=np.float64)
    if mean.shape != cov_diag.shape:
        raise ValueError("mean and cov_diag lengths differ")
    if np.any(cov_diag < 0):
        raise ValueError("variances must be nonnegative")
    z = np.random.default_rng(seed).standard_normal(mean.shape)
    return mean + np.sqrt(cov_diag) * z
