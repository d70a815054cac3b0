# -*- coding: utf-8 -*-
"""Small dense linear algebra needed by the low-rank quantizer.

The SVD is a one-sided (Hestenes) Jacobi iteration: pairs of columns are
rotated until every pair is orthogonal, after which the column norms are the
singular values. It is slow for big matrices and very accurate for the small
ones a toy layer has.
"""

import logging

import numpy as np

from common.tensor import Tensor, NumericError
from common.util import ParameterError

__all__ = ['svd_truncated', 'jacobi_svd', 'low_rank_factors']

#: Relative off-diagonal tolerance below which a column pair counts as orthogonal
JACOBI_TOL = 1e-15


def jacobi_svd(a, max_sweeps=None):
    """Thin SVD of a matrix with at least as many rows as columns.

    :param numpy.ndarray a: Matrix of shape ``(m, n)`` with ``m >= n``.
    :param int max_sweeps: Sweep cap. Defaults to ``100 * n``.
    :return: ``(u, s, vt)`` with ``u`` of shape ``(m, n)``, ``s`` of shape
        ``(n,)`` sorted descending and ``vt`` of shape ``(n, n)``.
    :rtype: tuple
    :raises NumericError: When the rotations haven't converged after
        ``max_sweeps`` sweeps.
    """
    m, n = a.shape
    if m < n:
        raise ParameterError('jacobi_svd needs m >= n, got {}x{}'.format(m, n))
    if max_sweeps is None:
        max_sweeps = 100 * max(n, 1)
    u = np.array(a, dtype=np.float64)
    v = np.eye(n)

    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if abs(gamma) <= JACOBI_TOL * np.sqrt(alpha * beta) or gamma == 0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2. * gamma)
                t = (1. if zeta >= 0 else -1.) / (abs(zeta) + np.sqrt(1. + zeta * zeta))
                c = 1. / np.sqrt(1. + t * t)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q]
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
                vp, vq = v[:, p].copy(), v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            logging.debug('Jacobi SVD of a {}x{} matrix converged after {} sweeps'.format(m, n, sweep + 1))
            break
    else:
        logging.error('Jacobi SVD of a {}x{} matrix did not converge in {} sweeps'.format(m, n, max_sweeps))
        raise NumericError('Jacobi SVD did not converge after {} sweeps'.format(max_sweeps))

    sigma = np.sqrt(np.sum(u * u, axis=0))
    order = np.argsort(-sigma, kind='stable')
    sigma, u, v = sigma[order], u[:, order], v[:, order]

    # Columns belonging to (numerically) zero singular values carry no
    # direction; replace them with an orthonormal completion.
    tiny = sigma <= max(sigma[0] if n else 0., 1.) * 1e-13
    for j in range(n):
        if tiny[j]:
            u[:, j] = _orthonormal_complement(u[:, :j], m)
        else:
            u[:, j] /= sigma[j]
    return u, np.where(tiny, 0., sigma), v.T


def _orthonormal_complement(basis, m):
    """Return a unit vector orthogonal to the (orthonormal) columns of ``basis``."""
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.
        for _ in range(2):
            e = e - basis @ (basis.T @ e)
        norm = np.sqrt(e @ e)
        if norm > 1e-6:
            return e / norm
    raise NumericError('Could not complete an orthonormal basis of dimension {}'.format(m))


def svd_truncated(w, r):
    """Best rank-``r`` factorization of a matrix.

    :param w: The matrix, shape ``(m, n)``.
    :type w: Tensor or numpy.ndarray
    :param int r: Rank, ``1 <= r <= min(m, n)``.
    :return: ``(u, s, v)`` with ``u`` of shape ``(m, r)`` (orthonormal
        columns), ``s`` of shape ``(r,)`` (non-negative, non-increasing) and
        ``v`` of shape ``(r, n)`` (orthonormal rows), so that
        ``u @ np.diag(s) @ v`` is the best rank-``r`` approximation of ``w``.
    :rtype: tuple(numpy.ndarray, numpy.ndarray, numpy.ndarray)
    :raises ParameterError: When ``r`` is out of range.
    :raises NumericError: When the iteration does not converge.
    """
    a = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if a.ndim != 2:
        raise ParameterError('svd_truncated needs a matrix, got shape {}'.format(a.shape))
    m, n = a.shape
    if not 1 <= r <= min(m, n):
        raise ParameterError('Rank must be in [1, {}], got {}'.format(min(m, n), r))
    if m >= n:
        u, s, vt = jacobi_svd(a)
    else:
        ut, s, v = jacobi_svd(a.T)
        u, vt = v.T, ut.T
    return u[:, :r].copy(), s[:r].copy(), vt[:r, :].copy()


def low_rank_factors(w, r):
    """Split ``w`` into ``l1 @ l2`` of rank ``r`` with the singular values shared evenly.

    ``l1 = u·diag(√s)``, ``l2 = diag(√s)·v``. For ``r == 0`` the factors are
    empty (shapes ``(m, 0)`` and ``(0, n)``).

    :rtype: tuple(numpy.ndarray, numpy.ndarray)
    """
    a = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    m, n = a.shape
    if r == 0:
        return np.zeros((m, 0)), np.zeros((0, n))
    u, s, v = svd_truncated(a, r)
    root = np.sqrt(s)
    return u * root, root[:, None] * v
