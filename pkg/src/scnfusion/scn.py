"""Structural covariance networks: group correlation, individual outer product, blend.

Matrices are plain ``(R, R)`` float64 arrays; a subject's dual-channel tensor
is ``(2, R, R)`` with channel 0 built from ROI means and channel 1 from ROI
IQRs.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

ALPHA = 0.55


class DegenerateSubjectError(ValueError):
    pass


def group_covariance(F, method="pearson"):
    """Correlation between ROI columns of ``F`` (N subjects x R ROIs).

    Zero-variance columns correlate 0 with everything else and 1 with
    themselves.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ValueError("group covariance needs at least two subjects")
    if method == "spearman":
        F = rankdata(F, axis=0)
    elif method != "pearson":
        raise ValueError(f"unknown correlation method {method!r}")
    Xc = F - F.mean(axis=0)
    ss = np.sqrt(np.einsum("ij,ij->j", Xc, Xc))
    scale = np.max(np.abs(F), axis=0) * np.sqrt(F.shape[0])
    const = ss <= 1e-13 * np.maximum(scale, 1e-300)
    Z = np.divide(Xc, ss, out=np.zeros_like(Xc), where=~const)
    C = Z.T @ Z
    C = 0.5 * (C + C.T)
    np.clip(C, -1.0, 1.0, out=C)
    np.fill_diagonal(C, 1.0)
    return C


def individual_scn(f):
    """``u u^T`` with ``u = f / ||f||``."""
    f = np.asarray(f, dtype=np.float64)
    norm = np.linalg.norm(f)
    if not norm > 0:
        raise DegenerateSubjectError("feature vector has zero norm")
    u = f / norm
    return np.outer(u, u)


def blend(group, individual, alpha=ALPHA):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    group = np.asarray(group)
    individual = np.asarray(individual)
    if group.shape != individual.shape:
        raise ValueError("group and individual matrices differ in shape")
    if alpha == 1.0:
        return group.astype(np.float64, copy=True)
    if alpha == 0.0:
        return individual.astype(np.float64, copy=True)
    return alpha * group + (1.0 - alpha) * individual


def build_scn_tensor(subject, group_mu, group_iqr, alpha=ALPHA):
    """Dual-channel ``(2, R, R)`` tensor for one :class:`SubjectFeatures`."""
    return np.stack(
        [
            blend(group_mu, individual_scn(subject.roi_means), alpha),
            blend(group_iqr, individual_scn(subject.roi_iqrs), alpha),
        ]
    )


def build_scn_batch(means, iqrs, group_mu, group_iqr, alpha=ALPHA):
    """Tensors for N subjects at once: ``(N, 2, R, R)``."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    iqrs = np.atleast_2d(np.asarray(iqrs, dtype=np.float64))
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    out = np.empty((means.shape[0], 2) + group_mu.shape)
    for ch, (F, G) in enumerate(((means, group_mu), (iqrs, group_iqr))):
        norms = np.linalg.norm(F, axis=1)
        if np.any(~(norms > 0)):
            bad = int(np.flatnonzero(~(norms > 0))[0])
            raise DegenerateSubjectError(f"subject row {bad} has a zero feature vector")
        U = F / norms[:, None]
        out[:, ch] = (1.0 - alpha) * (U[:, :, None] * U[:, None, :])
        out[:, ch] += alpha * G
    return out
