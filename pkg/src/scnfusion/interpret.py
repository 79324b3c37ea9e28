"""Grad-CAM on the SCN branch, ROI importance, biomarker selection and group statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .features import QUANTILE_METHOD

ADHD = 1


def gradcam_scn(model, scn, aux=None, target_class=ADHD):
    """Relevance maps for a batch of subjects, shape (B, R, R).

    Channel weights are the spatial mean of d(target logit)/d(activation) at
    the last convolutional block; the weighted sum is rectified and upsampled
    to the ROI grid by nearest neighbour. Evaluation mode makes every sample's
    gradient independent of the rest of the batch.
    """
    scn = np.asarray(scn, dtype=np.float64)
    if scn.ndim == 3:
        scn = scn[None]
        aux = None if aux is None else np.atleast_2d(aux)
    was = model.training
    model.eval()
    try:
        logits = model.forward(scn, aux)
        A = model.activations
        d = np.zeros_like(logits)
        d[:, target_class] = 1.0
        G = model.backward(d, to_input=False)
        model.zero_grad()
    finally:
        model.train(was)
    w = G.mean(axis=(2, 3))
    cam = np.maximum(np.einsum("bk,bkhw->bhw", w, A), 0.0)
    R = scn.shape[-1]
    rows = (np.arange(R) * cam.shape[1]) // R
    cols = (np.arange(R) * cam.shape[2]) // R
    return cam[:, rows][:, :, cols]


def roi_scores(cam):
    """Mean of row r and column r, averaged, then max-normalized.

    Accepts one (R, R) map or a batch (B, R, R); an all-zero map stays zero.
    """
    cam = np.asarray(cam, dtype=np.float64)
    if np.any(cam < 0):
        raise ValueError("relevance maps must be non-negative")
    raw = 0.5 * (cam.mean(axis=-1) + cam.mean(axis=-2))
    top = raw.max(axis=-1, keepdims=True)
    return np.divide(raw, top, out=np.zeros_like(raw), where=top > 0)


@dataclass
class RoiImportance:
    scores: np.ndarray
    threshold: float
    selected: list
    names: list = field(default_factory=list)
    n_subjects: int = 0

    def to_dict(self):
        return {
            "threshold": float(self.threshold),
            "n_subjects": self.n_subjects,
            "selected": [
                {"roi_index": int(r), "name": self.names[r] if self.names else None, "score": float(self.scores[r])}
                for r in self.selected
            ],
        }


def select_biomarkers(subject_scores, names=None, percentile=90.0):
    """Average per-subject scores and keep ROIs strictly above the percentile."""
    S = np.atleast_2d(np.asarray(subject_scores, dtype=np.float64))
    if S.shape[0] < 1:
        raise ValueError("need at least one subject map")
    avg = S.mean(axis=0)
    thr = float(np.quantile(avg, percentile / 100.0, method=QUANTILE_METHOD))
    selected = [int(r) for r in np.flatnonzero(avg > thr)]
    selected.sort(key=lambda r: (-avg[r], r))
    return RoiImportance(avg, thr, selected, list(names or []), S.shape[0])


# ---------------------------------------------------------------- statistics


def bonferroni(p):
    p = np.asarray(p, dtype=np.float64)
    return np.minimum(p * len(p), 1.0)


def benjamini_hochberg(p):
    """Step-up q-values: q_(i) = min_{j >= i} p_(j) m / j, capped at 1."""
    p = np.asarray(p, dtype=np.float64)
    m = len(p)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(q, 1.0)
    return out


def cohens_d(a, b):
    """(mean_b - mean_a) / pooled SD; NaN when the pooled variance is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.shape[0], b.shape[0]
    pooled = ((na - 1) * a.var(axis=0, ddof=1) + (nb - 1) * b.var(axis=0, ddof=1)) / (na + nb - 2)
    diff = b.mean(axis=0) - a.mean(axis=0)
    sd = np.sqrt(pooled)
    return np.divide(diff, sd, out=np.full(np.shape(diff), np.nan), where=sd > 0)


@dataclass
class StatReport:
    feature: str
    t: np.ndarray
    df: np.ndarray
    p: np.ndarray
    p_bonferroni: np.ndarray
    q_bh: np.ndarray
    d: np.ndarray
    undefined: np.ndarray  # zero pooled variance
    mw_u: np.ndarray
    mw_p: np.ndarray

    @property
    def n_large_effect(self):
        return int(np.sum(np.abs(np.nan_to_num(self.d)) > 0.8))


def roi_stat_tests(group_a, group_b, feature="roi_means"):
    """Welch t-test, Cohen's d, Bonferroni and BH per ROI; Mann-Whitney alongside.

    ``group_a`` is the reference (HC), ``group_b`` the comparison (ADHD), each
    (n_subjects, R). ROIs with zero variance in both groups get p = 1, NaN d
    and are flagged in ``undefined``.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("groups must be (n, R) matrices with equal R")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each group needs at least two subjects")
    va = a.var(axis=0, ddof=1) / a.shape[0]
    vb = b.var(axis=0, ddof=1) / b.shape[0]
    se2 = va + vb
    undefined = ~(se2 > 0)
    diff = b.mean(axis=0) - a.mean(axis=0)
    t = np.divide(diff, np.sqrt(se2), out=np.zeros_like(diff), where=~undefined)
    df_den = va**2 / (a.shape[0] - 1) + vb**2 / (b.shape[0] - 1)
    df = np.divide(se2**2, df_den, out=np.full_like(se2, np.nan), where=df_den > 0)
    p = np.ones_like(t)
    ok = ~undefined
    p[ok] = 2.0 * stats.t.sf(np.abs(t[ok]), df[ok])
    R = a.shape[1]
    mw_u = np.full(R, np.nan)
    mw_p = np.ones(R)
    for r in range(R):
        if np.ptp(np.concatenate([a[:, r], b[:, r]])) > 0:
            res = stats.mannwhitneyu(b[:, r], a[:, r], alternative="two-sided")
            mw_u[r], mw_p[r] = res.statistic, res.pvalue
    return StatReport(feature, t, df, p, bonferroni(p), benjamini_hochberg(p), cohens_d(a, b), undefined, mw_u, mw_p)


def kruskal_wallis(groups):
    """H statistic with midranks and tie correction; p from chi-square(k - 1)."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2 or any(len(g) < 1 for g in groups):
        raise ValueError("Kruskal-Wallis needs at least two non-empty groups")
    allv = np.concatenate(groups)
    n = len(allv)
    ranks = stats.rankdata(allv)
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start : start + len(g)]
        h += r.sum() ** 2 / len(g)
        start += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    _, counts = np.unique(allv, return_counts=True)
    corr = 1.0 - np.sum(counts**3 - counts) / (n**3 - n)
    if corr <= 0:
        return 0.0, 1.0
    h = max(h / corr, 0.0)
    return float(h), float(stats.chi2.sf(h, len(groups) - 1))


def network_kruskal_wallis(per_roi_values, grouping):
    """KW test of per-ROI values across networks.

    ``grouping`` maps ROI index to network name; every network needs at least
    two ROIs. Returns (H, p, {network: n_rois}).
    """
    values = np.asarray(per_roi_values, dtype=np.float64)
    nets = {}
    for r, net in grouping.items():
        if not 0 <= r < len(values):
            raise ValueError(f"grouping refers to ROI {r}, outside 0..{len(values) - 1}")
        nets.setdefault(net, []).append(r)
    if len(nets) < 2:
        raise ValueError("network grouping needs at least two networks")
    small = [k for k, v in nets.items() if len(v) < 2]
    if small:
        raise ValueError(f"networks with fewer than two ROIs: {small}")
    names = sorted(nets)
    h, p = kruskal_wallis([values[sorted(nets[k])] for k in names])
    return h, p, {k: len(nets[k]) for k in names}


def load_grouping(path=None):
    """Read a ``roi_index<TAB>network`` TSV; defaults to the bundled AAL lobe map."""
    if path is None:
        from importlib.resources import files

        path = files("scnfusion") / "data" / "aal116_lobes.tsv"
    grouping = {}
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh, delimiter="\t")):
            if not rec or rec[0].startswith("#"):
                continue
            if i == 0 and not rec[0].strip().lstrip("-").isdigit():
                continue
            if len(rec) < 2:
                raise ValueError(f"{path}: line {i + 1} needs roi_index and network")
            r = int(rec[0])
            if r in grouping:
                raise ValueError(f"{path}: ROI {r} listed twice")
            grouping[r] = rec[1].strip()
    return grouping
