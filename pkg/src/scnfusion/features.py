"""ROI-wise mean/IQR and global statistics, plus the features CSV contract.

Quantiles use linear interpolation between order statistics at
``h = (n - 1) p`` (numpy's default ``linear`` method).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

QUANTILE_METHOD = "linear"
N_GLOBAL = 3


@dataclass
class SubjectFeatures:
    subject_id: str
    label: int
    roi_means: np.ndarray
    roi_iqrs: np.ndarray
    global_stats: np.ndarray  # mean, std (population), median over the brain mask
    empty_roi_flags: np.ndarray = field(default=None)

    def __post_init__(self):
        self.roi_means = np.asarray(self.roi_means, dtype=np.float64)
        self.roi_iqrs = np.asarray(self.roi_iqrs, dtype=np.float64)
        self.global_stats = np.asarray(self.global_stats, dtype=np.float64)
        if self.empty_roi_flags is None:
            self.empty_roi_flags = np.zeros(self.roi_means.shape, dtype=bool)
        self.empty_roi_flags = np.asarray(self.empty_roi_flags, dtype=bool)


def _roi_values(volume, mask, parcel, r):
    return volume.data[(parcel.labels == parcel.roi_table[r][0]) & mask]


def roi_mean(volume, mask, parcel, r):
    """Mean over voxels of ROI ``r`` inside ``mask``; returns (value, empty_flag)."""
    if not 0 <= r < parcel.n_rois:
        raise IndexError(f"ROI index {r} out of range")
    v = _roi_values(volume, mask, parcel, r)
    if v.size == 0:
        return 0.0, True
    return float(v.mean()), False


def iqr(values):
    q25, q75 = np.quantile(values, [0.25, 0.75], method=QUANTILE_METHOD)
    return float(q75 - q25)


def roi_iqr(volume, mask, parcel, r):
    """Q75 - Q25 over voxels of ROI ``r`` inside ``mask``; 0 and flagged below 2 voxels."""
    if not 0 <= r < parcel.n_rois:
        raise IndexError(f"ROI index {r} out of range")
    v = _roi_values(volume, mask, parcel, r)
    if v.size < 2:
        return 0.0, True
    return iqr(v), False


def global_stats(volume, mask):
    v = volume.data[mask]
    if v.size == 0:
        raise ValueError("global statistics need a non-empty mask")
    return np.array([v.mean(), v.std(), np.median(v)])


def extract_features(subject_id, label, volume, parcel):
    """All ROI statistics for one normalized volume in a single pass over labels."""
    mask = volume.mask
    if parcel.labels.shape != volume.shape:
        raise ValueError(f"atlas grid {parcel.labels.shape} does not match volume {volume.shape}")
    lab = parcel.labels[mask]
    vals = volume.data[mask]
    order = np.argsort(lab, kind="stable")
    lab, vals = lab[order], vals[order]
    ids = np.array(parcel.label_ids)
    starts = np.searchsorted(lab, ids, side="left")
    stops = np.searchsorted(lab, ids, side="right")
    R = len(ids)
    means = np.zeros(R)
    iqrs = np.zeros(R)
    flags = np.zeros(R, dtype=bool)
    for r in range(R):
        v = vals[starts[r] : stops[r]]
        if v.size == 0:
            flags[r] = True
            continue
        means[r] = v.mean()
        if v.size < 2:
            flags[r] = True
        else:
            iqrs[r] = iqr(v)
    return SubjectFeatures(subject_id, int(label), means, iqrs, global_stats(volume, mask), flags)


def auxiliary_vector(features):
    """``[roi IQRs || global mean, std, median]``."""
    return np.concatenate([features.roi_iqrs, features.global_stats])


@dataclass
class FeatureTable:
    """Stacked features for N subjects in a fixed subject order."""

    subject_ids: list
    labels: np.ndarray
    means: np.ndarray  # (N, R)
    iqrs: np.ndarray  # (N, R)
    globals_: np.ndarray  # (N, 3)
    flags: np.ndarray  # (N, R) bool

    @classmethod
    def from_subjects(cls, subjects):
        subjects = list(subjects)
        return cls(
            [s.subject_id for s in subjects],
            np.array([s.label for s in subjects], dtype=np.int64),
            np.stack([s.roi_means for s in subjects]),
            np.stack([s.roi_iqrs for s in subjects]),
            np.stack([s.global_stats for s in subjects]),
            np.stack([s.empty_roi_flags for s in subjects]),
        )

    def __len__(self):
        return len(self.subject_ids)

    @property
    def n_rois(self):
        return self.means.shape[1]

    def aux(self):
        return np.concatenate([self.iqrs, self.globals_], axis=1)

    def subset(self, idx):
        idx = np.asarray(idx)
        return FeatureTable(
            [self.subject_ids[i] for i in idx],
            self.labels[idx],
            self.means[idx],
            self.iqrs[idx],
            self.globals_[idx],
            self.flags[idx],
        )

    def subject(self, i):
        return SubjectFeatures(
            self.subject_ids[i], int(self.labels[i]), self.means[i], self.iqrs[i], self.globals_[i], self.flags[i]
        )


def csv_header(n_rois):
    return (
        ["subject_id", "label"]
        + [f"mu_{r:03d}" for r in range(n_rois)]
        + [f"iqr_{r:03d}" for r in range(n_rois)]
        + ["g_mean", "g_std", "g_median", "flags"]
    )


def write_features_csv(path, table, comment=None):
    """One row per subject; ``flags`` lists empty-ROI indices separated by ``;``.

    ``comment`` lines are written first, prefixed with ``#``.
    """
    buf = io.StringIO()
    for line in (comment or "").splitlines():
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(table.n_rois))
    for i, sid in enumerate(table.subject_ids):
        flags = ";".join(str(r) for r in np.flatnonzero(table.flags[i]))
        nums = [repr(float(v)) for v in np.concatenate([table.means[i], table.iqrs[i], table.globals_[i]])]
        w.writerow([sid, int(table.labels[i])] + nums + [flags])
    data = buf.getvalue().encode()
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_features_csv(path):
    """Returns (table, comment lines)."""
    comments = []
    rows = []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or header[:2] != ["subject_id", "label"] or header[-1] != "flags":
        raise ValueError(f"{path}: not a features CSV")
    n_rois = (len(header) - 6) // 2
    if header != csv_header(n_rois):
        raise ValueError(f"{path}: unexpected column layout")
    for rec in reader:
        if not rec:
            continue
        if len(rec) != len(header):
            raise ValueError(f"{path}: row for {rec[0]!r} has {len(rec)} fields")
        rows.append(rec)
    if not rows:
        raise ValueError(f"{path}: no subjects")
    nums = np.array([[float(v) for v in rec[2:-1]] for rec in rows])
    if not np.all(np.isfinite(nums)):
        raise ValueError(f"{path}: non-finite feature values")
    flags = np.zeros((len(rows), n_rois), dtype=bool)
    for i, rec in enumerate(rows):
        if rec[-1]:
            flags[i, [int(r) for r in rec[-1].split(";")]] = True
    table = FeatureTable(
        [rec[0] for rec in rows],
        np.array([int(rec[1]) for rec in rows], dtype=np.int64),
        nums[:, :n_rois],
        nums[:, n_rois : 2 * n_rois],
        nums[:, 2 * n_rois :],
        flags,
    )
    return table, comments
