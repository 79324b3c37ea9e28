"""Synthetic skull-stripped cohorts with planted group differences.

Each subject volume is::

    gain_s * (base_r + u_{s,r} + e_v)        inside ROI r of an ellipsoidal brain

with ``u_{s,r} ~ N(0, roi_noise_sd)`` (subject-level ROI offset) and voxel
noise ``e_v ~ N(0, voxel_noise_sd)``. For ADHD subjects the planted ROIs get
``u += mean_shift * voxel_noise_sd`` and voxel noise scaled by ``iqr_factor``.
Background is exactly zero; brain voxels are kept strictly positive.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nifti import AtlasParcellation, VolumeGrid, make_header, save_nifti, write_roi_table

# Bilateral anterior cingulum, bilateral caudate, vermis 9 and 10 (AAL order).
DEFAULT_PLANTED = (30, 31, 70, 71, 114, 115)


@dataclass(frozen=True)
class CohortSpec:
    n_per_class: int = 40
    shape: tuple = (48, 48, 48)
    voxel_size: float = 2.0
    n_rois: int = 116
    planted_rois: tuple = DEFAULT_PLANTED
    mean_shift: float = 1.5
    iqr_factor: float = 1.5
    roi_noise_sd: float = 6.0
    voxel_noise_sd: float = 6.0
    base_range: tuple = (70.0, 130.0)
    gain_sd: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "planted_rois", tuple(sorted(int(r) for r in self.planted_rois)))
        object.__setattr__(self, "base_range", tuple(float(v) for v in self.base_range))
        if len(self.shape) != 3 or min(self.shape) < 32:
            raise ValueError("grid must be 3-D and at least 32 voxels per axis")
        if any(not 0 <= r < self.n_rois for r in self.planted_rois):
            raise ValueError("planted ROI index out of range")
        if len(set(self.planted_rois)) != len(self.planted_rois):
            raise ValueError("planted ROIs must be distinct")
        for name in ("mean_shift", "iqr_factor", "roi_noise_sd", "voxel_noise_sd", "gain_sd"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.iqr_factor <= 0 or self.voxel_noise_sd < 0 or self.roi_noise_sd < 0:
            raise ValueError("noise levels must be non-negative and iqr_factor positive")
        if self.n_per_class < 1:
            raise ValueError("need at least one subject per class")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def ellipsoid_mask(shape, fill=0.46):
    centre = (np.array(shape) - 1) / 2.0
    radii = fill * np.array(shape)
    grid = np.indices(shape, dtype=np.float64)
    r2 = sum(((grid[i] - centre[i]) / radii[i]) ** 2 for i in range(3))
    return r2 <= 1.0


def block_atlas(shape, n_rois, min_fill=0.25):
    """Label ``n_rois`` axis-aligned blocks inside an ellipsoidal brain.

    Returns (labels, brain mask). Labels run 1..n_rois in raster order of the
    blocks; brain voxels in unused blocks keep label 0.
    """
    brain = ellipsoid_mask(shape)
    for nb in range(3, max(shape) // 2):
        edges = [np.array_split(np.arange(s), nb) for s in shape]
        blocks = []
        for ix in edges[0]:
            for iy in edges[1]:
                for iz in edges[2]:
                    sl = (slice(ix[0], ix[-1] + 1), slice(iy[0], iy[-1] + 1), slice(iz[0], iz[-1] + 1))
                    count = int(brain[sl].sum())
                    if count >= max(8, min_fill * brain[sl].size):
                        blocks.append((count, len(blocks), sl))
                    else:
                        blocks.append((0, len(blocks), None))
        usable = [b for b in blocks if b[2] is not None]
        if len(usable) >= n_rois:
            chosen = sorted(usable, key=lambda b: (-b[0], b[1]))[:n_rois]
            chosen.sort(key=lambda b: b[1])
            labels = np.zeros(shape, dtype=np.int64)
            for lab, (_, _, sl) in enumerate(chosen, start=1):
                labels[sl] = np.where(brain[sl], lab, 0)
            return labels, brain
    raise ValueError(f"cannot tile {n_rois} non-empty ROIs into a {shape} grid")


def aal_roi_table(n_rois=116):
    from importlib.resources import files

    from .nifti import read_roi_table

    names = [name for _, name in read_roi_table(files("scnfusion") / "data" / "aal116.tsv")]
    if n_rois <= len(names):
        names = names[:n_rois]
    else:
        names = names + [f"ROI_{i:03d}" for i in range(len(names), n_rois)]
    return [(i + 1, n) for i, n in enumerate(names)]


def simulate_subject(spec, labels, brain, base, adhd, rng):
    gain = 1.0 + spec.gain_sd * rng.standard_normal()
    u = spec.roi_noise_sd * rng.standard_normal(spec.n_rois)
    sd = np.full(spec.n_rois, spec.voxel_noise_sd)
    if adhd:
        planted = list(spec.planted_rois)
        u[planted] += spec.mean_shift * spec.voxel_noise_sd
        sd[planted] *= spec.iqr_factor
    lab = labels[brain]
    mid = 0.5 * (spec.base_range[0] + spec.base_range[1])
    roi = lab - 1
    labelled = lab > 0
    level = np.full(lab.shape, mid)
    level[labelled] = base[roi[labelled]] + u[roi[labelled]]
    noise_sd = np.full(lab.shape, spec.voxel_noise_sd)
    noise_sd[labelled] = sd[roi[labelled]]
    values = gain * (level + noise_sd * rng.standard_normal(lab.shape))
    vol = np.zeros(spec.shape, dtype=np.float32)
    vol[brain] = np.maximum(values, 1.0)
    return vol


def generate_cohort(spec, out_dir=None):
    """Simulate the cohort; writes files when ``out_dir`` is given.

    Returns a dict with ``volumes`` (list of float32 arrays), ``labels``,
    ``subject_ids``, ``atlas`` and ``ground_truth``.
    """
    labels, brain = block_atlas(spec.shape, spec.n_rois)
    rng = np.random.default_rng(spec.seed)
    base = rng.uniform(spec.base_range[0], spec.base_range[1], size=spec.n_rois)
    affine = np.diag([spec.voxel_size] * 3 + [1.0])
    affine[:3, 3] = -spec.voxel_size * (np.array(spec.shape) - 1) / 2.0
    n = spec.n_per_class
    classes = [0] * n + [1] * n
    subject_ids = [f"sub-{i + 1:04d}" for i in range(2 * n)]
    # one independent stream per subject keeps subjects reproducible on their own
    streams = np.random.SeedSequence([spec.seed, 1]).spawn(2 * n)
    volumes = [
        simulate_subject(spec, labels, brain, base, c == 1, np.random.default_rng(s))
        for c, s in zip(classes, streams)
    ]
    roi_table = aal_roi_table(spec.n_rois)
    atlas = AtlasParcellation(labels, affine, roi_table)
    truth = {
        "spec": spec.to_dict(),
        "planted_rois": list(spec.planted_rois),
        "planted_names": [roi_table[r][1] for r in spec.planted_rois],
        "mean_shift_sd": spec.mean_shift,
        "iqr_factor": spec.iqr_factor,
        "roi_base_intensity": [float(b) for b in base],
        "class_labels": {"HC": 0, "ADHD": 1},
    }
    if out_dir is not None:
        write_cohort(out_dir, subject_ids, classes, volumes, atlas, truth)
    return {
        "subject_ids": subject_ids,
        "labels": np.array(classes),
        "volumes": volumes,
        "affine": affine,
        "atlas": atlas,
        "ground_truth": truth,
    }


def write_cohort(out_dir, subject_ids, classes, volumes, atlas, truth):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sid, vol in zip(subject_ids, volumes):
        save_nifti(out / f"{sid}.nii.gz", make_header(vol.shape, atlas.affine), VolumeGrid(vol, atlas.affine))
    save_nifti(
        out / "atlas.nii.gz",
        make_header(atlas.labels.shape, atlas.affine, datatype="int16"),
        VolumeGrid(atlas.labels, atlas.affine),
    )
    write_roi_table(out / "atlas_rois.tsv", atlas.roi_table)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label"])
        for sid, c in zip(subject_ids, classes):
            w.writerow([sid, c])
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
