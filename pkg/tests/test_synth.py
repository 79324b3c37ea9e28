import json

import numpy as np
import pytest

from scnfusion.features import FeatureTable, extract_features
from scnfusion.interpret import cohens_d
from scnfusion.nifti import VolumeGrid, load_atlas, load_nifti
from scnfusion.preprocess import normalize_robust
from scnfusion.synth import CohortSpec, aal_roi_table, block_atlas, generate_cohort


def _features(cohort):
    return FeatureTable.from_subjects(
        extract_features(s, l, normalize_robust(VolumeGrid(v, cohort["affine"])), cohort["atlas"])
        for s, l, v in zip(cohort["subject_ids"], cohort["labels"], cohort["volumes"])
    )


def test_block_atlas_has_116_nonempty_rois():
    labels, brain = block_atlas((32, 32, 32), 116)
    counts = np.bincount(labels.ravel(), minlength=117)
    assert np.all(counts[1:] > 0)
    assert not np.any(labels[~brain])


def test_infeasible_tiling():
    with pytest.raises(ValueError):
        CohortSpec(shape=(16, 16, 16))
    with pytest.raises(ValueError):
        block_atlas((32, 32, 32), 5000)


def test_spec_validation():
    with pytest.raises(ValueError):
        CohortSpec(planted_rois=(200,))
    with pytest.raises(ValueError):
        CohortSpec(mean_shift=float("nan"))
    with pytest.raises(ValueError):
        CohortSpec(planted_rois=(1, 1))
    spec = CohortSpec(shape=[40, 40, 40], planted_rois=[5, 2])
    assert CohortSpec.from_dict(spec.to_dict()) == spec
    assert spec.planted_rois == (2, 5)


def test_aal_names():
    table = aal_roi_table()
    assert len(table) == 116
    assert table[0] == (1, "Precentral_L") and table[-1] == (116, "Vermis_10")


def test_volumes_positive_inside_zero_outside():
    c = generate_cohort(CohortSpec(n_per_class=2, shape=(32, 32, 32)))
    brain = c["atlas"].labels > 0
    for v in c["volumes"]:
        assert np.all(v[v != 0] >= 1.0)
        assert np.all(v[brain] > 0)
    assert c["labels"].tolist() == [0, 0, 1, 1]


def test_files_parse_and_regenerate_identically(tmp_path):
    spec = CohortSpec(n_per_class=2, shape=(32, 32, 32), seed=4)
    c = generate_cohort(spec, tmp_path / "a")
    generate_cohort(spec, tmp_path / "b")
    for name in ["sub-0001.nii.gz", "sub-0004.nii.gz", "atlas.nii.gz", "labels.csv", "ground_truth.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    _, vol = load_nifti(tmp_path / "a" / "sub-0003.nii.gz")
    np.testing.assert_array_equal(vol.data, c["volumes"][2].astype(np.float64))
    atlas = load_atlas(tmp_path / "a" / "atlas.nii.gz", tmp_path / "a" / "atlas_rois.tsv", expected=116)
    np.testing.assert_array_equal(atlas.labels, c["atlas"].labels)
    truth = json.loads((tmp_path / "a" / "ground_truth.json").read_text())
    assert truth["planted_rois"] == list(spec.planted_rois)
    assert truth["planted_names"][0] == "Cingulum_Ant_L"


def test_null_effect_classes_exchangeable():
    c = generate_cohort(CohortSpec(n_per_class=20, shape=(32, 32, 32), mean_shift=0.0, iqr_factor=1.0, seed=2))
    T = _features(c)
    d = cohens_d(T.means[T.labels == 0], T.means[T.labels == 1])
    # with 20 per class the null |d| spread is about 0.32; nothing should look like a planted effect
    assert np.abs(d).max() < 1.2


@pytest.mark.slow
def test_mean_shift_two_sd_recovered_on_exactly_planted_rois():
    spec = CohortSpec(mean_shift=2.0, iqr_factor=1.0)
    c = generate_cohort(spec)
    T = _features(c)
    d = cohens_d(T.means[T.labels == 0], T.means[T.labels == 1])
    planted = list(spec.planted_rois)
    assert np.all(d[planted] > 1.2)
    assert np.all(np.abs(np.delete(d, planted)) <= 1.2)


@pytest.mark.slow
def test_effect_direction_survives_pipeline():
    spec = CohortSpec(n_per_class=20, mean_shift=1.5, iqr_factor=1.5)
    T = _features(generate_cohort(spec))
    planted = list(spec.planted_rois)
    hc, adhd = T.labels == 0, T.labels == 1
    assert np.all(T.means[adhd][:, planted].mean(0) > T.means[hc][:, planted].mean(0))
    assert np.all(T.iqrs[adhd][:, planted].mean(0) > T.iqrs[hc][:, planted].mean(0))
