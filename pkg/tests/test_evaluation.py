import numpy as np
import pytest
from oracles import auc_pairs, classification_metrics

from scnfusion.evaluation import (
    TrainConfig,
    _batches,
    _eval_loss,
    aggregate_cv,
    audit_fold,
    auc_midrank,
    compute_metrics,
    ensemble_vote,
    inner_split,
    make_fold_plan,
    prepare_fold,
    restore_state,
    roc_points,
    run_cv,
    train_one_seed,
)
from scnfusion.features import FeatureTable
from scnfusion.model import DuScnFusionNet, ModelConfig

R = 12
SMALL = ModelConfig(n_rois=R, n_aux=R + 3, conv_channels=(2, 2, 3), scn_fc=(4, 3), aux_fc=(4, 3), fusion_fc=(4,))


def small_table(n_per_class=8, shift=0.3, seed=0):
    rng = np.random.default_rng(seed)
    n = 2 * n_per_class
    labels = np.repeat([0, 1], n_per_class)
    means = rng.uniform(0.3, 0.7, (n, R))
    iqrs = rng.uniform(0.1, 0.3, (n, R))
    iqrs[labels == 1, :3] += shift
    glob = rng.uniform(0.3, 0.6, (n, 3))
    return FeatureTable([f"s{i:02d}" for i in range(n)], labels, means, iqrs, glob, np.zeros((n, R), bool))


# ------------------------------------------------------------------ plans


def test_fold_plan_for_cohort_of_116_hc_and_78_adhd():
    labels = np.array([0] * 116 + [1] * 78)
    plan = make_fold_plan([f"s{i}" for i in range(194)], labels, seed=3)
    for k in range(10):
        test = plan.test_idx(k)
        assert 19 <= len(test) <= 20
        assert 11 <= np.sum(labels[test] == 0) <= 12
        assert 7 <= np.sum(labels[test] == 1) <= 8
    assert sorted(np.concatenate([plan.test_idx(k) for k in range(10)]).tolist()) == list(range(194))


def test_fold_plan_balanced_twenty_and_determinism():
    labels = np.array([0, 1] * 10)
    ids = [f"s{i}" for i in range(20)]
    plan = make_fold_plan(ids, labels, seed=1)
    for k in range(10):
        assert sorted(labels[plan.test_idx(k)].tolist()) == [0, 1]
    again = make_fold_plan(ids, labels, seed=1)
    assert np.array_equal(plan.fold_of, again.fold_of)
    other = make_fold_plan(ids, labels, seed=2)
    assert not np.array_equal(plan.fold_of, other.fold_of)


def test_fold_plan_class_too_small():
    with pytest.raises(ValueError, match="fewer than 10 folds"):
        make_fold_plan([f"s{i}" for i in range(15)], np.array([0] * 9 + [1] * 6), seed=0)


def test_inner_split_stratified_and_seeded():
    labels = np.array([0] * 40 + [1] * 30)
    train = np.arange(70)
    tr, va = inner_split(labels, train, fold=2, seed=5)
    assert np.sum(labels[va] == 0) == 4 and np.sum(labels[va] == 1) == 3
    assert set(tr) | set(va) == set(train) and not set(tr) & set(va)
    tr2, va2 = inner_split(labels, train, fold=2, seed=5)
    assert np.array_equal(va, va2)
    _, va3 = inner_split(labels, train, fold=3, seed=5)
    assert not np.array_equal(va, va3)


def test_batches_merge_trailing_singleton():
    assert [len(b) for b in _batches(np.arange(9), 4)] == [4, 5]
    assert [len(b) for b in _batches(np.arange(10), 4)] == [4, 4, 2]
    assert [len(b) for b in _batches(np.arange(8), 4)] == [4, 4]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(n_seeds=4)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    assert TrainConfig(ensemble=False).seeds_per_fold == 1


# ---------------------------------------------------------------- metrics


def test_ensemble_vote_examples():
    labels, probs = ensemble_vote([[1], [1], [0], [0], [1]], [[0.6], [0.7], [0.4], [0.3], [0.9]])
    assert labels.tolist() == [1]
    assert probs[0] == pytest.approx(0.58)
    labels, _ = ensemble_vote([[0, 1]] * 5, [[0.1, 0.9]] * 5)
    assert labels.tolist() == [0, 1]
    with pytest.raises(ValueError):
        ensemble_vote([[1]] * 4, [[0.5]] * 4)


def test_metrics_hand_example():
    m = compute_metrics([1, 1, 0, 0], [1, 0, 0, 0], [0.9, 0.4, 0.2, 0.1])
    assert m["confusion"] == {"tp": 1, "fn": 1, "tn": 2, "fp": 0}
    assert m["balanced_accuracy"] == 0.75
    assert m["auc"] == 1.0


def test_perfect_predictor_and_tied_scores():
    m = compute_metrics([0, 1, 0, 1], [0, 1, 0, 1], [0.1, 0.9, 0.2, 0.8])
    for key in ("balanced_accuracy", "precision", "recall", "f1", "precision_macro", "f1_macro", "auc"):
        assert m[key] == 1.0
    assert auc_midrank([0, 1, 0, 1], [0.5] * 4) == 0.5


def test_single_class_fold_is_undefined():
    m = compute_metrics([1, 1], [1, 0], [0.7, 0.2])
    assert m["defined"] is False and "balanced_accuracy" not in m


def test_metrics_match_oracle_on_random_sets(rng):
    for _ in range(50):
        n = int(rng.integers(4, 30))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = np.round(rng.uniform(size=n), 1)  # coarse grid forces ties
        p = (rng.uniform(size=n) > 0.5).astype(int)
        m = compute_metrics(y, p, s)
        ref = classification_metrics(y.tolist(), p.tolist())
        for key in ("balanced_accuracy", "precision", "recall", "f1", "precision_macro", "recall_macro", "f1_macro"):
            assert m[key] == ref[key]
        assert m["auc"] == pytest.approx(auc_pairs(y.tolist(), s.tolist()), abs=1e-12)


def test_macro_recall_is_balanced_accuracy(rng):
    y = rng.integers(0, 2, 40)
    p = rng.integers(0, 2, 40)
    m = compute_metrics(y, p, rng.uniform(size=40))
    assert m["recall_macro"] == pytest.approx(m["balanced_accuracy"], abs=1e-15)


def test_aggregate_examples():
    ok = lambda v: {"defined": True, **{k: v for k in ("balanced_accuracy", "precision", "recall", "f1",
                    "precision_macro", "recall_macro", "f1_macro", "auc")}, "confusion": {"tp": 1, "fp": 2, "tn": 3, "fn": 4}}  # noqa: E731
    s = aggregate_cv([ok(0.8)] * 10)
    assert s["metrics"]["balanced_accuracy"] == {"mean": pytest.approx(0.8), "std": pytest.approx(0.0, abs=1e-15)}
    assert s["pooled_confusion"] == {"tp": 10, "fp": 20, "tn": 30, "fn": 40}
    s = aggregate_cv([ok(0.7), ok(0.9)])
    assert s["metrics"]["auc"]["mean"] == pytest.approx(0.8)
    assert s["metrics"]["auc"]["std"] == pytest.approx(0.1414, abs=1e-4)
    undefined = {"defined": False, "confusion": {"tp": 1, "fp": 0, "tn": 0, "fn": 0}}
    s = aggregate_cv([ok(0.7), ok(0.9), undefined])
    assert s["n_valid_folds"] == 2 and s["pooled_confusion"]["tp"] == 3
    with pytest.raises(ValueError):
        aggregate_cv([ok(0.7), undefined])


def test_roc_points_monotone_and_complete():
    pts = roc_points([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8])
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    assert pts == [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]


# ------------------------------------------------------- folds and training


def test_group_matrices_come_from_training_subjects_only():
    table = small_table()
    cfg = TrainConfig(n_folds=2, n_seeds=1)
    plan = make_fold_plan(table.subject_ids, table.labels, 0, 2)
    ctx0 = prepare_fold(table, plan, 0, cfg)
    ctx1 = prepare_fold(table, plan, 1, cfg)
    assert audit_fold(table, plan, 0, ctx0, cfg) == []
    # the same test subject gets a different tensor when the training fold changes
    s = plan.test_idx(0)[0]
    assert not np.allclose(ctx0.scn[s], ctx1.scn[s])
    # planting a test subject in the fitted statistics is detected
    ctx0.fit_ids = ctx0.fit_ids + [table.subject_ids[s]]
    assert any("test subjects" in p for p in audit_fold(table, plan, 0, ctx0, cfg))
    ctx1.group_mu = ctx1.group_mu + 1e-9
    assert any("intensity group matrix" in p for p in audit_fold(table, plan, 1, ctx1, cfg))


def test_class_weights_inverse_frequency():
    table = small_table()
    keep = np.r_[0:8, 8:12]  # 8 HC, 4 ADHD
    table = table.subset(keep)
    plan = make_fold_plan(table.subject_ids, table.labels, 0, 2)
    ctx = prepare_fold(table, plan, 0, TrainConfig(n_folds=2, n_seeds=1))
    train_labels = table.labels[plan.train_idx(0)]
    n = len(train_labels)
    np.testing.assert_allclose(ctx.class_weights, [n / (2 * np.sum(train_labels == c)) for c in (0, 1)])


def test_early_stopping_restores_best_weights():
    table = small_table(n_per_class=10)
    cfg = TrainConfig(n_folds=2, n_seeds=1, lr=5e-2, max_epochs=40, patience=3, val_fraction=0.3)
    plan = make_fold_plan(table.subject_ids, table.labels, 0, 2)
    res = train_one_seed(table, plan, 0, seed=0, model_cfg=SMALL, cfg=cfg)
    assert res.epochs_run < cfg.max_epochs, "expected the high learning rate to trigger early stopping"
    assert res.epochs_run - res.best_epoch == cfg.patience
    assert res.val_loss[res.best_epoch - 1] == min(res.val_loss)
    model = DuScnFusionNet(SMALL, seed=0)
    restore_state(model, res.state)
    ctx = prepare_fold(table, plan, 0, cfg)
    _, val = inner_split(table.labels, plan.train_idx(0), 0, 0, cfg.val_fraction)
    assert _eval_loss(model, ctx, val, table.labels) == res.val_loss[res.best_epoch - 1]


def test_training_is_deterministic():
    table = small_table()
    cfg = TrainConfig(n_folds=2, n_seeds=1, max_epochs=3)
    plan = make_fold_plan(table.subject_ids, table.labels, 0, 2)
    a = train_one_seed(table, plan, 1, 4, SMALL, cfg)
    b = train_one_seed(table, plan, 1, 4, SMALL, cfg)
    assert np.array_equal(a.test_probs, b.test_probs)
    assert a.val_loss == b.val_loss


def test_run_cv_serial_equals_parallel():
    table = small_table(n_per_class=6)
    cfg = TrainConfig(n_folds=2, n_seeds=3, max_epochs=2)
    a = run_cv(table, SMALL, cfg, master_seed=7, jobs=1)
    b = run_cv(table, SMALL, cfg, master_seed=7, jobs=2)
    for ra, rb in zip(a.reports, b.reports):
        assert np.array_equal(ra.seed_probs, rb.seed_probs)
        assert ra.seeds == [7, 8, 9]
    assert a.summary == b.summary
    assert a.summary["audit_failures"] == []


def test_no_ensemble_runs_one_seed_and_no_aux_trains():
    table = small_table(n_per_class=6)
    res = run_cv(table, SMALL, TrainConfig(n_folds=2, n_seeds=5, max_epochs=2, ensemble=False), master_seed=0)
    assert all(r.seed_probs.shape[0] == 1 for r in res.reports)
    res = run_cv(table, SMALL, TrainConfig(n_folds=2, n_seeds=1, max_epochs=2, use_aux=False), master_seed=0)
    assert len(res.seed_results) == 2
