"""Stratified cross-validation, early-stopped training, seed ensembles, metrics."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .model import DuScnFusionNet, ModelConfig
from .nn.layers import softmax, softmax_cross_entropy
from .nn.optim import Adam
from .scn import build_scn_batch, group_covariance

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 50
    patience: int = 15
    batch_size: int = 4
    n_seeds: int = 5
    n_folds: int = 10
    val_fraction: float = 0.1
    alpha: float = 0.55
    correlation: str = "pearson"
    class_weighting: bool = True
    standardize_aux: bool = True
    use_aux: bool = True
    ensemble: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.max_epochs < 1 or self.patience < 1 or self.batch_size < 2:
            raise ValueError("lr, epochs and patience must be positive; batch size at least 2")
        if self.n_seeds < 1 or self.n_seeds % 2 == 0:
            raise ValueError("n_seeds must be odd so majority votes cannot tie")
        if self.n_folds < 2:
            raise ValueError("need at least two folds")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.correlation not in ("pearson", "spearman"):
            raise ValueError("correlation must be pearson or spearman")

    @property
    def seeds_per_fold(self):
        return self.n_seeds if self.ensemble else 1

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- fold plans


@dataclass
class FoldPlan:
    subject_ids: list
    labels: np.ndarray
    fold_of: np.ndarray
    n_folds: int
    seed: int

    def test_idx(self, k):
        return np.flatnonzero(self.fold_of == k)

    def train_idx(self, k):
        return np.flatnonzero(self.fold_of != k)

    def to_dict(self):
        return {
            "seed": self.seed,
            "n_folds": self.n_folds,
            "folds": {sid: int(f) for sid, f in zip(self.subject_ids, self.fold_of)},
        }


def make_fold_plan(subject_ids, labels, seed, n_folds=10):
    """Stratified assignment: each class is shuffled, classes are concatenated
    and dealt round-robin, so fold sizes and per-class counts differ by at most
    one."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(subject_ids) != len(labels):
        raise ValueError("one label per subject is required")
    rng = np.random.default_rng(seed)
    order = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < n_folds:
            raise ValueError(
                f"class {c} has {len(members)} subjects, fewer than {n_folds} folds; "
                "lower train.n_folds in the config"
            )
        order.extend(rng.permutation(members).tolist())
    fold_of = np.empty(len(labels), dtype=np.int64)
    fold_of[order] = np.arange(len(order)) % n_folds
    return FoldPlan(list(subject_ids), labels, fold_of, n_folds, seed)


def inner_split(labels, train_idx, fold, seed, fraction=0.1):
    """Stratified (train, validation) split of a fold's training portion."""
    rng = np.random.default_rng([seed, fold])
    labels = np.asarray(labels)
    val = []
    for c in np.unique(labels[train_idx]):
        members = train_idx[labels[train_idx] == c]
        n_val = max(1, int(round(fraction * len(members))))
        val.extend(rng.permutation(members)[:n_val].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(train_idx, val)
    return train, val


# ------------------------------------------------------------- fold context


@dataclass
class FoldContext:
    """Statistics fitted on one fold's training portion and the model inputs."""

    fold: int
    fit_ids: list
    group_mu: np.ndarray
    group_iqr: np.ndarray
    aux_mean: np.ndarray
    aux_scale: np.ndarray
    class_weights: np.ndarray | None
    scn: np.ndarray  # (N, 2, R, R) for every subject in the table
    aux: np.ndarray  # (N, n_aux), standardized when configured


def prepare_fold(table, plan, k, cfg):
    train = plan.train_idx(k)
    fit = table.subset(train)
    group_mu = group_covariance(fit.means, cfg.correlation)
    group_iqr = group_covariance(fit.iqrs, cfg.correlation)
    aux = table.aux()
    if cfg.standardize_aux:
        with np.errstate(over="ignore", invalid="ignore"):
            mean = aux[train].mean(axis=0)
            sd = aux[train].std(axis=0)
        scale = np.where(sd > 0, sd, 1.0)
    else:
        mean = np.zeros(aux.shape[1])
        scale = np.ones(aux.shape[1])
    weights = None
    if cfg.class_weighting:
        counts = np.bincount(fit.labels, minlength=2).astype(np.float64)
        weights = np.where(counts > 0, len(train) / (2.0 * np.maximum(counts, 1)), 0.0)
    scn = build_scn_batch(table.means, table.iqrs, group_mu, group_iqr, cfg.alpha)
    with np.errstate(over="ignore", invalid="ignore"):
        aux_std = (aux - mean) / scale
    if not (np.all(np.isfinite(scn)) and np.all(np.isfinite(aux_std)) and np.all(np.isfinite(scale))):
        raise NumericError(f"non-finite network inputs in fold {k} (feature values too large?)")
    return FoldContext(k, fit.subject_ids, group_mu, group_iqr, mean, scale, weights, scn, aux_std)


def audit_fold(table, plan, k, ctx, cfg):
    """Return a list of leakage problems for fold ``k`` (empty when clean)."""
    problems = []
    test_ids = {table.subject_ids[i] for i in plan.test_idx(k)}
    leaked = test_ids & set(ctx.fit_ids)
    if leaked:
        problems.append(f"fold {k}: test subjects used in fitted statistics: {sorted(leaked)[:5]}")
    train = plan.train_idx(k)
    if set(ctx.fit_ids) != {table.subject_ids[i] for i in train}:
        problems.append(f"fold {k}: fitted statistics do not use exactly the training portion")
    ref = table.subset(train)
    if not np.array_equal(group_covariance(ref.means, cfg.correlation), ctx.group_mu):
        problems.append(f"fold {k}: intensity group matrix is not reproducible from training subjects")
    if not np.array_equal(group_covariance(ref.iqrs, cfg.correlation), ctx.group_iqr):
        problems.append(f"fold {k}: heterogeneity group matrix is not reproducible from training subjects")
    if cfg.standardize_aux and not np.array_equal(table.aux()[train].mean(axis=0), ctx.aux_mean):
        problems.append(f"fold {k}: auxiliary scaler is not fitted on training subjects")
    if ctx.class_weights is not None:
        counts = np.bincount(ref.labels, minlength=2).astype(np.float64)
        expected = np.where(counts > 0, len(train) / (2.0 * np.maximum(counts, 1)), 0.0)
        if not np.array_equal(expected, ctx.class_weights):
            problems.append(f"fold {k}: class weights are not fitted on training subjects")
    return problems


# ------------------------------------------------------------------ training


@dataclass
class SeedResult:
    fold: int
    seed: int
    test_idx: np.ndarray
    test_probs: np.ndarray  # P(ADHD) per test subject
    best_epoch: int
    epochs_run: int
    train_loss: list
    val_loss: list
    state: list  # parameter and buffer arrays of the restored best model


def _batches(order, size):
    """Consecutive batches; a trailing singleton joins the previous batch
    (training-mode batch norm needs at least two samples)."""
    bounds = list(range(0, len(order), size)) + [len(order)]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def snapshot_state(model):
    return [p.data.copy() for p in model.parameters()] + [b.copy() for _, b in model.named_buffers()]


def restore_state(model, state):
    targets = [p.data for p in model.parameters()] + [b for _, b in model.named_buffers()]
    for dst, src in zip(targets, state):
        dst[...] = src


def _eval_loss(model, ctx, idx, labels):
    model.eval()
    logits = model.forward(ctx.scn[idx], ctx.aux[idx])
    loss, _ = softmax_cross_entropy(logits, labels[idx], ctx.class_weights)
    return loss


def train_one_seed(table, plan, k, seed, model_cfg, cfg, ctx=None):
    """Train one ensemble member on fold ``k`` with early stopping on
    inner-validation loss; returns test-fold ADHD probabilities."""
    ctx = ctx if ctx is not None else prepare_fold(table, plan, k, cfg)
    labels = table.labels
    train, val = inner_split(labels, plan.train_idx(k), k, seed, cfg.val_fraction)
    test = plan.test_idx(k)
    model = DuScnFusionNet(model_cfg, seed=seed, use_aux=cfg.use_aux)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([seed, k, 1])
    best = (np.inf, 0, snapshot_state(model))
    train_hist, val_hist = [], []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        total = 0.0
        for batch in _batches(rng.permutation(train), cfg.batch_size):
            opt.zero_grad()
            logits = model.forward(ctx.scn[batch], ctx.aux[batch], rng)
            loss, grad = softmax_cross_entropy(logits, labels[batch], ctx.class_weights)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss (fold {k}, seed {seed}, epoch {epoch})")
            model.backward(grad, to_input=False)
            opt.step()
            total += loss * len(batch)
        train_hist.append(total / len(train))
        val_loss = _eval_loss(model, ctx, val, labels)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss (fold {k}, seed {seed}, epoch {epoch})")
        val_hist.append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, snapshot_state(model))
        elif epoch - best[1] >= cfg.patience:
            break
    restore_state(model, best[2])
    model.eval()
    probs = softmax(model.forward(ctx.scn[test], ctx.aux[test]))[:, 1]
    if not np.all(np.isfinite(probs)):
        raise NumericError(f"non-finite test probabilities (fold {k}, seed {seed})")
    return SeedResult(k, seed, test, probs, best[1], epoch, train_hist, val_hist, best[2])


def _train_task(args):
    table, plan, k, seed, model_cfg, cfg = args
    return train_one_seed(table, plan, k, seed, model_cfg, cfg)


# ------------------------------------------------------------------- metrics


def ensemble_vote(per_seed_predictions, per_seed_probs):
    """Majority label over seeds and the mean ADHD probability."""
    preds = np.atleast_2d(np.asarray(per_seed_predictions, dtype=np.int64))
    probs = np.atleast_2d(np.asarray(per_seed_probs, dtype=np.float64))
    n = preds.shape[0]
    if n % 2 == 0:
        raise ValueError("an even number of seeds can tie; use an odd count")
    labels = (2 * preds.sum(axis=0) > n).astype(np.int64)
    return labels, probs.mean(axis=0)


def confusion(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    return {
        "tp": int(np.sum((y_true == 1) & (y_pred == 1))),
        "fp": int(np.sum((y_true == 0) & (y_pred == 1))),
        "tn": int(np.sum((y_true == 0) & (y_pred == 0))),
        "fn": int(np.sum((y_true == 1) & (y_pred == 0))),
    }


def auc_midrank(y_true, scores):
    """ROC AUC as the Mann-Whitney statistic with midranks for ties."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    n1 = int(np.sum(y_true == 1))
    n0 = len(y_true) - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[y_true == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def _ratio(a, b):
    return Fraction(a, b) if b else Fraction(0)


def compute_metrics(y_true, y_pred, scores):
    """Balanced accuracy, precision/recall/F1 (support-weighted and macro), AUC.

    ADHD (1) is the positive class. Returns ``{"defined": False, ...}`` when
    only one class is present. The count-based metrics are evaluated in exact
    rational arithmetic and rounded once, so they do not depend on the order
    of floating-point operations.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    cm = confusion(y_true, y_pred)
    n1 = cm["tp"] + cm["fn"]
    n0 = cm["tn"] + cm["fp"]
    out = {"confusion": cm, "n": int(len(y_true))}
    if n1 == 0 or n0 == 0:
        out["defined"] = False
        return out
    tpr = Fraction(cm["tp"], n1)
    tnr = Fraction(cm["tn"], n0)
    prec = [_ratio(cm["tn"], cm["tn"] + cm["fn"]), _ratio(cm["tp"], cm["tp"] + cm["fp"])]
    rec = [tnr, tpr]
    f1 = [2 * p * r / (p + r) if p + r else Fraction(0) for p, r in zip(prec, rec)]
    w = [Fraction(n0, n0 + n1), Fraction(n1, n0 + n1)]
    exact = {
        "balanced_accuracy": (tpr + tnr) / 2,
        "precision": w[0] * prec[0] + w[1] * prec[1],
        "recall": w[0] * rec[0] + w[1] * rec[1],
        "f1": w[0] * f1[0] + w[1] * f1[1],
        "precision_macro": (prec[0] + prec[1]) / 2,
        "recall_macro": (rec[0] + rec[1]) / 2,
        "f1_macro": (f1[0] + f1[1]) / 2,
    }
    out.update(
        defined=True,
        **{k: float(v) for k, v in exact.items()},
        auc=auc_midrank(y_true, scores),
    )
    return out


METRIC_KEYS = (
    "balanced_accuracy",
    "precision",
    "recall",
    "f1",
    "precision_macro",
    "recall_macro",
    "f1_macro",
    "auc",
)


def roc_points(y_true, scores):
    """(FPR, TPR) pairs sweeping the threshold down through each distinct score."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    n1 = max(int(np.sum(y_true == 1)), 1)
    n0 = max(int(np.sum(y_true == 0)), 1)
    pts = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        pts.append((float(np.sum(pred & (y_true == 0)) / n0), float(np.sum(pred & (y_true == 1)) / n1)))
    return pts


def aggregate_cv(fold_metrics):
    """Mean and sample SD of each metric over folds with defined metrics,
    plus the pooled confusion matrix over all folds."""
    valid = [m for m in fold_metrics if m.get("defined")]
    if len(valid) < len(fold_metrics):
        log.warning("%d fold(s) contain a single class and are excluded", len(fold_metrics) - len(valid))
    if len(valid) < 2:
        raise ValueError("aggregation needs at least two folds with both classes")
    summary = {}
    for key in METRIC_KEYS:
        vals = np.array([m[key] for m in valid], dtype=np.float64)
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1))}
    pooled = {k: int(sum(m["confusion"][k] for m in fold_metrics)) for k in ("tp", "fp", "tn", "fn")}
    return {"metrics": summary, "pooled_confusion": pooled, "n_valid_folds": len(valid)}


# ----------------------------------------------------------------- CV driver


@dataclass
class FoldReport:
    fold: int
    test_ids: list
    test_labels: np.ndarray
    seeds: list
    seed_probs: np.ndarray  # (S, M)
    seed_preds: np.ndarray  # (S, M)
    ensemble_pred: np.ndarray
    ensemble_prob: np.ndarray
    metrics: dict
    seed_metrics: list
    best_epochs: list
    epochs_run: list
    audit: list = field(default_factory=list)


@dataclass
class CvResult:
    plan: FoldPlan
    reports: list
    summary: dict
    seed_results: dict  # (fold, seed) -> SeedResult


def run_cv(table, model_cfg=None, cfg=None, master_seed=0, jobs=1, on_result=None):
    """Full stratified CV with a seed ensemble per fold.

    Work items (fold, seed) are independent; with ``jobs > 1`` they run in a
    process pool and are reassembled in (fold, seed) order so the output does
    not depend on scheduling.
    """
    model_cfg = model_cfg or ModelConfig(n_rois=table.n_rois, n_aux=table.n_rois + 3)
    cfg = cfg or TrainConfig()
    plan = make_fold_plan(table.subject_ids, table.labels, master_seed, cfg.n_folds)
    seeds = [master_seed + i for i in range(cfg.seeds_per_fold)]
    tasks = [(table, plan, k, s, model_cfg, cfg) for k in range(cfg.n_folds) for s in seeds]
    results = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(_train_task, tasks):
                results[(res.fold, res.seed)] = res
                if on_result:
                    on_result(res)
    else:
        for task in tasks:
            res = _train_task(task)
            results[(res.fold, res.seed)] = res
            if on_result:
                on_result(res)

    reports = []
    for k in range(cfg.n_folds):
        ctx = prepare_fold(table, plan, k, cfg)
        test = plan.test_idx(k)
        y = table.labels[test]
        probs = np.stack([results[(k, s)].test_probs for s in seeds])
        preds = (probs > 0.5).astype(np.int64)
        ens_pred, ens_prob = ensemble_vote(preds, probs)
        reports.append(
            FoldReport(
                fold=k,
                test_ids=[table.subject_ids[i] for i in test],
                test_labels=y,
                seeds=seeds,
                seed_probs=probs,
                seed_preds=preds,
                ensemble_pred=ens_pred,
                ensemble_prob=ens_prob,
                metrics=compute_metrics(y, ens_pred, ens_prob),
                seed_metrics=[compute_metrics(y, preds[i], probs[i]) for i in range(len(seeds))],
                best_epochs=[results[(k, s)].best_epoch for s in seeds],
                epochs_run=[results[(k, s)].epochs_run for s in seeds],
                audit=audit_fold(table, plan, k, ctx, cfg),
            )
        )
    summary = aggregate_cv([r.metrics for r in reports])
    y_all = np.concatenate([r.test_labels for r in reports])
    p_all = np.concatenate([r.ensemble_prob for r in reports])
    summary["pooled_auc"] = auc_midrank(y_all, p_all)
    summary["audit_failures"] = [p for r in reports for p in r.audit]
    return CvResult(plan, reports, summary, results)
