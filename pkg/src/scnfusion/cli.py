"""Command line entry point: ``scnfusion {synth,extract,train,explain,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from .evaluation import FoldPlan, NumericError, prepare_fold, restore_state, roc_points, run_cv
from .features import FeatureTable, extract_features, read_features_csv, write_features_csv
from .interpret import (
    gradcam_scn,
    load_grouping,
    network_kruskal_wallis,
    roi_scores,
    roi_stat_tests,
    select_biomarkers,
)
from .model import DuScnFusionNet
from .nifti import NiftiError, load_atlas, load_nifti, read_roi_table, resample_labels_nn
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .preprocess import normalize_robust
from .synth import generate_cohort

log = logging.getLogger("scnfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ helpers


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, obj):
    Path(path).write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path} (run the previous stage first)") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None


def _write_csv(path, header, rows, comments=()):
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _fmt(x):
    return repr(float(x)) if np.isfinite(x) else "nan"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _comment_value(comments, key):
    for line in comments:
        k, _, v = line.partition("=")
        if k.strip() == key:
            return v.strip()
    return None


def _read_labels(path):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except FileNotFoundError:
        raise DataError(f"labels file not found: {path}") from None
    if not rows or rows[0][:2] != ["subject_id", "label"]:
        raise DataError(f"{path}: expected header subject_id,label")
    out = []
    for r in rows[1:]:
        if len(r) < 2 or r[1].strip() not in ("0", "1"):
            raise DataError(f"{path}: bad row {r!r} (label must be 0=HC or 1=ADHD)")
        out.append((r[0].strip(), int(r[1])))
    if not out:
        raise DataError(f"{path}: no subjects")
    return out


def _out_dir(cfg):
    out = Path(cfg["paths"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_features(cfg, hashes):
    path = _out_dir(cfg) / "features.csv"
    if not path.exists():
        raise DataError(f"features CSV not found: {path} (run extract first)")
    try:
        table, comments = read_features_csv(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    found = _comment_value(comments, "extract_hash")
    if found != hashes["extract"]:
        raise DataError(
            f"{path} was produced with extract hash {found}, current config gives {hashes['extract']}; "
            "rerun extract"
        )
    return path, table


# ----------------------------------------------------------------- commands


def cmd_synth(cfg, jobs=1):
    spec = C.spec(cfg)
    data = Path(cfg["paths"]["data_dir"])
    cohort = generate_cohort(spec, out_dir=data)
    log.info("wrote %d subjects to %s", len(cohort["subject_ids"]), data)
    return cohort


def _extract_one(args):
    sid, label, path, atlas, norm = args
    try:
        _, vol = load_nifti(path)
    except FileNotFoundError:
        raise DataError(f"volume not found for {sid}: {path}") from None
    except NiftiError as exc:
        raise DataError(f"{path}: {exc.kind}: {exc}") from None
    if vol.shape != atlas.labels.shape or not np.allclose(vol.affine, atlas.affine):
        atlas = resample_labels_nn(atlas, vol)
    try:
        return extract_features(sid, label, normalize_robust(vol, norm), atlas)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _volume_path(data_dir, sid):
    for suffix in (".nii.gz", ".nii"):
        p = data_dir / f"{sid}{suffix}"
        if p.exists():
            return p
    return data_dir / f"{sid}.nii.gz"


def cmd_extract(cfg, jobs=1):
    hashes = C.stage_hashes(cfg)
    paths = cfg["paths"]
    subjects = _read_labels(paths["labels"])
    try:
        atlas = load_atlas(paths["atlas"], paths["roi_table"])
    except FileNotFoundError as exc:
        raise DataError(f"atlas input not found: {exc.filename}") from None
    except NiftiError as exc:
        raise DataError(f"{paths['atlas']}: {exc.kind}: {exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    norm = C.normalization(cfg)
    data = Path(paths["data_dir"])
    tasks = [(sid, lab, _volume_path(data, sid), atlas, norm) for sid, lab in subjects]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            feats = list(pool.map(_extract_one, tasks, chunksize=4))
    else:
        feats = [_extract_one(t) for t in tasks]
    table = FeatureTable.from_subjects(feats)
    n_flag = int(table.flags.sum())
    if n_flag:
        log.warning("%d empty or single-voxel ROI entries flagged", n_flag)
    out = _out_dir(cfg) / "features.csv"
    comments = [f"extract_hash={hashes['extract']}", "config=" + C.canonical(C.provenance(cfg))]
    write_features_csv(out, table, "\n".join(comments))
    log.info("wrote %s (%d subjects, %d ROIs)", out, len(table), table.n_rois)
    return table


def _model_config_for(cfg, table):
    mc = C.model_config(cfg)
    if mc.n_rois != table.n_rois or mc.n_aux != table.n_rois + 3:
        raise DataError(
            f"features have {table.n_rois} ROIs but the model expects n_rois={mc.n_rois}, n_aux={mc.n_aux}"
        )
    return mc


def cmd_train(cfg, jobs=1):
    hashes = C.stage_hashes(cfg)
    feat_path, table = _load_features(cfg, hashes)
    mc = _model_config_for(cfg, table)
    tc = C.train_config(cfg)
    out = _out_dir(cfg)

    def progress(res):
        log.info("fold %d seed %d: best epoch %d of %d", res.fold, res.seed, res.best_epoch, res.epochs_run)

    try:
        result = run_cv(table, mc, tc, cfg["seed"], jobs=jobs, on_result=progress)
    except ValueError as exc:
        raise DataError(str(exc)) from None

    ckpt = out / "checkpoints"
    for (k, s), res in sorted(result.seed_results.items()):
        model = DuScnFusionNet(mc, seed=s, use_aux=tc.use_aux)
        restore_state(model, res.state)
        meta = {"train_hash": hashes["train"], "fold": k, "seed": s, "best_epoch": res.best_epoch, "use_aux": tc.use_aux}
        save_checkpoint(ckpt / f"fold{k:02d}_seed{s}", model, meta)

    best = max(result.reports, key=lambda r: (r.metrics.get("balanced_accuracy", -1), r.metrics.get("auc", -1), -r.fold))
    folds = [
        {
            "fold": r.fold,
            "test_ids": r.test_ids,
            "ensemble_label": r.ensemble_pred,
            "metrics": r.metrics,
            "seed_metrics": r.seed_metrics,
            "best_epochs": r.best_epochs,
            "epochs_run": r.epochs_run,
            "audit": r.audit,
        }
        for r in result.reports
    ]
    summary = {
        "stage": "train",
        "train_hash": hashes["train"],
        "extract_hash": hashes["extract"],
        "features_sha256": _sha256(feat_path),
        "config": C.provenance(cfg),
        "n_subjects": len(table),
        "seeds": result.reports[0].seeds,
        "fold_plan": result.plan.to_dict(),
        "folds": folds,
        "aggregate": result.summary["metrics"],
        "pooled_confusion": result.summary["pooled_confusion"],
        "n_valid_folds": result.summary["n_valid_folds"],
        "pooled_auc": result.summary["pooled_auc"],
        "audit_failures": result.summary["audit_failures"],
        "best_fold": best.fold,
    }
    _write_json(out / "cv_summary.json", summary)

    seeds = result.reports[0].seeds
    by_subject = {}
    for r in result.reports:
        for j, sid in enumerate(r.test_ids):
            by_subject[sid] = (r.fold, r.seed_probs[:, j], r.ensemble_prob[j], r.ensemble_pred[j], r.test_labels[j])
    rows = []
    for sid in table.subject_ids:
        fold, probs, ep, el, y = by_subject[sid]
        rows.append([sid, fold] + [_fmt(p) for p in probs] + [_fmt(ep), int(el), int(y)])
    comments = [f"train_hash={hashes['train']}"]
    _write_csv(
        out / "predictions.csv",
        ["subject_id", "fold"] + [f"prob_seed{s}" for s in seeds] + ["ensemble_prob", "ensemble_label", "true_label"],
        rows,
        comments,
    )
    y_all = np.concatenate([r.test_labels for r in result.reports])
    p_all = np.concatenate([r.ensemble_prob for r in result.reports])
    _write_csv(out / "roc_points.csv", ["fpr", "tpr"], [[_fmt(a), _fmt(b)] for a, b in roc_points(y_all, p_all)], comments)
    pc = result.summary["pooled_confusion"]
    _write_csv(
        out / "confusion.csv",
        ["true", "predicted", "count"],
        [["ADHD", "ADHD", pc["tp"]], ["ADHD", "HC", pc["fn"]], ["HC", "ADHD", pc["fp"]], ["HC", "HC", pc["tn"]]],
        comments,
    )
    hist = []
    for (k, s), res in sorted(result.seed_results.items()):
        for e, (tl, vl) in enumerate(zip(res.train_loss, res.val_loss), start=1):
            hist.append([k, s, e, _fmt(tl), _fmt(vl)])
    _write_csv(out / "history.csv", ["fold", "seed", "epoch", "train_loss", "val_loss"], hist, comments)
    if summary["audit_failures"]:
        for line in summary["audit_failures"]:
            log.error("leakage audit: %s", line)
        raise DataError("leakage audit failed")
    m = result.summary["metrics"]
    log.info(
        "balanced accuracy %.4f +- %.4f, AUC %.4f (pooled %.4f)",
        m["balanced_accuracy"]["mean"],
        m["balanced_accuracy"]["std"],
        m["auc"]["mean"],
        result.summary["pooled_auc"],
    )
    return summary


def _roi_names(cfg, n):
    try:
        return [name for _, name in read_roi_table(cfg["paths"]["roi_table"], n)]
    except (FileNotFoundError, ValueError):
        log.warning("ROI table unavailable; using index names")
        return [f"ROI_{r:03d}" for r in range(n)]


def cmd_explain(cfg, jobs=1):
    hashes = C.stage_hashes(cfg)
    out = _out_dir(cfg)
    summary = _read_json(out / "cv_summary.json", "cv_summary.json")
    if summary.get("train_hash") != hashes["train"]:
        raise DataError(
            f"cv_summary.json has train hash {summary.get('train_hash')}, current config gives {hashes['train']}; "
            "rerun train"
        )
    feat_path, table = _load_features(cfg, hashes)
    if _sha256(feat_path) != summary["features_sha256"]:
        raise DataError("features.csv changed since training; rerun train")
    mc = _model_config_for(cfg, table)
    tc = C.train_config(cfg)
    icfg = cfg["interpret"]
    k = summary["best_fold"]
    fold = summary["folds"][k]
    plan_folds = summary["fold_plan"]["folds"]
    plan = FoldPlan(
        table.subject_ids, table.labels, np.array([plan_folds[s] for s in table.subject_ids]), tc.n_folds, cfg["seed"]
    )
    ctx = prepare_fold(table, plan, k, tc)
    test = plan.test_idx(k)
    if icfg["population"] == "correct_adhd":
        pred = np.asarray(fold["ensemble_label"])
        keep = (table.labels[test] == 1) & (pred == 1)
        test = test[keep]
        if len(test) == 0:
            raise DataError(f"fold {k} has no correctly classified ADHD subjects to explain")
    scores = []
    for s in summary["seeds"]:
        model = DuScnFusionNet(mc, seed=s, use_aux=tc.use_aux)
        try:
            manifest = load_checkpoint(out / "checkpoints" / f"fold{k:02d}_seed{s}", model)
        except CheckpointError as exc:
            raise DataError(str(exc)) from None
        if manifest["meta"].get("train_hash") != hashes["train"]:
            raise DataError(f"checkpoint fold {k} seed {s} comes from a different training config")
        cam = gradcam_scn(model, ctx.scn[test], ctx.aux[test] if tc.use_aux else None)
        if not np.all(np.isfinite(cam)):
            raise NumericError("non-finite Grad-CAM map")
        scores.append(roi_scores(cam))
    names = _roi_names(cfg, table.n_rois)
    imp = select_biomarkers(np.concatenate(scores), names, icfg["percentile"])
    selected = set(imp.selected)
    comments = [f"explain_hash={hashes['explain']}"]
    _write_csv(
        out / "roi_importance.csv",
        ["roi_index", "name", "score", "selected"],
        [[r, names[r], _fmt(imp.scores[r]), int(r in selected)] for r in range(table.n_rois)],
        comments,
    )

    feat = table.means if icfg["stat_feature"] == "roi_means" else table.iqrs
    rep = roi_stat_tests(feat[table.labels == 0], feat[table.labels == 1], icfg["stat_feature"])
    _write_csv(
        out / "stats_report.csv",
        ["roi_index", "name", "t", "df", "p", "p_bonferroni", "q_bh", "cohens_d", "undefined", "mw_u", "mw_p"],
        [
            [r, names[r]]
            + [_fmt(v) for v in (rep.t[r], rep.df[r], rep.p[r], rep.p_bonferroni[r], rep.q_bh[r], rep.d[r])]
            + [int(rep.undefined[r]), _fmt(rep.mw_u[r]), _fmt(rep.mw_p[r])]
            for r in range(table.n_rois)
        ],
        comments,
    )
    try:
        grouping = load_grouping(icfg["network_grouping"])
        values = np.abs(np.nan_to_num(rep.d)) if icfg["network_values"] == "abs_d" else imp.scores
        h, p, sizes = network_kruskal_wallis(values, grouping)
        network = {"H": h, "p": p, "networks": sizes, "values": icfg["network_values"]}
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(f"network grouping: {exc}") from None

    result = {
        "stage": "explain",
        "explain_hash": hashes["explain"],
        "train_hash": hashes["train"],
        "config": C.provenance(cfg),
        "best_fold": k,
        "population": icfg["population"],
        "n_maps": int(imp.n_subjects),
        **imp.to_dict(),
        "n_significant_bonferroni": int(np.sum(rep.p_bonferroni < 0.05)),
        "n_significant_bh": int(np.sum(rep.q_bh < 0.05)),
        "n_large_effect": rep.n_large_effect,
        "network_kruskal_wallis": network,
    }
    truth_path = Path(cfg["paths"]["data_dir"]) / "ground_truth.json"
    if truth_path.exists():
        planted = set(json.loads(truth_path.read_text())["planted_rois"])
        hits = sorted(planted & selected)
        result["planted_rois"] = sorted(planted)
        result["planted_hits"] = hits
        result["hit_rate"] = len(hits) / len(planted) if planted else None
    _write_json(out / "biomarkers.json", result)
    log.info("selected %d ROIs above the %.0fth percentile", len(imp.selected), icfg["percentile"])
    return result


def cmd_report(cfg, jobs=1):
    hashes = C.stage_hashes(cfg)
    out = _out_dir(cfg)
    summary = _read_json(out / "cv_summary.json", "cv_summary.json")
    bio = _read_json(out / "biomarkers.json", "biomarkers.json")
    if summary.get("train_hash") != hashes["train"] or bio.get("explain_hash") != hashes["explain"]:
        raise DataError("outputs come from a different config; rerun train and explain")
    if bio.get("train_hash") != summary["train_hash"]:
        raise DataError("biomarkers.json and cv_summary.json come from different training runs")
    report = {
        "config_hash": hashes["explain"],
        "config": C.provenance(cfg),
        "cv": {k: summary[k] for k in ("aggregate", "pooled_confusion", "pooled_auc", "n_valid_folds", "best_fold")},
        "biomarkers": {k: v for k, v in bio.items() if k not in ("config", "stage")},
    }
    _write_json(out / "report.json", report)
    lines = [f"scnfusion report (config {hashes['explain']})", "", "Cross-validation (mean +- SD over folds)"]
    for key, v in summary["aggregate"].items():
        lines.append(f"  {key:<20s} {v['mean']:.4f} +- {v['std']:.4f}")
    lines.append(f"  {'pooled_auc':<20s} {summary['pooled_auc']:.4f}")
    pc = summary["pooled_confusion"]
    lines += [
        "",
        "Pooled confusion (ADHD positive)",
        f"  TP {pc['tp']}  FN {pc['fn']}  FP {pc['fp']}  TN {pc['tn']}",
        "",
        f"Biomarkers (fold {bio['best_fold']}, threshold {bio['threshold']:.4f})",
    ]
    for item in bio["selected"]:
        lines.append(f"  {item['roi_index']:4d}  {item['name']:<24s} {item['score']:.4f}")
    if "hit_rate" in bio:
        lines.append(f"  planted hits {len(bio['planted_hits'])}/{len(bio['planted_rois'])}")
    kw = bio["network_kruskal_wallis"]
    lines += [
        "",
        f"ROI tests: {bio['n_significant_bonferroni']} Bonferroni, {bio['n_significant_bh']} BH, "
        f"{bio['n_large_effect']} with |d| > 0.8",
        f"Network Kruskal-Wallis ({kw['values']}): H = {kw['H']:.3f}, p = {kw['p']:.4g}",
    ]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return report


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "explain": cmd_explain,
    "report": cmd_report,
}


def build_parser():
    p = _Parser(prog="scnfusion", description="Dual-channel structural covariance network pipeline")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--ablation", choices=C.ABLATIONS, help="train a reduced variant")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
    except UsageError as exc:
        print(f"scnfusion: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = C.load_config(args.config, seed=args.seed, ablation=args.ablation)
        COMMANDS[args.command](cfg, jobs=args.jobs)
    except C.ConfigError as exc:
        print(f"scnfusion: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"scnfusion: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, NiftiError, CheckpointError) as exc:
        print(f"scnfusion: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
