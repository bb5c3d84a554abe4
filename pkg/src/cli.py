"""Command line: preprocess -> train -> evaluate -> ablate -> recommend, plus stats."""
import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from src import (analysis_utils, data_pipeline, evaluation, export_utils, file_loader, insert_model, settings,
                 training, utils)
from src.candidate_retrieval import CandidateRetriever, CandidateSets, load_or_compute_similar_user_table
from src.exceptions import DataError, EmptyReportError, InsertError, UnknownEntityError
from src.plotting import metrics_plotting

logger = logging.getLogger(__name__)


# ==============================================================================
# 1. SUBCOMMANDS
# ==============================================================================

def cmd_preprocess(raw_path, output, run_config):
    """Raw log -> dataset container plus <output>.stats.json. Returns (dataset, stats frame)."""
    raw_path, output = Path(raw_path), Path(output)
    if not raw_path.is_file():
        raise DataError(f"input file not found: {raw_path}")
    data_config = run_config.data
    interactions = data_pipeline.load_interactions(raw_path, data_config.input_format)
    dataset = data_pipeline.build_dataset(interactions, data_config)
    provenance = {
        "run_config": run_config.to_dict(),
        "input_file": raw_path.name,
        "input_sha256": utils.sha256_file(raw_path),
    }
    data_pipeline.save_dataset(dataset, output, extra_manifest=provenance)
    stats = data_pipeline.corpus_stats(dataset)
    export_utils.write_json({
        "stats": stats.to_dict(orient="index"),
        "dataset_fingerprint": dataset.fingerprint,
        **provenance,
    }, output.with_suffix(".stats.json"))
    logger.info("Dataset: %d users, %d items, %d train sessions", dataset.num_users, dataset.num_items - 1,
                len(dataset.sessions("train")))
    return dataset, stats


def cmd_train(dataset_path, out_dir, run_config, resume=False, figures=False, progress=True):
    dataset_path, out_dir = Path(dataset_path), Path(out_dir)
    dataset = data_pipeline.load_dataset(dataset_path)
    provenance = {"run_config": run_config.to_dict(), "dataset_file_sha256": utils.sha256_file(dataset_path)}
    result = training.train(dataset, run_config.model, run_config.train, out_dir=out_dir, resume=resume,
                             progress=progress, extra_manifest=provenance)
    export_utils.write_json(provenance, out_dir / "run_config.json")
    if figures and result.history:
        figure = metrics_plotting.plot_training_curves(result.history)
        (out_dir / "training_figures.zip").write_bytes(export_utils.create_figures_zip_fast({"training": figure}))
    return result


def cmd_evaluate(checkpoint, dataset_path, run_config, split="test", out_dir=None,
                 emit_csv=False, emit_xlsx=False, figures=False):
    checkpoint, dataset_path = Path(checkpoint), Path(dataset_path)
    dataset = data_pipeline.load_dataset(dataset_path)
    try:
        report = evaluation.evaluate(checkpoint, dataset, split, run_config.eval)
    except EmptyReportError as exc:
        raise DataError(str(exc)) from None
    report.metadata["run_config"] = run_config.to_dict()
    report.metadata["dataset_file_sha256"] = utils.sha256_file(dataset_path)
    if run_config.eval.short_only:
        report.metadata["reference"] = analysis_utils.SHORT_SESSION_REFERENCE
    out_dir = Path(out_dir) if out_dir is not None else checkpoint.parent
    stem = f"report_{split}_short" if run_config.eval.short_only else f"report_{split}"
    export_utils.export_report(report, out_dir, stem=stem, emit_csv=emit_csv, emit_xlsx=emit_xlsx)
    print(export_utils.format_report_text(report), end="")
    if figures:
        figs = {f"length_breakdown_k{k}": metrics_plotting.plot_length_breakdown(report, k=k) for k in report.ks}
        (out_dir / f"{stem}_figures.zip").write_bytes(export_utils.create_figures_zip_fast(figs))
    return report


def cmd_ablate(dataset_path, out_dir, run_config, variants=insert_model.VARIANTS,
               emit_xlsx=False, figures=False, progress=True):
    dataset = data_pipeline.load_dataset(dataset_path)
    seeds = [run_config.train.seed + k for k in range(run_config.ablation_runs)]
    result = evaluation.run_ablation_suite(
        dataset, run_config.model, run_config.train, run_config.eval,
        variants=variants, seeds=seeds, out_dir=Path(out_dir) / "runs", progress=progress,
    )
    export_utils.export_ablation(result, out_dir, emit_xlsx=emit_xlsx)
    export_utils.write_json({"run_config": run_config.to_dict(), "seeds": seeds,
                             "dataset_hash": dataset.fingerprint}, Path(out_dir) / "run_config.json")
    print(result.mean.to_string(float_format=lambda v: f"{v:.4f}"))
    if figures:
        figs = {f"ablation_{metric}": metrics_plotting.plot_ablation_with_sem(result.mean, result.sem, metric)
                for metric in result.mean.columns}
        (Path(out_dir) / "ablation_figures.zip").write_bytes(export_utils.create_figures_zip_fast(figs))
    return result


def cmd_recommend(checkpoint, dataset_path, user, items, k=10, cold_start=False):
    """Top-k next items for `user` after `items`, as a frame of item ids and probabilities."""
    dataset = data_pipeline.load_dataset(dataset_path)
    model, manifest, _ = insert_model.load_checkpoint(checkpoint, dataset)

    unknown_items = [i for i in items if i not in dataset.items or i == dataset.items.padding]
    unknown_user = user not in dataset.users and not cold_start
    if unknown_items or unknown_user:
        offenders = ([f"user:{user}"] if unknown_user else []) + [f"item:{i}" for i in unknown_items]
        raise UnknownEntityError(f"not in the training vocabulary: {', '.join(offenders)}", offenders)
    if not items:
        raise UnknownEntityError("recommend needs at least one context item")

    context = [dataset.items.index(i) for i in items]
    if user in dataset.users and model.pools:
        train_config = manifest.get("train_config", {})
        table = load_or_compute_similar_user_table(dataset, train_config.get("num_similar_users", 10))
        retriever = CandidateRetriever(
            dataset, N=table.n, table=table,
            max_candidate_sessions=train_config.get("max_candidate_sessions", 50),
            max_history_sessions=train_config.get("max_history_sessions") or None,
        )
        candidate_sets = retriever.candidate_sets(dataset.users.index(user), math.inf)
    else:
        if user not in dataset.users:
            logger.warning("Unknown user '%s': scoring without collaborative priors", user)
        candidate_sets = CandidateSets.empty()

    probabilities = model.scores(context, candidate_sets)
    ranked = [i for i in np.lexsort((np.arange(len(probabilities)), -probabilities)) if i != 0]
    if k > len(ranked):
        logger.warning("k=%d exceeds the %d rankable items; returning the full ranking", k, len(ranked))
    top = ranked[:k]
    return pd.DataFrame({
        "rank": np.arange(1, len(top) + 1),
        "item": [dataset.items.token(i) for i in top],
        "probability": probabilities[top],
    })


def cmd_stats(dataset_path, reference=None, xlsx_path=None):
    """Corpus statistics, with the published counts appended when known. Optionally written as a workbook."""
    dataset = data_pipeline.load_dataset(dataset_path)
    stats = data_pipeline.corpus_stats(dataset)
    reference = reference or dataset.config.get("input_format")
    if reference in data_pipeline.STATS_REFERENCE:
        stats = pd.concat([stats, pd.DataFrame([data_pipeline.STATS_REFERENCE[reference]],
                                               index=[f"published ({reference})"])])
    if xlsx_path is not None:
        xlsx_path = Path(xlsx_path)
        xlsx_path.parent.mkdir(parents=True, exist_ok=True)
        xlsx_path.write_bytes(export_utils.export_to_excel(stats=stats))
        logger.info("Wrote %s", xlsx_path)
    return stats


# ==============================================================================
# 2. ARGUMENT PARSING
# ==============================================================================

def build_parser():
    parser = argparse.ArgumentParser(prog="app.py", description="Short-session recommender pipeline.")
    parser.add_argument("--config", help="flat YAML settings file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int, help="evaluation worker threads (1 = fully deterministic)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw interaction log -> session dataset")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--format", dest="input_format", choices=sorted(file_loader.FORMAT_PRESETS))
    p.add_argument("--test-fraction", type=float)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=insert_model.VARIANTS)
    p.add_argument("--loss-mode", choices=insert_model.LOSS_MODES)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--figures", action="store_true")

    p = sub.add_parser("evaluate", help="rank metrics of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", default="test", choices=data_pipeline.SPLITS)
    p.add_argument("--short-only", action="store_true", default=None)
    p.add_argument("--targets", choices=["all", "last"])
    p.add_argument("--out")
    p.add_argument("--emit-csv", action="store_true")
    p.add_argument("--emit-xlsx", action="store_true")
    p.add_argument("--figures", action="store_true")

    p = sub.add_parser("ablate", help="train and evaluate every variant")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, help="seeds to average over")
    p.add_argument("--variants", nargs="+", choices=insert_model.VARIANTS, default=list(insert_model.VARIANTS))
    p.add_argument("--emit-xlsx", action="store_true")
    p.add_argument("--figures", action="store_true")

    p = sub.add_parser("recommend", help="top-k next items for a user and context")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--user", required=True)
    p.add_argument("--items", required=True, help="context item ids, comma or space separated")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--cold-start", action="store_true")

    p = sub.add_parser("stats", help="corpus statistics of a dataset")
    p.add_argument("dataset")
    p.add_argument("--reference", choices=sorted(data_pipeline.STATS_REFERENCE))
    p.add_argument("--xlsx", help="also write the table to this .xlsx workbook")
    return parser


def _overrides(args):
    return {
        "seed": args.seed,
        "threads": args.threads,
        "input_format": getattr(args, "input_format", None),
        "test_fraction": getattr(args, "test_fraction", None),
        "variant": getattr(args, "variant", None),
        "loss_mode": getattr(args, "loss_mode", None),
        "max_epochs": getattr(args, "max_epochs", None),
        "short_only": getattr(args, "short_only", None),
        "targets": getattr(args, "targets", None),
        "ablation_runs": getattr(args, "runs", None),
    }


def configure_logging(level):
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def run(args):
    run_config = settings.resolve_run_config(args.config, _overrides(args))
    run_config.eval.progress = not args.quiet
    progress = not args.quiet

    if args.command == "preprocess":
        _, stats = cmd_preprocess(args.input, args.output, run_config)
        print(stats.to_string(float_format=lambda v: f"{v:.2f}"))
    elif args.command == "train":
        result = cmd_train(args.dataset, args.out, run_config, resume=args.resume, figures=args.figures,
                           progress=progress)
        print(json.dumps({"best_epoch": result.state.best_epoch, "best_val_mrr@20": result.state.best_score,
                          "epochs": result.state.epoch}))
    elif args.command == "evaluate":
        cmd_evaluate(args.checkpoint, args.dataset, run_config, split=args.split, out_dir=args.out,
                     emit_csv=args.emit_csv, emit_xlsx=args.emit_xlsx, figures=args.figures)
    elif args.command == "ablate":
        cmd_ablate(args.dataset, args.out, run_config, variants=args.variants, emit_xlsx=args.emit_xlsx,
                   figures=args.figures, progress=progress)
    elif args.command == "recommend":
        table = cmd_recommend(args.checkpoint, args.dataset, args.user, utils.parse_id_list(args.items),
                              k=args.k, cold_start=args.cold_start)
        print(table.to_string(index=False, float_format=lambda v: f"{v:.6f}"))
    elif args.command == "stats":
        print(cmd_stats(args.dataset, args.reference, args.xlsx).to_string(float_format=lambda v: f"{v:.2f}"))
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return run(args)
    except InsertError as exc:
        logger.error("%s", exc)
        return exc.exit_code
