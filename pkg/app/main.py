"""
Main entry point for Inpatient2Vec.
Subcommands generate synthetic cohorts, pretrain, fine-tune, evaluate and
export embeddings. Exit codes: 0 ok, 2 input error, 3 incompatible
checkpoint, 4 numerical divergence, 1 anything unexpected.
"""
import argparse
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

import numpy as np
from rich.console import Console

from config import PRESETS, RESULT_DIR, RunConfig, load_run_config, setup_logging
from pipeline_orchestrator import EVAL_TASKS, Inpatient2VecPipeline
from services.checkpoint import load_checkpoint
from services.corpus import FilterConfig, cohort_stats, load_cohort
from services.errors import InputError, Inpatient2VecError
from services.evaluation import DIAGNOSIS_MODES, diagnosis_vectors, map_visits, nearest_activities
from services.model import build_day_batch
from services.reporting import nearest_table, stats_table, write_embeddings

logger = logging.getLogger(__name__)
console = Console()

ABLATIONS = {
    "none": {},
    "diagnosis-as-activity": {"diagnosis_as_activity": True},
    "pairwise-day": {"pairwise_day_task": True},
}


def resolve_path(path_str: str) -> Path:
    """
    Resolve a path that can be absolute or relative.
    If relative, resolve from the current working directory.
    """
    path = Path(path_str)
    if path.is_absolute():
        return path
    return Path.cwd() / path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), default=None, help="Named defaults (desk or full)")
    common.add_argument("--config", default=None, help="TOML config file with [model], [train], [synth], [filter], [split]")
    common.add_argument("--seed", type=int, default=None, help="Global seed (echoed into every artifact)")
    common.add_argument("--verbose", action="store_true", help="Debug logging and tracebacks")

    parser = argparse.ArgumentParser(description="Inpatient2Vec - day-level representations of inpatient visits")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    synth = subparsers.add_parser("synth", parents=[common], help="Generate a synthetic cohort with ground truth")
    synth.add_argument("--out", default=str(RESULT_DIR / "synthetic" / "cohort.jsonl"), help="Cohort output path")
    synth.add_argument("--visits", type=int, default=None)
    synth.add_argument("--activities", type=int, default=None)
    synth.add_argument("--clusters", type=int, default=None)
    synth.add_argument("--diagnoses", type=int, default=None)
    synth.add_argument("--families", type=int, default=None)
    synth.add_argument("--mean-los", type=float, default=None)
    synth.add_argument("--activities-per-day", type=float, default=None)

    stats = subparsers.add_parser("stats", parents=[common], help="Dataset statistics of a cohort")
    stats.add_argument("cohort", help="Cohort JSON Lines file")
    stats.add_argument("--filtered", action="store_true", help="Apply the visit filter first")

    pretrain = subparsers.add_parser("pretrain", parents=[common], help="Pretrain on a cohort")
    pretrain.add_argument("cohort", help="Cohort JSON Lines file")
    pretrain.add_argument("--out", default=str(RESULT_DIR / "model.i2v"), help="Checkpoint output path")
    pretrain.add_argument("--epochs", type=int, default=None)
    pretrain.add_argument("--dim", type=int, default=None)
    pretrain.add_argument("--heads", type=int, default=None)
    pretrain.add_argument("--layers", type=int, default=None)
    pretrain.add_argument("--lstm-hidden", type=int, default=None)
    pretrain.add_argument("--lr", type=float, default=None)
    pretrain.add_argument("--batch-size", type=int, default=None)
    pretrain.add_argument("--ablation", choices=sorted(ABLATIONS), default="none")
    pretrain.add_argument("--next-day-loss", choices=("softmax", "sigmoid"), default=None)
    pretrain.add_argument("--unmasked-day-reps", action="store_true", default=None)
    pretrain.add_argument("--no-progress", action="store_true")

    finetune = subparsers.add_parser("finetune", parents=[common], help="Fine-tune a downstream predictor")
    finetune.add_argument("checkpoint")
    finetune.add_argument("cohort")
    finetune.add_argument("--task", choices=("next", "los"), default="next")
    finetune.add_argument("--epochs", type=int, default=None)
    finetune.add_argument("--no-control", action="store_true", help="Skip the randomly initialised control")
    finetune.add_argument("--no-progress", action="store_true")

    evaluate = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    evaluate.add_argument("checkpoint")
    evaluate.add_argument("--cohort", default=None, help="Cohort the checkpoint was trained on")
    evaluate.add_argument("--tasks", default=",".join(EVAL_TASKS), help="Comma list of intrusion,cluster,recall,los")
    evaluate.add_argument("--out-dir", default=None, help="Report directory (default: next to the checkpoint)")
    evaluate.add_argument("--truth", default=None, help="Ground-truth JSON (default: <cohort>.truth.json if present)")
    evaluate.add_argument("--n-sets", type=int, default=500)
    evaluate.add_argument("--diag-mode", choices=DIAGNOSIS_MODES, default="day_mean")
    evaluate.add_argument("--epochs", type=int, default=None, help="Fine-tuning epochs")
    evaluate.add_argument("--no-finetune", action="store_true", help="Only the pretrained head and baselines")
    evaluate.add_argument("--no-progress", action="store_true")

    nearest = subparsers.add_parser("nearest", parents=[common], help="Nearest activities to a code")
    nearest.add_argument("checkpoint")
    nearest.add_argument("code")
    nearest.add_argument("--k", type=int, default=5)

    export = subparsers.add_parser("export", parents=[common], help="Export embeddings as TSV")
    export.add_argument("checkpoint")
    export.add_argument("out")
    export.add_argument("--what", choices=("activities", "diagnoses", "days"), default="activities")
    export.add_argument("--cohort", default=None, help="Required for --what days")

    pipeline = subparsers.add_parser("pipeline", parents=[common], help="synth + pretrain + eval in one run")
    pipeline.add_argument("--out-dir", default=str(RESULT_DIR / "pipeline"))
    pipeline.add_argument("--n-sets", type=int, default=500)
    pipeline.add_argument("--no-progress", action="store_true")
    return parser


def run_config_from_args(args) -> RunConfig:
    """Flags > config file > preset."""
    model, train, synth = {}, {}, {}
    if args.command == "synth":
        synth = {
            "n_visits": args.visits, "n_activities": args.activities, "n_clusters": args.clusters,
            "n_diagnoses": args.diagnoses, "n_families": args.families, "mean_los": args.mean_los,
            "mean_activities_per_day": args.activities_per_day,
        }
    if args.command == "pretrain":
        model = {"embed_dim": args.dim, "n_heads": args.heads, "n_layers": args.layers, "lstm_hidden": args.lstm_hidden}
        train = {"lr": args.lr, "batch_size": args.batch_size, "next_day_loss": args.next_day_loss,
                 "unmasked_day_reps": args.unmasked_day_reps}
        train.update(ABLATIONS[args.ablation])
    if hasattr(args, "epochs"):
        train["epochs"] = args.epochs
    if getattr(args, "no_progress", False):
        train["progress"] = False
    return load_run_config(
        args.config, args.preset,
        {"model": model, "train": train, "synth": synth},
        args.seed,
    )


def handle_synth_command(args, pipeline: Inpatient2VecPipeline) -> None:
    """Handle synthetic cohort generation."""
    result = pipeline.synth_only(resolve_path(args.out))
    console.print(f"✓ Cohort written to {result['cohort_path']}")
    console.print(f"✓ Ground truth written to {result['truth_path']}")
    console.print(stats_table(result["stats"]))


def handle_stats_command(args, pipeline: Inpatient2VecPipeline) -> None:
    """Handle dataset statistics."""
    cohort = load_cohort(resolve_path(args.cohort))
    title = "Dataset statistics"
    if args.filtered:
        cohort = pipeline.run.filter.apply(cohort)
        title += " (filtered)"
    console.print(stats_table(cohort_stats(cohort), title))


def handle_pretrain_command(args, pipeline: Inpatient2VecPipeline) -> None:
    """Handle pretraining."""
    result = pipeline.pretrain_only(resolve_path(args.cohort), resolve_path(args.out))
    first, best = result["log"][0], result["log"][result["best_epoch"]]
    console.print(f"✓ Checkpoint: {result['checkpoint_path']} (best epoch {result['best_epoch']})")
    console.print(f"✓ Training log: {result['log_path']}")
    if first.valid_loss is not None:
        console.print(f"  Validation loss {first.valid_loss:.4f} → {best.valid_loss:.4f}")


def handle_finetune_command(args, pipeline: Inpatient2VecPipeline) -> None:
    """Handle fine-tuning."""
    result = pipeline.finetune_only(
        resolve_path(args.checkpoint), resolve_path(args.cohort), args.task, not args.no_control)
    for name in ("report", "control", "baseline"):
        if name in result:
            values = ", ".join(f"{k}={v:.4f}" for k, v in result[name].items() if isinstance(v, float))
            console.print(f"  {name:<9} {values}")


def handle_eval_command(args, pipeline: Inpatient2VecPipeline) -> None:
    """Handle evaluation."""
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    result = pipeline.evaluate_only(
        resolve_path(args.checkpoint),
        resolve_path(args.cohort) if args.cohort else None,
        tasks,
        resolve_path(args.out_dir) if args.out_dir else None,
        resolve_path(args.truth) if args.truth else None,
        args.n_sets,
        args.diag_mode,
        not args.no_finetune,
    )
    report = result["report"]
    for line in report.summary_lines():
        console.print(line)
    if report.rows():
        console.print(report.to_table())
    for kind, path in result["files"].items():
        console.print(f"✓ {kind}: {path}")


def handle_nearest_command(args, pipeline: Inpatient2VecPipeline) -> None:
    """Handle nearest-neighbour lookup."""
    checkpoint = load_checkpoint(resolve_path(args.checkpoint))
    vocab = checkpoint.vocabulary
    query = vocab.activity_id(args.code)
    k = args.k
    if k < 1:
        raise InputError("--k must be at least 1")
    if k > vocab.n_activities - 1:
        logger.warning(f"k={k} exceeds the {vocab.n_activities - 1} other activities; clamping")
        k = vocab.n_activities - 1
    vectors = checkpoint.model.tables.activity.data[:vocab.n_activities]
    found = nearest_activities(vectors, query, k)
    console.print(nearest_table(args.code, [(vocab.activity_codes[i], d) for i, d in found]))


def handle_export_command(args, pipeline: Inpatient2VecPipeline) -> None:
    """Handle embedding export."""
    checkpoint = load_checkpoint(resolve_path(args.checkpoint))
    model, vocab = checkpoint.model, checkpoint.vocabulary
    if args.what == "activities":
        keys, vectors = list(vocab.activity_codes), model.tables.activity.data[:vocab.n_activities]
    elif args.what == "diagnoses":
        keys, vectors = list(vocab.diagnosis_codes), diagnosis_vectors(checkpoint, "day_mean")
        if model.tables.diagnosis is not None:
            rows = [vectors]
            for g, code in enumerate(vocab.diagnosis_codes):
                matrix = model.tables.diagnosis_matrix(g).data
                keys += [f"{code}:{t}" for t in range(1, matrix.shape[0] + 1)]
                rows.append(matrix)
            vectors = np.vstack(rows)
    else:
        if not args.cohort:
            raise InputError("--what days requires --cohort")
        meta = checkpoint.metadata
        filter_config = FilterConfig(**meta["filter"]) if "filter" in meta else pipeline.run.filter
        cohort = filter_config.apply(load_cohort(resolve_path(args.cohort)))
        checkpoint.check_vocabulary(cohort.vocabulary)

        def encode(chunk):
            batch = build_day_batch(chunk, vocab, None, model.config.diagnosis_as_activity)
            return model.day_representations(batch).data

        keys = [f"{v.visit_id}:{t}" for v in cohort.visits for t in range(1, v.los + 1)]
        vectors = np.vstack(map_visits(encode, list(cohort.visits), threads=pipeline.threads))
    path = write_embeddings(resolve_path(args.out), keys, vectors)
    console.print(f"✓ Exported {len(keys)} {args.what} vectors to {path}")


def handle_pipeline_command(args, pipeline: Inpatient2VecPipeline) -> None:
    """Handle the full synth → pretrain → eval flow."""
    result = pipeline.full_run(resolve_path(args.out_dir), n_sets=args.n_sets)
    report = result["step_3_eval"]["report"]
    for line in report.summary_lines():
        console.print(line)
    console.print(report.to_table())


HANDLERS = {
    "synth": handle_synth_command,
    "stats": handle_stats_command,
    "pretrain": handle_pretrain_command,
    "finetune": handle_finetune_command,
    "eval": handle_eval_command,
    "nearest": handle_nearest_command,
    "export": handle_export_command,
    "pipeline": handle_pipeline_command,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    setup_logging(verbose=args.verbose)
    try:
        pipeline = Inpatient2VecPipeline(run_config_from_args(args), console)
        HANDLERS[args.command](args, pipeline)
    except Inpatient2VecError as e:
        console.print(f"Error: {e}")
        if args.verbose:
            traceback.print_exc()
        return e.exit_code
    except Exception as e:
        console.print(f"Unexpected error: {e}")
        if args.verbose:
            traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
