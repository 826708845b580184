"""Command-line interface for the SLPD toolkit."""
from __future__ import annotations

import argparse
from dataclasses import replace
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, NoReturn, Optional, Sequence

import numpy as np

from .analysis.clustering import global_cluster, pool_embeddings, slide_level_cluster
from .analysis.evaluation import compactness_from_embeddings, cross_validated_eval, embed_dataset, pooled_vectors_dataset
from .analysis.structure import similarity_matrix, top_k_neighbors
from .config import (
    CLUSTER_METRICS,
    CLUSTERING_SOURCES,
    INTER_MODES,
    INTRA_MODES,
    SAMPLING_POLICIES,
    EvalConfig,
    LossWeights,
    ModelConfig,
    Settings,
    SyntheticConfig,
    TrainConfig,
    load_settings,
)
from .errors import ConfigurationError, DataError, DatasetFileNotFoundError, NumericError, SlpdError
from .generation.synthetic import generate_from_config
from .io.checkpoint import read_checkpoint
from .io.embedding_store import SlideDataset, load_dataset, write_dataset
from .io.reports import (
    load_similarity_matrix,
    neighbors_payload,
    write_json,
    write_prototype_dump,
    write_similarity_matrix,
)
from .training.ablation import AXES, ablation_grid, run_ablations
from .training.trainer import train

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

CHECKPOINT_NAME = "checkpoint.slpc"
METRICS_NAME = "metrics.jsonl"
SETTINGS_NAME = "settings.json"

_TRAIN = TrainConfig()
_MODEL = ModelConfig()
_WEIGHTS = LossWeights()
_EVAL = EvalConfig()
_SYNTH = SyntheticConfig()


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors print the flag documentation and exit with code 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# Flag tables: (flag, config field, type, default shown in --help, description)
_TRAIN_FLAGS: tuple[tuple[str, str, Callable[[str], Any], Any, str], ...] = (
    ("--epochs", "epochs", int, _TRAIN.epochs, "Training epochs"),
    ("--batch-size", "batch_size", int, _TRAIN.batch_size, "Regions per minibatch"),
    ("--lr", "lr", float, _TRAIN.lr, "SGD learning rate"),
    ("--lr-momentum", "lr_momentum", float, _TRAIN.lr_momentum, "SGD momentum"),
    ("--K", "K", int, _TRAIN.K, "Neighbouring slides per slide for inter-slide distillation"),
    ("--augment-noise-sigma", "augment_noise_sigma", float, _TRAIN.augment_noise_sigma, "Gaussian view noise"),
    ("--augment-dropout-p", "augment_dropout_p", float, _TRAIN.augment_dropout_p, "Per-coordinate view dropout"),
)
_CHOICE_FLAGS: tuple[tuple[str, str, tuple[str, ...], Any, str], ...] = (
    ("--clustering-source", "clustering_source", CLUSTERING_SOURCES, _TRAIN.clustering_source,
     "Network whose embeddings are clustered"),
    ("--inter-mode", "inter_mode", INTER_MODES, _TRAIN.inter_mode, "Inter-slide distillation target"),
    ("--intra-mode", "intra_mode", INTRA_MODES, _TRAIN.intra_mode, "Intra-slide prototype source"),
    ("--sampling", "sampling", SAMPLING_POLICIES, _TRAIN.sampling, "Region sampling policy"),
)
_CLUSTER_FLAGS: tuple[tuple[str, str, Callable[[str], Any], Any, str], ...] = (
    ("--M", "M", int, _TRAIN.M, "Prototypes per slide"),
    ("--kmeans-max-iters", "kmeans_max_iters", int, _TRAIN.kmeans_max_iters, "Lloyd iterations per restart"),
    ("--kmeans-rel-tol", "kmeans_rel_tol", float, _TRAIN.kmeans_rel_tol, "Relative inertia convergence tolerance"),
    ("--kmeans-restarts", "kmeans_restarts", int, _TRAIN.kmeans_restarts, "k-means++ restarts"),
)
_MODEL_FLAGS: tuple[tuple[str, str, Callable[[str], Any], Any, str], ...] = (
    ("--tau-student", "tau_student", float, _MODEL.tau_student, "Student softmax temperature"),
    ("--tau-teacher", "tau_teacher", float, _MODEL.tau_teacher, "Teacher softmax temperature"),
    ("--ema-momentum", "ema_momentum", float, _MODEL.ema_momentum, "Teacher EMA momentum"),
    ("--center-momentum", "center_momentum", float, _MODEL.center_momentum, "Teacher centering momentum"),
    ("--embed-dim", "embed_dim", int, _MODEL.embed_dim, "Encoder output dimension D"),
    ("--out-dim", "out_dim", int, _MODEL.out_dim, "Projection head output dimension P"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(description="Slide-level prototypical distillation toolkit")
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        help="Path to a JSON configuration file (default: $SLPD_TOOLKIT_CONFIG, then config.json in CWD)",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity (default: WARNING)",
    )

    common = _ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Random seed (default: from config, 0)")
    common.add_argument(
        "--workers", type=int, default=None, help="Worker threads (default: from config, else all cores)"
    )
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    synth = subparsers.add_parser("synth", parents=[common], help="Generate a synthetic slide dataset")
    synth.add_argument("--out", type=Path, required=True, help="Output dataset directory")
    for flag, name, kind, default, description in (
        ("--num-slides", "num_slides", int, _SYNTH.num_slides, "Number of slides"),
        ("--regions-per-slide", "regions_per_slide", int, _SYNTH.regions_per_slide, "Regions per slide"),
        ("--d-in", "d_in", int, _SYNTH.d_in, "Region feature dimension"),
        ("--num-classes", "num_classes", int, _SYNTH.num_classes, "Slide classes"),
        ("--class-separation", "class_separation", float, _SYNTH.class_separation, "Distance between class means"),
        ("--within-slide-clusters", "within_slide_clusters", int, _SYNTH.within_slide_clusters,
         "Region patterns per slide"),
    ):
        synth.add_argument(flag, dest=name, type=kind, default=None, help=f"{description} (default: {default})")

    cluster = subparsers.add_parser("cluster", parents=[common], help="Cluster region embeddings into prototypes")
    _add_input_flags(cluster)
    _add_cluster_flags(cluster)
    cluster.add_argument(
        "--mode", choices=["slide", "global"], default="slide", help="Slide-level or global clustering (default: slide)"
    )
    cluster.add_argument("--out", type=Path, required=True, help="Output directory for the prototype dump")

    similarity = subparsers.add_parser("similarity", parents=[common], help="Compute the slide similarity matrix")
    _add_input_flags(similarity)
    _add_cluster_flags(similarity)
    similarity.add_argument("--out", type=Path, required=True, help="Output JSON file")

    neighbors = subparsers.add_parser("neighbors", parents=[common], help="List top-K neighbours per slide")
    neighbors.add_argument("--similarity", type=Path, required=True, help="Similarity matrix JSON from `similarity`")
    neighbors.add_argument("--K", dest="K", type=int, default=None, help=f"Neighbours per slide (default: {_TRAIN.K})")
    neighbors.add_argument("--slide", default=None, help="Only list this slide (default: every slide)")
    neighbors.add_argument("--out", type=Path, default=None, help="Output JSON file (default: print to stdout)")

    train_parser = subparsers.add_parser("train", parents=[common], help="Train the SLPD teacher-student model")
    _add_input_flags(train_parser, checkpoint=False)
    _add_training_flags(train_parser)
    train_parser.add_argument(
        "--out", type=Path, required=True,
        help=f"Output directory ({CHECKPOINT_NAME}, {METRICS_NAME}, {SETTINGS_NAME})",
    )

    evaluate = subparsers.add_parser("eval", parents=[common], help="Cross-validated KNN evaluation of a checkpoint")
    _add_input_flags(evaluate, checkpoint_required=True)
    _add_eval_flags(evaluate)
    _add_cluster_flags(evaluate)
    evaluate.add_argument(
        "--export-pooled", type=Path, default=None,
        help="Also write mean-pooled slide vectors as a dataset to this directory (default: off)",
    )
    evaluate.add_argument("--out", type=Path, required=True, help="Output report JSON")

    ablate = subparsers.add_parser("ablate", parents=[common], help="Run the ablation grid")
    _add_input_flags(ablate, checkpoint=False)
    _add_training_flags(ablate)
    _add_eval_flags(ablate)
    ablate.add_argument(
        "--axes", nargs="+", choices=list(AXES), default=None,
        help=f"Ablation axes to run (default: {' '.join(AXES)})",
    )
    ablate.add_argument("--out", type=Path, required=True, help="Output directory for metrics logs and summary")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")

    handlers: Dict[str, Callable[[Settings, argparse.Namespace], int]] = {
        "synth": _handle_synth,
        "cluster": _handle_cluster,
        "similarity": _handle_similarity,
        "neighbors": _handle_neighbors,
        "train": _handle_train,
        "eval": _handle_eval,
        "ablate": _handle_ablate,
    }
    try:
        settings = load_settings(args.config)
        if args.workers is not None:
            settings = replace(settings, workers=args.workers)
        return handlers[args.command](settings, args)
    except ConfigurationError as exc:
        return _fail(EXIT_USAGE, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except SlpdError as exc:
        return _fail(EXIT_DATA, exc)
    except OSError as exc:
        return _fail(EXIT_DATA, exc)


# Subcommand handlers -------------------------------------------------------
def _handle_synth(settings: Settings, args: argparse.Namespace) -> int:
    cfg = _override(
        settings.synthetic,
        args,
        ("num_slides", "regions_per_slide", "d_in", "num_classes", "class_separation", "within_slide_clusters", "seed"),
    )
    _require_output_directory(args.out)
    manifest = write_dataset(generate_from_config(cfg), args.out)
    print(f"Synthetic dataset written to {manifest}")
    return EXIT_OK


def _handle_cluster(settings: Settings, args: argparse.Namespace) -> int:
    cfg = _train_config(settings, args)
    _require_output_directory(args.out)
    dataset = _load_input(args, settings)
    embeddings = _input_embeddings(dataset, args.checkpoint)
    kmeans_cfg = cfg.kmeans_config(epoch=0)
    result = slide_level_cluster(embeddings, kmeans_cfg, workers=settings.effective_workers)
    global_set = None
    if args.mode == "global":
        kept = {slide_id: points for slide_id, points in embeddings.items() if slide_id not in result.skipped}
        if not kept:
            raise DataError(f"No slide has at least M={cfg.M} regions")
        pooled = pool_embeddings(kept)
        global_set = global_cluster(pooled, min(len(kept) * cfg.M, pooled.shape[0]), kmeans_cfg)
    write_prototype_dump(result, args.out, global_set=global_set, dataset=dataset)
    print(f"Prototypes written to {args.out} ({len(result.skipped)} slide(s) skipped)")
    return EXIT_OK


def _handle_similarity(settings: Settings, args: argparse.Namespace) -> int:
    cfg = _train_config(settings, args)
    dataset = _load_input(args, settings)
    embeddings = _input_embeddings(dataset, args.checkpoint)
    result = slide_level_cluster(embeddings, cfg.kmeans_config(epoch=0), workers=settings.effective_workers)
    if not result.prototype_sets:
        raise DataError(f"No slide has at least M={cfg.M} regions")
    matrix = similarity_matrix(list(result.prototype_sets.values()), workers=settings.effective_workers)
    write_similarity_matrix(matrix, args.out)
    print(f"Similarity matrix for {len(matrix.slide_ids)} slides written to {args.out}")
    return EXIT_OK


def _handle_neighbors(settings: Settings, args: argparse.Namespace) -> int:
    matrix = load_similarity_matrix(args.similarity)
    K = settings.train.K if args.K is None else args.K
    queries = matrix.slide_ids if args.slide is None else (args.slide,)
    if args.slide is not None and args.slide not in matrix.slide_ids:
        raise DataError(f"Unknown slide id: {args.slide}")
    payload = neighbors_payload({slide_id: top_k_neighbors(matrix, slide_id, K) for slide_id in queries})
    if args.out is None:
        print(json.dumps(payload, indent=2))
    else:
        write_json(args.out, payload)
        print(f"Neighbour lists written to {args.out}")
    return EXIT_OK


def _handle_train(settings: Settings, args: argparse.Namespace) -> int:
    cfg = _train_config(settings, args)
    _require_output_directory(args.out)
    dataset = _load_input(args, settings)
    write_json(args.out / SETTINGS_NAME, replace(settings, train=cfg).to_mapping())
    result = train(
        dataset,
        cfg,
        workers=settings.effective_workers,
        checkpoint_path=args.out / CHECKPOINT_NAME,
        metrics_path=args.out / METRICS_NAME,
    )
    print(f"Trained {cfg.epochs} epoch(s); outputs written to {args.out}")
    if result.metrics:
        print(f"Final loss_total: {result.metrics[-1]['loss_total']:.6f}")
    return EXIT_OK


def _handle_eval(settings: Settings, args: argparse.Namespace) -> int:
    cfg = _train_config(settings, args)
    eval_cfg = _eval_config(settings, args)
    dataset = _load_input(args, settings)
    state = read_checkpoint(args.checkpoint)

    report = cross_validated_eval(dataset, state, eval_cfg.folds, eval_cfg.k_eval, eval_cfg.seed)
    embeddings = embed_dataset(dataset, state.teacher.encoder)
    clustering = slide_level_cluster(embeddings, cfg.kmeans_config(epoch=0), workers=settings.effective_workers)
    compact, separation = compactness_from_embeddings(
        embeddings, clustering.prototype_sets, dict(zip(dataset.slide_ids, dataset.labels()))
    )
    report = replace(report, compactness=compact, separation=separation)
    write_json(args.out, report.to_mapping())
    if args.export_pooled is not None:
        write_dataset(pooled_vectors_dataset(dataset, embeddings), args.export_pooled)
    print(f"Accuracy {report.accuracy:.4f} +/- {report.accuracy_std:.4f}, AUC {report.auc:.4f} +/- {report.auc_std:.4f}")
    return EXIT_OK


def _handle_ablate(settings: Settings, args: argparse.Namespace) -> int:
    cfg = _train_config(settings, args)
    eval_cfg = _eval_config(settings, args)
    _require_output_directory(args.out)
    dataset = _load_input(args, settings)
    variants = ablation_grid(cfg, args.axes) if args.axes else None
    outcomes = run_ablations(dataset, cfg, eval_cfg, args.out, variants=variants, workers=settings.effective_workers)
    print(f"{len(outcomes)} ablation variant(s) written to {args.out}")
    return EXIT_OK


# Internal helpers ----------------------------------------------------------
def _add_input_flags(parser: argparse.ArgumentParser, *, checkpoint: bool = True, checkpoint_required: bool = False) -> None:
    parser.add_argument("--input", type=Path, required=True, help="Dataset manifest or directory")
    if checkpoint:
        parser.add_argument(
            "--checkpoint",
            type=Path,
            required=checkpoint_required,
            default=None,
            help="Checkpoint whose teacher encoder embeds the regions"
            + ("" if checkpoint_required else " (default: cluster the raw features)"),
        )


def _add_cluster_flags(parser: argparse.ArgumentParser) -> None:
    for flag, name, kind, default, description in _CLUSTER_FLAGS:
        parser.add_argument(flag, dest=name, type=kind, default=None, help=f"{description} (default: {default})")
    parser.add_argument(
        "--cluster-metric", dest="cluster_metric", choices=list(CLUSTER_METRICS), default=None,
        help=f"k-means distance (default: {_TRAIN.cluster_metric})",
    )


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    _add_cluster_flags(parser)
    for flag, name, kind, default, description in _TRAIN_FLAGS + _MODEL_FLAGS:
        parser.add_argument(flag, dest=name, type=kind, default=None, help=f"{description} (default: {default})")
    for flag, name, choices, default, description in _CHOICE_FLAGS:
        parser.add_argument(flag, dest=name, choices=list(choices), default=None, help=f"{description} (default: {default})")
    parser.add_argument("--alpha1", type=float, default=None, help=f"Intra-slide loss weight (default: {_WEIGHTS.alpha1})")
    parser.add_argument("--alpha2", type=float, default=None, help=f"Inter-slide loss weight (default: {_WEIGHTS.alpha2})")
    parser.add_argument(
        "--no-wall-time", dest="record_wall_time", action="store_const", const=False, default=None,
        help="Omit wall_time from metrics logs so repeated runs are byte-identical (default: recorded)",
    )


def _add_eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--folds", type=int, default=None, help=f"Cross-validation folds (default: {_EVAL.folds})")
    parser.add_argument("--k-eval", dest="k_eval", type=int, default=None, help=f"KNN neighbours (default: {_EVAL.k_eval})")


def _override(cfg: Any, args: argparse.Namespace, names: Sequence[str]) -> Any:
    changes = {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}
    return replace(cfg, **changes) if changes else cfg


def _train_config(settings: Settings, args: argparse.Namespace) -> TrainConfig:
    base = settings.train
    names = [name for _, name, *_ in _TRAIN_FLAGS + _CLUSTER_FLAGS + _CHOICE_FLAGS]
    cfg = _override(base, args, names + ["cluster_metric", "record_wall_time", "seed"])
    weights = _override(cfg.weights, args, ("alpha1", "alpha2"))
    model = _override(cfg.model, args, [name for _, name, *_ in _MODEL_FLAGS])
    return replace(cfg, weights=weights, model=model)


def _eval_config(settings: Settings, args: argparse.Namespace) -> EvalConfig:
    return _override(settings.eval, args, ("folds", "k_eval", "seed"))


def _load_input(args: argparse.Namespace, settings: Settings) -> SlideDataset:
    checkpoint: Optional[Path] = getattr(args, "checkpoint", None)
    if checkpoint is not None and not checkpoint.exists():
        raise DatasetFileNotFoundError(f"Checkpoint not found: {checkpoint}")
    return load_dataset(args.input, workers=settings.effective_workers)


def _input_embeddings(dataset: SlideDataset, checkpoint: Optional[Path]) -> dict[str, np.ndarray]:
    if checkpoint is None:
        return {slide.slide_id: slide.features.astype(np.float64) for slide in dataset.slides}
    return embed_dataset(dataset, read_checkpoint(checkpoint).teacher.encoder)


def _require_output_directory(path: Path) -> None:
    if path.exists() and not path.is_dir():
        raise ConfigurationError(f"Output path {path} exists and is not a directory")


def _fail(code: int, exc: Exception) -> int:
    message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    print(f"error: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
