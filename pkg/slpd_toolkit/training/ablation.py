"""Ablation harness: named configuration variants trained and evaluated side by side."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence
import logging

from ..analysis.evaluation import EvalReport, cross_validated_eval
from ..config import EvalConfig, LossWeights, TrainConfig
from ..errors import ConfigurationError
from ..io.embedding_store import SlideDataset
from ..io.reports import write_json
from .trainer import train

_LOGGER = logging.getLogger(__name__)

AXES = ("preset", "clustering", "inter", "M", "K")
PRESETS = ("dino", "dino_intra", "dino_inter", "slpd")
SUMMARY_NAME = "summary.json"


@dataclass(frozen=True)
class AblationVariant:
    name: str
    axis: str
    config: TrainConfig


@dataclass(frozen=True)
class AblationOutcome:
    variant: AblationVariant
    metrics: list[Dict[str, Any]]
    report: Optional[EvalReport]

    def summary(self) -> Dict[str, Any]:
        final = self.metrics[-1] if self.metrics else {}
        return {
            "name": self.variant.name,
            "axis": self.variant.axis,
            "M": self.variant.config.M,
            "K": self.variant.config.K,
            "intra_mode": self.variant.config.intra_mode,
            "inter_mode": self.variant.config.inter_mode,
            "final_loss_total": final.get("loss_total"),
            "final_compactness": final.get("compactness"),
            "accuracy": None if self.report is None else self.report.accuracy,
            "auc": None if self.report is None else self.report.auc,
        }


def preset(name: str, base: TrainConfig) -> TrainConfig:
    """Loss presets: plain self-distillation, either prototype term alone, or the full objective."""

    if name == "dino":
        return replace(base, intra_mode="off", inter_mode="off", weights=LossWeights(alpha1=0.0, alpha2=0.0))
    if name == "dino_intra":
        return replace(base, intra_mode="slide", inter_mode="off", weights=replace(base.weights, alpha2=0.0))
    if name == "dino_inter":
        return replace(base, intra_mode="off", inter_mode="prototype", weights=replace(base.weights, alpha1=0.0))
    if name == "slpd":
        return replace(base, intra_mode="slide", inter_mode="prototype")
    raise ConfigurationError(f"Unknown preset: {name}")


def ablation_grid(base: TrainConfig, axes: Sequence[str] = AXES) -> list[AblationVariant]:
    """Every variant along the requested axes, each differing from ``base`` in one switch."""

    unknown = sorted(set(axes) - set(AXES))
    if unknown:
        raise ConfigurationError(f"Unknown ablation axes: {', '.join(unknown)}")
    slpd = preset("slpd", base)
    variants: list[AblationVariant] = []
    if "preset" in axes:
        variants.extend(AblationVariant(f"preset-{name}", "preset", preset(name, base)) for name in PRESETS)
    if "clustering" in axes:
        variants.extend(
            AblationVariant(f"clustering-{mode}", "clustering", replace(slpd, intra_mode=mode))
            for mode in ("global", "slide")
        )
    if "inter" in axes:
        variants.extend(
            AblationVariant(f"inter-{mode}", "inter", replace(slpd, inter_mode=mode)) for mode in ("region", "prototype")
        )
    if "M" in axes:
        variants.extend(AblationVariant(f"M-{M}", "M", replace(slpd, M=M)) for M in (2, 3, 4))
    if "K" in axes:
        variants.extend(AblationVariant(f"K-{K}", "K", replace(slpd, K=K)) for K in (1, 2, 3))
    return variants


def run_ablations(
    dataset: SlideDataset,
    base: TrainConfig,
    eval_cfg: EvalConfig,
    output_dir: Path,
    *,
    variants: Optional[Iterable[AblationVariant]] = None,
    workers: int = 1,
) -> list[AblationOutcome]:
    """Train and evaluate each variant; one metrics log per variant plus ``summary.json``."""

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    evaluable = all(label is not None for label in dataset.labels())
    if not evaluable:
        _LOGGER.warning("Dataset has unlabelled slides; ablations report training metrics only")

    outcomes: list[AblationOutcome] = []
    for variant in ablation_grid(base) if variants is None else variants:
        _LOGGER.info("Ablation %s", variant.name)
        result = train(
            dataset,
            variant.config,
            workers=workers,
            metrics_path=output_dir / f"{variant.name}.metrics.jsonl",
        )
        report = None
        if evaluable:
            report = cross_validated_eval(dataset, result.state, eval_cfg.folds, eval_cfg.k_eval, eval_cfg.seed)
        outcomes.append(AblationOutcome(variant=variant, metrics=result.metrics, report=report))

    write_json(output_dir / SUMMARY_NAME, [outcome.summary() for outcome in outcomes])
    return outcomes


__all__ = [
    "AXES",
    "PRESETS",
    "AblationVariant",
    "AblationOutcome",
    "preset",
    "ablation_grid",
    "run_ablations",
]
