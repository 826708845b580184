"""Desk-scale experiment: synthetic slides, SLPD training and KNN evaluation via the package API."""
from __future__ import annotations

import logging
import sys

from slpd_toolkit.analysis.evaluation import cross_validated_eval
from slpd_toolkit.config import load_settings
from slpd_toolkit.generation.synthetic import generate_from_config
from slpd_toolkit.training.distill import init_state
from slpd_toolkit.training.trainer import TrainingStreams, train


def main() -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    settings = load_settings()
    dataset = generate_from_config(settings.synthetic)
    cfg = settings.train
    folds, k_eval, seed = settings.eval.folds, settings.eval.k_eval, settings.eval.seed

    initial = init_state(cfg.model, dataset.d_in, TrainingStreams.from_seed(cfg.seed).init)
    before = cross_validated_eval(dataset, initial, folds, k_eval, seed)
    result = train(dataset, cfg, workers=settings.effective_workers)
    after = cross_validated_eval(dataset, result.state, folds, k_eval, seed)

    if result.metrics:
        first, last = result.metrics[0], result.metrics[-1]
        print(f"compactness: {first['compactness']:.4f} -> {last['compactness']:.4f}")
    print(f"KNN accuracy: {before.accuracy:.3f} (random encoder) -> {after.accuracy:.3f} (trained teacher)")
    print(f"KNN AUC:      {before.auc:.3f} -> {after.auc:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
