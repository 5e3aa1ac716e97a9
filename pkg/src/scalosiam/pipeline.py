"""Train-and-evaluate runs stitched together for the repeated-run protocol."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .episodes import TrainConfig, split_classes, train
from .evaluation import (
    EvalRow,
    evaluate_baselines,
    evaluate_tasks,
    generate_tasks,
    protocol_max_mean,
    summarize,
)
from .siamese import build_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalSettings:
    n_way: int = 2
    trials: int = 400
    repetitions: int = 10


def run_once(manifest, images, architecture, model_config, train_config, n_train, settings, seed, run_dir=None):
    """Split, train from scratch, then score the model and both baselines on the same tasks."""
    split = split_classes(manifest, n_train, seed)
    model = build_model(architecture, model_config, np.random.default_rng([seed, 0]))
    tc = replace(train_config, seed=seed)
    result = train(model, manifest, split, images, tc, run_dir=run_dir)
    tasks = generate_tasks(manifest, split, images, settings.n_way, settings.trials, np.random.default_rng([seed, 3]))
    acc = evaluate_tasks(result.model, tasks)
    base = evaluate_baselines(tasks, np.random.default_rng([seed, 4]))
    log.info("run seed=%d split=%s acc=%.4f nn=%.4f random=%.4f",
             seed, split.test_classes, acc, base["nearest_neighbor"], base["random"])
    return {
        "accuracy": acc,
        "nearest_neighbor": base["nearest_neighbor"],
        "random": base["random"],
        "test_classes": split.test_classes,
        "final_loss": result.curve.mean_loss[-1],
        "first_loss": result.curve.mean_loss[0],
    }


def run_protocol(manifest, images, architecture, model_config, train_config, n_train, settings, seed=0):
    """Repeated train/eval runs; one :class:`EvalRow` each for the model and the two baselines."""
    record = []

    def runner(i, rep_seed):
        return run_once(manifest, images, architecture, model_config, train_config, n_train, settings, rep_seed)

    best, mean = protocol_max_mean(runner, settings.repetitions, seed, record)
    n_test = len(manifest.classes) - n_train
    rep = train_config.representation
    rows = [EvalRow(n_train, n_test, rep, architecture, best, mean, settings.repetitions, settings.trials)]
    for name in ("nearest_neighbor", "random"):
        b_max, b_mean = summarize([r[name] for r in record])
        rows.append(EvalRow(n_train, n_test, rep, name, b_max, b_mean, settings.repetitions, settings.trials))
    return rows, record
