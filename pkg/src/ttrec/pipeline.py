"""End-to-end runs: generate, pretrain, adapt each variant, evaluate on the shifted split."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone, datagen, evalrank, ttt
from .backbone import PretrainConfig, RecommenderModel
from .datagen import Dataset, SyntheticConfig
from .evalrank import RankingMetrics
from .ttt import TTTConfig

logger = logging.getLogger(__name__)

PAIR_SOURCES = ("test", "train")


def adaptation_source(ds: Dataset, source: str = "test") -> tuple[np.ndarray, np.ndarray]:
    """(users, items) of the observed shifted-domain pairs fed to fusion.

    ``"test"`` uses the pairs of the held-out split itself; ``"train"`` uses
    the historical pairs only, so nothing from the evaluation split is seen.
    """
    if source not in PAIR_SOURCES:
        raise ValueError(f"unknown pair source {source!r}; expected one of {PAIR_SOURCES}")
    pairs = ds.ood.positives(source)
    if len(pairs) == 0:
        raise ValueError(f"no shifted-domain pairs in split {source!r}")
    return pairs.users, pairs.items


@dataclass
class SeedRun:
    seed: int
    metrics: dict = field(default_factory=dict)      # variant -> RankingMetrics
    history: dict = field(default_factory=dict)      # variant -> [LossBreakdown]
    reports: dict = field(default_factory=dict)      # variant -> AdaptReport

    def value(self, variant: str, metric: str, k: int) -> float:
        m: RankingMetrics = self.metrics[variant]
        return m.recall(k) if metric == "recall" else m.ndcg(k)


def prepare(seed: int, data_cfg: SyntheticConfig | None = None,
            pretrain_cfg: PretrainConfig | None = None) -> tuple[Dataset, RecommenderModel]:
    """Generate the synthetic dataset and pretrain on its in-distribution split."""
    data_cfg = replace(data_cfg or SyntheticConfig(), seed=seed)
    pretrain_cfg = replace(pretrain_cfg or PretrainConfig(), seed=seed)
    ds = datagen.generate(data_cfg)
    model, _ = backbone.pretrain(ds, pretrain_cfg)
    return ds, model


def run_variants(ds: Dataset, model: RecommenderModel, ttt_cfg: TTTConfig,
                 variants=("full", "no_SSL1", "no_SSL2"), ks=(10, 20),
                 source: str = "test") -> SeedRun:
    """Evaluate the frozen model and every requested adaptation variant."""
    inputs = backbone.dataset_inputs(ds, "ood", ("train",))
    users, items = adaptation_source(ds, source)
    run = SeedRun(ttt_cfg.seed)
    run.metrics["frozen"] = evalrank.evaluate(model, ds, "ood", ks=ks, inputs=inputs)
    for variant in variants:
        adapted, history, report = ttt.adapt(model, inputs, users, items, ttt_cfg, variant=variant)
        metrics = evalrank.evaluate(adapted, ds, "ood", ks=ks, inputs=inputs)
        report.metrics = metrics.to_dict()
        run.metrics[variant] = metrics
        run.history[variant] = history
        run.reports[variant] = report
        logger.info("seed %d %s: %s", ttt_cfg.seed, variant, metrics.per_k)
    return run


def run_seed(seed: int, ttt_cfg: TTTConfig | None = None, data_cfg: SyntheticConfig | None = None,
             pretrain_cfg: PretrainConfig | None = None, variants=("full", "no_SSL1", "no_SSL2"),
             ks=(10, 20), source: str = "test") -> SeedRun:
    ds, model = prepare(seed, data_cfg, pretrain_cfg)
    cfg = replace(ttt_cfg or TTTConfig(), seed=seed)
    return run_variants(ds, model, cfg, variants, ks, source)


def medians(runs: list[SeedRun], metric: str, k: int) -> dict:
    """Median over seeds of one metric for every arm present in all runs."""
    arms = [a for a in runs[0].metrics if all(a in r.metrics for r in runs)]
    return {a: float(np.median([r.value(a, metric, k) for r in runs])) for a in arms}
