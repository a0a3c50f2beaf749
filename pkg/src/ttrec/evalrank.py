"""All-ranking evaluation: Recall@K and NDCG@K over every item a user has
not interacted with in the history splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import EncoderInputs, RecommenderModel, dataset_inputs, score_matrix
from .datagen import Dataset


@dataclass
class RankingMetrics:
    per_k: dict = field(default_factory=dict)
    users_evaluated: int = 0

    def recall(self, k: int) -> float:
        return self.per_k[k][0]

    def ndcg(self, k: int) -> float:
        return self.per_k[k][1]

    def to_dict(self, split: str = "test_ood") -> dict:
        out = {}
        for k, (rec, ndcg) in sorted(self.per_k.items()):
            out[str(k)] = {"recall": rec, "ndcg": ndcg,
                           "recall_pct": 100.0 * rec, "ndcg_pct": 100.0 * ndcg}
        out["users"] = self.users_evaluated
        out["split"] = split
        return out

    def to_json(self, split: str = "test_ood") -> str:
        return json.dumps(self.to_dict(split), indent=2, sort_keys=True) + "\n"


def rank_scores(scores, exclude=()) -> np.ndarray:
    """Item ids not in ``exclude``, by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(scores.size, dtype=bool)
    keep[np.asarray(list(exclude), dtype=np.int64)] = False
    if not keep.any():
        raise ValueError("exclude set covers every item; nothing to rank")
    cand = np.flatnonzero(keep)
    return cand[np.argsort(-scores[cand], kind="stable")]


def rank_items(model: RecommenderModel, inputs: EncoderInputs, user: int, exclude=()) -> np.ndarray:
    e_u = model.encode("f", inputs.user_in[[user]])[0][0]
    e_i = model.encode("g", inputs.item_in)[0]
    return rank_scores(e_i @ e_u, exclude)


def recall_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("empty relevant set")
    hits = sum(1 for item in list(ranked)[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("empty relevant set")
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(list(ranked)[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


def evaluate_scores(scores: np.ndarray, exclude: np.ndarray, relevant: np.ndarray,
                    ks=(10, 20)) -> RankingMetrics:
    """Metrics from a user-by-item score matrix and boolean masks.

    Users without relevant items are skipped; averages run in user-id order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    exclude = np.asarray(exclude, dtype=bool)
    relevant = np.asarray(relevant, dtype=bool) & ~exclude
    ks = sorted(int(k) for k in ks)
    if not ks or ks[0] < 1:
        raise ValueError("Ks must be positive integers")
    users = np.flatnonzero(relevant.any(axis=1))
    if users.size == 0:
        raise ValueError("no evaluable users: every user has zero relevant items")
    masked = np.where(exclude[users], np.inf, -scores[users])
    order = np.argsort(masked, axis=1, kind="stable")
    n_cand = (~exclude[users]).sum(axis=1)
    if np.any(n_cand == 0):
        raise ValueError("exclude set covers every item for some user")
    kmax = ks[-1]
    top = order[:, :kmax]
    hit = np.take_along_axis(relevant[users], top, axis=1)
    hit &= np.arange(top.shape[1])[None, :] < n_cand[:, None]
    n_rel = relevant[users].sum(axis=1)
    # cumulative sums run strictly left to right, so results match a per-user loop bit for bit
    width = top.shape[1]
    discount = np.array([1.0 / math.log2(r + 2) for r in range(max(width, kmax))])
    ideal_cum = np.cumsum(discount)
    hit_cum = np.cumsum(hit, axis=1)
    dcg_cum = np.cumsum(np.where(hit, discount[:width], 0.0), axis=1)
    out = RankingMetrics(users_evaluated=int(users.size))
    for k in ks:
        col = min(k, width) - 1
        recall = hit_cum[:, col] / n_rel
        ndcg = dcg_cum[:, col] / ideal_cum[np.minimum(k, n_rel) - 1]
        out.per_k[k] = (_ordered_mean(recall), _ordered_mean(ndcg))
    return out


def _ordered_mean(values: np.ndarray) -> float:
    return float(np.cumsum(values)[-1] / values.size)


def evaluate(model: RecommenderModel, ds: Dataset, partition: str = "ood", split: str = "test",
             ks=(10, 20), inputs: EncoderInputs | None = None) -> RankingMetrics:
    """All-ranking metrics on ``split`` of ``partition``.

    History inputs come from the train split; the exclude set is the user's
    train positives (plus valid positives when evaluating the test split).
    """
    inter = ds.interactions(partition)
    if inputs is None:
        inputs = dataset_inputs(ds, partition, ("train",))
    excl_splits = ("train",) if split == "valid" else ("train", "valid")
    exclude = inter.positives(*excl_splits).matrix(ds.n_users, ds.n_items) > 0
    relevant = inter.positives(split).matrix(ds.n_users, ds.n_items) > 0
    if not relevant.any():
        raise ValueError(f"{partition} {split} split has no positives")
    return evaluate_scores(score_matrix(model, inputs), exclude, relevant, ks)
