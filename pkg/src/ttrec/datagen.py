"""Synthetic out-of-distribution benchmark, dataset files and splitting.

The generator follows a four-step recipe: Gaussian user and item features,
a sigmoid user preference built from a signed feature sum, Bernoulli
interactions whose probability combines user preference and item score, and
an OOD copy where only the user features are redrawn from a shifted mean.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStreams, sample_bernoulli, sample_gaussian, sigmoid

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
_SPLIT_CODE = {name: code for code, name in enumerate(SPLITS)}
UNSPLIT = -1
POSITIVE_RATING = 4.0


class DatasetFormatError(ValueError):
    """Raised for a malformed or inconsistent dataset directory."""


@dataclass
class SyntheticConfig:
    n_users: int = 1000
    n_items: int = 1000
    feature_dim: int = 16
    iid_user_mean: float = 0.0
    ood_user_mean: float = 1.0
    item_mean: float = -1.0
    feature_std: float = 1.0
    preference_weight_signs: list | None = None
    interaction_scale: float = 8.0
    interaction_bias: float | None = None
    target_density: float = 0.2576
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "feature_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.feature_std > 0:
            raise ValueError("feature_std must be positive")
        if not 0.0 < self.target_density < 1.0:
            raise ValueError("target_density must lie in (0, 1)")
        if self.preference_weight_signs is not None:
            signs = [int(s) for s in self.preference_weight_signs]
            if len(signs) != self.feature_dim or any(s not in (-1, 1) for s in signs):
                raise ValueError("preference_weight_signs must be feature_dim entries of +1/-1")
            self.preference_weight_signs = signs

    def signs(self) -> np.ndarray:
        if self.preference_weight_signs is not None:
            return np.asarray(self.preference_weight_signs, dtype=np.float64)
        half = self.feature_dim // 2
        return np.concatenate([np.ones(self.feature_dim - half), -np.ones(half)])


@dataclass
class InteractionSet:
    """Parallel arrays of (user, item, label) triples plus a split code per row."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    split: np.ndarray | None = None
    partition: str = "iid"

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.split is None:
            self.split = np.full(self.users.shape, UNSPLIT, dtype=np.int8)
        self.split = np.asarray(self.split, dtype=np.int8)
        n = self.users.shape[0]
        if not (self.items.shape[0] == self.labels.shape[0] == self.split.shape[0] == n):
            raise ValueError("interaction arrays must have equal length")

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.labels.tolist()))

    def select(self, mask) -> "InteractionSet":
        return InteractionSet(self.users[mask], self.items[mask], self.labels[mask],
                              self.split[mask], self.partition)

    def subset(self, *splits: str) -> "InteractionSet":
        codes = [_SPLIT_CODE[s] for s in splits]
        return self.select(np.isin(self.split, codes))

    def positives(self, *splits: str) -> "InteractionSet":
        sub = self.subset(*splits) if splits else self
        return sub.select(sub.labels == 1)

    def matrix(self, n_users: int, n_items: int) -> np.ndarray:
        """Dense binary user-by-item matrix of the positive triples."""
        out = np.zeros((n_users, n_items))
        pos = self.labels == 1
        out[self.users[pos], self.items[pos]] = 1.0
        return out

    def density(self, n_users: int, n_items: int) -> float:
        return float((self.labels == 1).sum()) / (n_users * n_items)

    def validate(self, n_users: int, n_items: int) -> None:
        if len(self) and (self.users.min() < 0 or self.users.max() >= n_users):
            raise ValueError("user id out of range")
        if len(self) and (self.items.min() < 0 or self.items.max() >= n_items):
            raise ValueError("item id out of range")
        keys = self.users * n_items + self.items
        if np.unique(keys).size != keys.size:
            raise ValueError(f"duplicate (user, item) pair in partition {self.partition}")


@dataclass
class Dataset:
    n_users: int
    n_items: int
    feature_dim: int
    seed: int
    user_features: np.ndarray
    item_features: np.ndarray
    iid: InteractionSet
    user_features_ood: np.ndarray | None = None
    ood: InteractionSet | None = None
    extra: dict = field(default_factory=dict)

    def user_features_for(self, partition: str) -> np.ndarray:
        if partition == "ood":
            if self.user_features_ood is None:
                raise ValueError("dataset has no OOD user features")
            return self.user_features_ood
        return self.user_features

    def interactions(self, partition: str) -> InteractionSet:
        out = self.ood if partition == "ood" else self.iid
        if out is None:
            raise ValueError(f"dataset has no {partition} interactions")
        return out


# --- generation -----------------------------------------------------------

def sample_features(cfg: SyntheticConfig, rng: np.random.Generator):
    """Draw user and item feature matrices for the in-distribution world."""
    users = sample_gaussian(rng, cfg.iid_user_mean, cfg.feature_std, (cfg.n_users, cfg.feature_dim))
    items = sample_gaussian(rng, cfg.item_mean, cfg.feature_std, (cfg.n_items, cfg.feature_dim))
    return users, items


def compute_preferences(users: np.ndarray, signs) -> np.ndarray:
    """sigmoid of the signed feature sum, one value per row."""
    users = np.asarray(users, dtype=np.float64)
    signs = np.asarray(signs, dtype=np.float64)
    if users.ndim != 2 or signs.shape != (users.shape[1],):
        raise ValueError(
            f"sign vector of length {signs.size} does not match feature_dim {users.shape[-1]}"
        )
    return sigmoid(users @ signs)


def item_scores(items: np.ndarray, signs) -> np.ndarray:
    return compute_preferences(items, signs)


def interaction_logits(prefs, scores, scale: float) -> np.ndarray:
    return scale * np.outer(prefs, scores)


def calibrate_bias(logits: np.ndarray, target: float, iters: int = 60) -> float:
    """Bias b such that mean(sigmoid(logits + b)) equals ``target`` (bisection)."""
    lo, hi = -60.0, 60.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if sigmoid(logits + mid).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_interactions(prefs, items: np.ndarray, cfg: SyntheticConfig,
                        rng: np.random.Generator, bias: float | None = None,
                        partition: str = "iid") -> InteractionSet:
    """Bernoulli interactions for every user-item pair; keeps the positive ones."""
    prefs = np.asarray(prefs, dtype=np.float64)
    if items.shape[1] != cfg.feature_dim:
        raise ValueError("item feature dimension mismatch")
    logits = interaction_logits(prefs, item_scores(items, cfg.signs()), cfg.interaction_scale)
    if bias is None:
        bias = resolve_bias(logits, cfg)
    draws = sample_bernoulli(rng, sigmoid(logits + bias))
    users, item_ids = np.nonzero(draws)
    out = InteractionSet(users, item_ids, np.ones(users.size), partition=partition)
    logger.info("%s interactions: %d (density %.6f, bias %.6f)", partition, len(out),
                out.density(prefs.size, items.shape[0]), bias)
    return out


def resolve_bias(logits: np.ndarray, cfg: SyntheticConfig) -> float:
    if cfg.interaction_bias is not None:
        return float(cfg.interaction_bias)
    return calibrate_bias(logits, cfg.target_density)


def generate_ood(cfg: SyntheticConfig, rng: np.random.Generator, items: np.ndarray,
                 bias: float):
    """Redraw user features at the shifted mean and resample interactions.

    Item features are passed through untouched.
    """
    users = sample_gaussian(rng, cfg.ood_user_mean, cfg.feature_std, (cfg.n_users, cfg.feature_dim))
    prefs = compute_preferences(users, cfg.signs())
    ood = sample_interactions(prefs, items, cfg, rng, bias=bias, partition="ood")
    return users, ood


def generate(cfg: SyntheticConfig) -> Dataset:
    """Full pipeline: IID world, OOD world, and 80/10/10 splits of both."""
    streams = RngStreams(cfg.seed)
    rng = streams.stream("datagen")
    users, items = sample_features(cfg, rng)
    prefs = compute_preferences(users, cfg.signs())
    logits = interaction_logits(prefs, item_scores(items, cfg.signs()), cfg.interaction_scale)
    bias = resolve_bias(logits, cfg)
    iid = sample_interactions(prefs, items, cfg, rng, bias=bias, partition="iid")
    ood_users, ood = generate_ood(cfg, streams.stream("datagen_ood"), items, bias)
    iid = split(iid, rng=streams.stream("split_iid"))
    ood = split(ood, rng=streams.stream("split_ood"))
    return Dataset(cfg.n_users, cfg.n_items, cfg.feature_dim, cfg.seed, users, items, iid,
                   ood_users, ood, extra={"interaction_bias": bias})


# --- splitting --------------------------------------------------------------

def _allocate(n: int, ratios, at_least_one: bool) -> tuple[int, int, int]:
    n_valid = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    if at_least_one:
        n_valid, n_test = max(1, n_valid), max(1, n_test)
    n_train = n - n_valid - n_test
    return n_train, n_valid, n_test


def split(interactions: InteractionSet, ratios=(0.8, 0.1, 0.1),
          rng: np.random.Generator | None = None, seed: int = 0) -> InteractionSet:
    """Assign every triple to train/valid/test.

    Positives of users with at least three of them are split per user; every
    other triple goes through one pooled split with the same ratios.
    """
    if len(interactions) == 0:
        raise ValueError("cannot split an empty interaction set")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    codes = np.full(len(interactions), UNSPLIT, dtype=np.int8)

    pos_idx = np.flatnonzero(interactions.labels == 1)
    users = interactions.users[pos_idx]
    order = np.argsort(users, kind="stable")
    pos_idx, users = pos_idx[order], users[order]
    uniq, starts, counts = np.unique(users, return_index=True, return_counts=True)
    pooled = [np.flatnonzero(interactions.labels != 1)]
    for start, count in zip(starts, counts):
        rows = pos_idx[start:start + count]
        if count < 3:
            pooled.append(rows)
            continue
        rows = rows[rng.permutation(count)]
        n_train, n_valid, _ = _allocate(count, ratios, at_least_one=True)
        codes[rows[:n_train]] = 0
        codes[rows[n_train:n_train + n_valid]] = 1
        codes[rows[n_train + n_valid:]] = 2

    rest = np.sort(np.concatenate(pooled))
    if rest.size:
        rest = rest[rng.permutation(rest.size)]
        n_train, n_valid, _ = _allocate(rest.size, ratios, at_least_one=False)
        codes[rest[:n_train]] = 0
        codes[rest[n_train:n_train + n_valid]] = 1
        codes[rest[n_train + n_valid:]] = 2
    return InteractionSet(interactions.users, interactions.items, interactions.labels,
                          codes, interactions.partition)


def from_ratings(users, items, ratings, partition: str = "iid",
                 threshold: float = POSITIVE_RATING) -> InteractionSet:
    """Binarize explicit ratings: rating >= threshold becomes label 1."""
    ratings = np.asarray(ratings, dtype=np.float64)
    return InteractionSet(users, items, (ratings >= threshold).astype(np.int8), partition=partition)


# --- files ------------------------------------------------------------------

def _write_features(path: Path, values: np.ndarray) -> None:
    d = values.shape[1]
    lines = ["id," + ",".join(f"f{j}" for j in range(d))]
    for i, row in enumerate(values):
        lines.append(str(i) + "," + ",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _write_interactions(path: Path, inter: InteractionSet) -> None:
    lines = ["user,item,label,split"]
    names = {UNSPLIT: "", **{c: n for n, c in _SPLIT_CODE.items()}}
    for u, i, y, s in zip(inter.users.tolist(), inter.items.tolist(),
                          inter.labels.tolist(), inter.split.tolist()):
        lines.append(f"{u},{i},{y},{names[s]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"n_users": ds.n_users, "n_items": ds.n_items,
            "feature_dim": ds.feature_dim, "seed": ds.seed}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    _write_features(directory / "user_features.csv", ds.user_features)
    _write_features(directory / "item_features.csv", ds.item_features)
    _write_interactions(directory / "interactions_iid.csv", ds.iid)
    if ds.user_features_ood is not None:
        _write_features(directory / "user_features_ood.csv", ds.user_features_ood)
    if ds.ood is not None:
        _write_interactions(directory / "interactions_ood.csv", ds.ood)
    return directory


def _open(path: Path):
    if not path.exists():
        raise DatasetFormatError(f"missing dataset file: {path.name}")
    return open(path, encoding="utf-8", newline="")


def _read_features(path: Path, n_rows: int, dim: int) -> np.ndarray:
    out = np.empty((n_rows, dim))
    seen = np.zeros(n_rows, dtype=bool)
    with _open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["id"] + [f"f{j}" for j in range(dim)]
        if header != expected:
            raise DatasetFormatError(f"{path.name}:1: expected header {','.join(expected)}")
        count = 0
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise DatasetFormatError(f"{path.name}:{lineno}: expected {dim + 1} fields, got {len(row)}")
            try:
                idx = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: {exc}") from None
            if not 0 <= idx < n_rows:
                raise DatasetFormatError(
                    f"{path.name}:{lineno}: id {idx} outside [0, {n_rows}) declared in meta.json")
            if not np.all(np.isfinite(vals)):
                raise DatasetFormatError(f"{path.name}:{lineno}: non-finite feature value")
            out[idx] = vals
            seen[idx] = True
            count += 1
    if count != n_rows or not seen.all():
        raise DatasetFormatError(
            f"{path.name}: {count} rows but meta.json declares {n_rows}")
    return out


def _read_interactions(path: Path, partition: str, n_users: int, n_items: int) -> InteractionSet:
    users, items, labels, splits = [], [], [], []
    codes = {"": UNSPLIT, **_SPLIT_CODE}
    with _open(path) as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["user", "item", "label", "split"]:
            raise DatasetFormatError(f"{path.name}:1: expected header user,item,label,split")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DatasetFormatError(f"{path.name}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                u, i, y = int(row[0]), int(row[1]), int(row[2])
            except ValueError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: {exc}") from None
            if row[3] not in codes:
                raise DatasetFormatError(f"{path.name}:{lineno}: unknown split {row[3]!r}")
            if y not in (0, 1):
                raise DatasetFormatError(f"{path.name}:{lineno}: label must be 0 or 1")
            if not (0 <= u < n_users and 0 <= i < n_items):
                raise DatasetFormatError(f"{path.name}:{lineno}: id out of range")
            users.append(u)
            items.append(i)
            labels.append(y)
            splits.append(codes[row[3]])
    inter = InteractionSet(users, items, labels, splits, partition)
    try:
        inter.validate(n_users, n_items)
    except ValueError as exc:
        raise DatasetFormatError(f"{path.name}: {exc}") from None
    return inter


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DatasetFormatError(f"missing dataset file: meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        n_users, n_items, dim = int(meta["n_users"]), int(meta["n_items"]), int(meta["feature_dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"meta.json: {exc}") from None
    users = _read_features(directory / "user_features.csv", n_users, dim)
    items = _read_features(directory / "item_features.csv", n_items, dim)
    iid = _read_interactions(directory / "interactions_iid.csv", "iid", n_users, n_items)
    ood_users = ood = None
    if (directory / "user_features_ood.csv").exists():
        ood_users = _read_features(directory / "user_features_ood.csv", n_users, dim)
    if (directory / "interactions_ood.csv").exists():
        ood = _read_interactions(directory / "interactions_ood.csv", "ood", n_users, n_items)
    return Dataset(n_users, n_items, dim, int(meta.get("seed", 0)), users, items, iid,
                   ood_users, ood)


def config_from_dict(values: dict) -> SyntheticConfig:
    known = set(SyntheticConfig.__dataclass_fields__)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown datagen config key: {unknown[0]}")
    return SyntheticConfig(**values)


def config_to_dict(cfg: SyntheticConfig) -> dict:
    return asdict(cfg)
