"""Feature-plus-history recommender: user/item MLP encoders, a fusion MLP,
dot-product scoring, manual backpropagation, Adam and supervised pretraining.

Parameters live in one ordered ``dict`` of float64 arrays so they can be
flattened for finite-difference checks and serialized for checkpoints.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset, InteractionSet
from .numerics import RngStreams, log_softmax, softmax

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ttrec-checkpoint"
CHECKPOINT_VERSION = 1
SELECTORS = ("ce", "ld", "lp", "ln", "lc", "total")


@dataclass
class ModelConfig:
    n_users: int
    n_items: int
    feature_dim: int
    hidden: int = 128
    embed_dim: int = 64
    fusion_hidden: tuple = (128,)
    dropout: float = 0.5
    use_bias: bool = True

    def __post_init__(self):
        self.fusion_hidden = tuple(int(h) for h in self.fusion_hidden)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def layer_sizes(self) -> dict[str, list[int]]:
        d = self.embed_dim
        return {
            "f": [self.feature_dim + self.n_items, self.hidden, d],
            "g": [self.feature_dim + self.n_users, self.hidden, d],
            "gamma": [2 * d, *self.fusion_hidden, d],
        }

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class EncoderInputs:
    """Encoder input rows: features concatenated with L2-normalized history."""

    user_in: np.ndarray
    item_in: np.ndarray


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


def build_inputs(user_features: np.ndarray, item_features: np.ndarray,
                 history) -> EncoderInputs:
    """Stack features with history rows; ``history`` is an InteractionSet or a
    dense user-by-item 0/1 matrix. Cold users or items get a zero history row."""
    n_users, n_items = user_features.shape[0], item_features.shape[0]
    if isinstance(history, InteractionSet):
        hist = history.matrix(n_users, n_items)
    else:
        hist = np.asarray(history, dtype=np.float64)
    if hist.shape != (n_users, n_items):
        raise ValueError(f"history shape {hist.shape} != ({n_users}, {n_items})")
    return EncoderInputs(
        np.hstack([user_features, normalize_rows(hist)]),
        np.hstack([item_features, normalize_rows(hist.T.copy())]),
    )


def dataset_inputs(ds: Dataset, partition: str, splits=("train",)) -> EncoderInputs:
    hist = ds.interactions(partition).positives(*splits)
    return build_inputs(ds.user_features_for(partition), ds.item_features, hist)


# --- MLP primitives ---------------------------------------------------------

def _mlp_forward(params, prefix, n_layers, x, use_bias):
    acts = [x]
    h = x
    for layer in range(n_layers):
        z = h @ params[f"{prefix}.W{layer}"]
        if use_bias:
            z = z + params[f"{prefix}.b{layer}"]
        h = np.tanh(z) if layer < n_layers - 1 else z
        acts.append(h)
    return h, acts


def _mlp_backward(params, prefix, n_layers, acts, dout, grads, use_bias, need_dx=False):
    d = dout
    for layer in reversed(range(n_layers)):
        if layer < n_layers - 1:
            d = d * (1.0 - acts[layer + 1] ** 2)
        grads[f"{prefix}.W{layer}"] += acts[layer].T @ d
        if use_bias:
            grads[f"{prefix}.b{layer}"] += d.sum(axis=0)
        if layer > 0 or need_dx:
            d = d @ params[f"{prefix}.W{layer}"].T
    return d if need_dx else None


class RecommenderModel:
    """User encoder ``f``, item encoder ``g`` and fusion network ``gamma``."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.sizes = cfg.layer_sizes()
        if params is None:
            params = self._init_params(RngStreams(seed).stream("init"))
        self.params = params

    def _init_params(self, rng):
        params = {}
        for net, sizes in self.sizes.items():
            for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                params[f"{net}.W{layer}"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, fan_out))
                if self.cfg.use_bias:
                    params[f"{net}.b{layer}"] = np.zeros(fan_out)
        return params

    def n_layers(self, net: str) -> int:
        return len(self.sizes[net]) - 1

    def copy(self) -> "RecommenderModel":
        return RecommenderModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, theta: np.ndarray) -> None:
        offset = 0
        for key, value in self.params.items():
            n = value.size
            self.params[key] = np.asarray(theta[offset:offset + n], dtype=np.float64).reshape(value.shape).copy()
            offset += n

    def check_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    # forward passes

    def _check_inputs(self, rows: np.ndarray, net: str) -> None:
        expected = self.sizes[net][0]
        if rows.shape[-1] != expected:
            raise ValueError(f"encoder {net} expects {expected} input columns, got {rows.shape[-1]}")

    def encode(self, net: str, rows: np.ndarray, dropout_rng=None):
        """Run encoder ``net`` on input rows; returns (embeddings, cache)."""
        self._check_inputs(rows, net)
        mask = None
        x = rows
        if dropout_rng is not None and self.cfg.dropout > 0:
            keep = 1.0 - self.cfg.dropout
            mask = (dropout_rng.random(rows.shape) < keep) / keep
            x = rows * mask
        out, acts = _mlp_forward(self.params, net, self.n_layers(net), x, self.cfg.use_bias)
        return out, acts

    def fuse_with_cache(self, e_users: np.ndarray, e_items: np.ndarray):
        if e_users.shape[0] != e_items.shape[0]:
            raise ValueError(f"row mismatch: {e_users.shape[0]} user rows vs {e_items.shape[0]} item rows")
        z = np.hstack([e_users, e_items])
        return _mlp_forward(self.params, "gamma", self.n_layers("gamma"), z, self.cfg.use_bias)

    def backward(self, net: str, acts, dout, grads, need_dx=False):
        return _mlp_backward(self.params, net, self.n_layers(net), acts, dout, grads,
                             self.cfg.use_bias, need_dx)


def encode_users(model: RecommenderModel, inputs: EncoderInputs, idx=None) -> np.ndarray:
    rows = inputs.user_in if idx is None else inputs.user_in[idx]
    return model.encode("f", rows)[0]


def encode_items(model: RecommenderModel, inputs: EncoderInputs, idx=None) -> np.ndarray:
    rows = inputs.item_in if idx is None else inputs.item_in[idx]
    return model.encode("g", rows)[0]


def fuse(model: RecommenderModel, e_users: np.ndarray, e_items: np.ndarray) -> np.ndarray:
    """gamma(E_u concatenated with E_i), row-aligned pairs."""
    return model.fuse_with_cache(e_users, e_items)[0]


def score(model: RecommenderModel, inputs: EncoderInputs, user: int, items) -> np.ndarray:
    """Dot-product logits of one user against candidate items."""
    items = np.asarray(items, dtype=np.int64)
    if items.size == 0:
        raise ValueError("empty candidate set")
    e_u = encode_users(model, inputs, [user])[0]
    return encode_items(model, inputs, items) @ e_u


def score_matrix(model: RecommenderModel, inputs: EncoderInputs) -> np.ndarray:
    """All-user by all-item logits in eval mode."""
    return encode_users(model, inputs) @ encode_items(model, inputs).T


def predict(model: RecommenderModel, inputs: EncoderInputs, user: int, items) -> np.ndarray:
    return softmax(score(model, inputs, user, items))


# --- cross-entropy ----------------------------------------------------------

def scatter_rows(inverse: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """Sum ``rows`` into ``n`` buckets given by ``inverse`` (a one-hot matmul)."""
    onehot = np.zeros((n, inverse.size))
    onehot[inverse, np.arange(inverse.size)] = 1.0
    return onehot @ rows


def ce_from_logits(logits: np.ndarray, pos_col: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of -log softmax(logits)[pos]; returns (loss, dloss/dlogits)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    pos_col = np.asarray(pos_col, dtype=np.int64)
    b = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -float(logp[np.arange(b), pos_col].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(b), pos_col] -= 1.0
    return loss, dlogits / b


def candidate_positions(positives: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    hits = candidates == positives[:, None]
    if not hits.any(axis=1).all():
        row = int(np.flatnonzero(~hits.any(axis=1))[0])
        raise ValueError(f"positive item {positives[row]} absent from candidate set of row {row}")
    return hits.argmax(axis=1)


def sample_candidates(rng, positives: np.ndarray, n_items: int, n_neg: int,
                      shared: bool = True) -> np.ndarray:
    """Candidate rows: the positive in column 0, then ``n_neg`` uniform negatives.

    With ``shared=True`` one negative draw serves the whole batch, taken
    without replacement from items that are not a positive of any row, which
    keeps the number of distinct items per step small.
    """
    if shared:
        pool = np.setdiff1d(np.arange(n_items), positives)
        if pool.size == 0:
            raise ValueError("no items left to sample negatives from")
        negs = rng.choice(pool, size=min(n_neg, pool.size), replace=False)
        return np.hstack([positives[:, None], np.broadcast_to(negs, (positives.size, negs.size))])
    negs = rng.integers(0, n_items - 1, size=(positives.size, n_neg))
    negs = negs + (negs >= positives[:, None])
    return np.hstack([positives[:, None], negs])


def ce_loss(model, inputs, users, positives, candidates=None) -> float:
    """Cross-entropy of the positives against their candidate sets (eval mode).

    ``candidates=None`` means the full item catalogue.
    """
    return _ce(model, inputs, users, positives, candidates, need_grads=False)[0]


def _ce(model, inputs, users, positives, candidates, need_grads=True, dropout_rng=None):
    users = np.asarray(users, dtype=np.int64)
    positives = np.asarray(positives, dtype=np.int64)
    uniq_u, inv_u = np.unique(users, return_inverse=True)
    e_u, acts_f = model.encode("f", inputs.user_in[uniq_u], dropout_rng)
    if candidates is None:
        item_idx = np.arange(inputs.item_in.shape[0])
        pos_col = positives
    else:
        candidates = np.asarray(candidates, dtype=np.int64)
        pos_col = candidate_positions(positives, candidates)
        item_idx, cand_local = np.unique(candidates, return_inverse=True)
        cand_local = cand_local.reshape(candidates.shape)
    e_i, acts_g = model.encode("g", inputs.item_in[item_idx], dropout_rng)
    eu_rows = e_u[inv_u]
    full = eu_rows @ e_i.T
    b = users.size
    if candidates is None:
        logits = full
    else:
        logits = np.take_along_axis(full, cand_local, axis=1)
    loss, dlogits = ce_from_logits(logits, pos_col)
    if not need_grads:
        return loss, None
    grads = model.zero_grads()
    if candidates is None:
        d_full = dlogits
    else:
        flat = (np.arange(b)[:, None] * item_idx.size + cand_local).ravel()
        d_full = np.bincount(flat, weights=dlogits.ravel(),
                             minlength=b * item_idx.size).reshape(b, item_idx.size)
    d_eu = scatter_rows(inv_u, d_full @ e_i, uniq_u.size)
    d_ei = d_full.T @ eu_rows
    model.backward("f", acts_f, d_eu, grads)
    model.backward("g", acts_g, d_ei, grads)
    return loss, grads


def ce_gradient_wrt_logits(probs: np.ndarray, true_index: int) -> np.ndarray:
    """Closed-form gradient of -log softmax(g)[c]: probs minus the one-hot of c."""
    grad = np.array(probs, dtype=np.float64)
    grad[true_index] -= 1.0
    return grad


@dataclass
class CEBatch:
    users: np.ndarray
    positives: np.ndarray
    candidates: np.ndarray | None = None


def analytic_gradients(selector: str, batch, model: RecommenderModel,
                       inputs: EncoderInputs, **kwargs):
    """Loss value and parameter gradients for one of the supported losses.

    ``selector`` is ``"ce"`` (``batch`` is a :class:`CEBatch`) or one of the
    test-time losses ``"ld"``, ``"lp"``, ``"ln"``, ``"lc"``, ``"total"``
    (``batch`` is a ``ttrec.ttt.SSLBatch``; ``alpha`` may be passed).
    """
    if selector not in SELECTORS:
        raise ValueError(f"unknown loss selector {selector!r}; expected one of {SELECTORS}")
    if selector == "ce":
        return _ce(model, inputs, batch.users, batch.positives, batch.candidates)
    from .ttt import ssl_loss_and_grads
    return ssl_loss_and_grads(selector, batch, model, inputs, **kwargs)


# --- optimizer --------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for key, g in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[key] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- pretraining ------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 512
    negatives: int | None = 100
    shared_negatives: bool = True
    hidden: int = 128
    embed_dim: int = 64
    fusion_hidden: tuple = (128,)
    dropout: float = 0.5
    ks: tuple = (10,)
    seed: int = 0

    def __post_init__(self):
        self.fusion_hidden = tuple(self.fusion_hidden)
        self.ks = tuple(int(k) for k in self.ks)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainLog:
    initial_loss: float
    train_loss: list = field(default_factory=list)
    valid_recall: list = field(default_factory=list)


def model_config_for(ds: Dataset, cfg: PretrainConfig) -> ModelConfig:
    return ModelConfig(ds.n_users, ds.n_items, ds.feature_dim, cfg.hidden, cfg.embed_dim,
                       cfg.fusion_hidden, cfg.dropout)


def pretrain(ds: Dataset, cfg: PretrainConfig, partition: str = "iid"):
    """Minibatch Adam on cross-entropy over the train split of ``partition``.

    Returns ``(model, TrainLog)``. Validation Recall@K is recorded per epoch.
    """
    from .evalrank import evaluate

    inter = ds.interactions(partition)
    train = inter.positives("train")
    if len(train) == 0:
        raise ValueError("train split has no positive interactions")
    streams = RngStreams(cfg.seed)
    model = RecommenderModel(model_config_for(ds, cfg), seed=cfg.seed)
    inputs = dataset_inputs(ds, partition, ("train",))
    shuffle_rng = streams.stream("shuffle")
    neg_rng = streams.stream("negatives")
    drop_rng = streams.stream("dropout")
    log = TrainLog(initial_loss=_full_ce(model, inputs, train, cfg.batch_size))
    opt = Adam(model.params, cfg.learning_rate)
    has_valid = len(inter.positives("valid")) > 0
    n = len(train)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            users, pos = train.users[idx], train.items[idx]
            cands = None
            if cfg.negatives is not None:
                cands = sample_candidates(neg_rng, pos, ds.n_items, cfg.negatives,
                                          cfg.shared_negatives)
            loss, grads = _ce(model, inputs, users, pos, cands, dropout_rng=drop_rng)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"pretraining diverged at epoch {epoch} (loss {loss}); lower the learning rate")
            opt.step(model.params, grads)
            total += loss * idx.size
        log.train_loss.append(total / n)
        if has_valid:
            metrics = evaluate(model, ds, partition, split="valid", ks=cfg.ks)
            log.valid_recall.append(metrics.recall(cfg.ks[0]))
        logger.info("epoch %d train CE %.5f valid %s", epoch, log.train_loss[-1],
                    log.valid_recall[-1] if has_valid else "n/a")
    return model, log


def _full_ce(model, inputs, train: InteractionSet, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(train), batch_size):
        sl = slice(start, start + batch_size)
        n = train.users[sl].size
        total += ce_loss(model, inputs, train.users[sl], train.items[sl]) * n
    return total / len(train)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(model: RecommenderModel, path, extra: dict | None = None) -> Path:
    """JSON checkpoint; float reprs round-trip exactly."""
    path = Path(path)
    cfg = asdict(model.cfg)
    cfg["fusion_hidden"] = list(cfg["fusion_hidden"])
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg,
        "config_hash": model.cfg.digest(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in model.params.items()},
        "extra": extra or {},
    }
    path.write_text(json.dumps(blob, separators=(",", ":")), encoding="utf-8")
    return path


def load_checkpoint(path) -> RecommenderModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = json.loads(path.read_text(encoding="utf-8"))
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    cfg = ModelConfig(**blob["config"])
    if cfg.digest() != blob["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in blob["params"].items()}
    model = RecommenderModel(cfg, params)
    expected = RecommenderModel(cfg, seed=0).params
    if list(expected) != list(params) or any(expected[k].shape != params[k].shape for k in params):
        raise ValueError(f"{path}: parameter layout does not match its config")
    return model
