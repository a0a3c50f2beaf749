"""Dual self-supervised test-time training.

Per epoch the fused embeddings of all adaptation pairs are clustered with
soft K-means; each minibatch then pays a self-distillation loss (KL between
the sharpened and raw assignments) plus a contrastive loss built from the
high-confidence rows, and the encoders and fusion network take an Adam step.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .backbone import Adam, EncoderInputs, RecommenderModel, scatter_rows
from .clustering import (KERNELS, ConfidenceSelection, assign, assignment_logits, divide,
                         estimate_bandwidth, fit_soft_kmeans,
                         select_high_confidence, sharpen)
from .numerics import RngStreams, cosine_similarity, cosine_similarity_grad, kl_rows

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_SSL1", "no_SSL2", "no_both")


@dataclass
class TTTConfig:
    alpha: float = 1.0
    tau: float = 0.9
    T: float = 0.1
    K: int = 4
    epochs: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 500
    max_samples: int | None = None
    kernel: str = "gaussian"
    bandwidth: float | str = "auto"
    bandwidth_factor: float = 0.5
    selection: str = "threshold"
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "auto":
                raise ValueError("bandwidth must be a positive number or 'auto'")
        elif not self.bandwidth > 0:
            raise ValueError("bandwidth must be a positive number or 'auto'")
        if not self.bandwidth_factor > 0:
            raise ValueError("bandwidth_factor must be positive")


@dataclass
class LossBreakdown:
    L_d: float
    L_p: float
    L_n: float
    L_c: float
    L_total: float

    def as_dict(self) -> dict:
        return asdict(self)


# --- losses on arrays -------------------------------------------------------

def self_distillation_loss(P, Q) -> float:
    """Mean over rows of KL(P_row || Q_row); P is a fixed target."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: P {P.shape} vs Q {Q.shape}")
    return float(kl_rows(np.atleast_2d(P), np.atleast_2d(Q)).mean())


def positive_loss(clusters, k: int | None = None) -> float:
    """Pairwise squared distances within clusters, scaled by 1/(K N (N-1)).

    ``clusters`` is a list of member-embedding arrays; ``N`` is the total
    member count and ``K`` defaults to the number of clusters.
    """
    return _positive(clusters, k)[0]


def _positive(clusters, k=None):
    k = len(clusters) if k is None else k
    n = sum(len(c) for c in clusters)
    grads = [np.zeros((len(c), np.shape(c)[1] if len(c) else 0)) for c in clusters]
    if n < 2:
        warnings.warn("positive loss needs at least 2 confident samples; returning 0",
                      RuntimeWarning, stacklevel=3)
        return 0.0, grads
    scale = 1.0 / (k * n * (n - 1))
    total = 0.0
    for m, members in enumerate(clusters):
        if len(members) < 2:
            continue
        s, g = kernels.pairwise_sq_sum(members)
        total += s
        grads[m] = scale * g
    return scale * total, grads


def negative_loss(centers, k: int | None = None) -> float:
    """Sum of pairwise center cosines over i<j, scaled by 1/(K^2 - K)."""
    centers = np.asarray(centers, dtype=np.float64)
    k = centers.shape[0] if k is None else k
    if centers.shape[0] < 2:
        raise ValueError("negative loss needs at least 2 centers")
    total = 0.0
    for a in range(centers.shape[0]):
        for b in range(a + 1, centers.shape[0]):
            total += cosine_similarity(centers[a], centers[b], (f"center {a}", f"center {b}"))
    return total / (k * k - k)


def _negative(centers, k):
    norm = 1.0 / (k * k - k)
    grads = np.zeros_like(centers)
    total = 0.0
    for a in range(centers.shape[0]):
        for b in range(a + 1, centers.shape[0]):
            s, ga, gb = cosine_similarity_grad(centers[a], centers[b])
            total += s
            grads[a] += ga
            grads[b] += gb
    return norm * total, norm * grads


def contrastive_loss(clusters, centers, k: int | None = None) -> float:
    return positive_loss(clusters, k) + negative_loss(centers, k)


def total_loss(l_d: float, l_c: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return l_d + alpha * l_c


def embedding_losses(E, centers, *, alpha: float = 1.0, T: float = 0.1, tau: float = 0.9,
                     kernel: str = "gaussian", bandwidth: float = 1.0,
                     selection_mode: str = "threshold") -> LossBreakdown:
    """All loss terms for one batch of fused embeddings, without gradients."""
    E = np.asarray(E, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    K = centers.shape[0]
    Q = assign(E, centers, kernel, bandwidth)
    l_d = self_distillation_loss(sharpen(Q, T), Q)
    sel = select_high_confidence(Q, tau, selection_mode)
    E_h = E[sel.indices]
    groups = [E_h[c] for c in divide(sel.labels, K)]
    nonempty = [g for g in groups if len(g)]
    if len(nonempty) < 2:
        l_p = l_n = 0.0
    else:
        l_p = positive_loss(groups, K)
        l_n = negative_loss(np.stack([g.mean(axis=0) for g in nonempty]), K)
    l_c = l_p + l_n
    return LossBreakdown(l_d, l_p, l_n, l_c, total_loss(l_d, l_c, alpha))


# --- batch forward/backward -------------------------------------------------

@dataclass
class SSLBatch:
    """Adaptation pairs plus the epoch's cluster centers.

    ``P`` and ``selection`` default to values derived from the current
    assignments; pass them explicitly to hold them fixed (finite differences).
    """

    users: np.ndarray
    items: np.ndarray
    centers: np.ndarray
    P: np.ndarray | None = None
    selection: ConfidenceSelection | None = None
    bandwidth: float = 1.0


def _ssl_pass(batch: SSLBatch, model: RecommenderModel, inputs: EncoderInputs, *,
              alpha=1.0, T=0.1, tau=0.9, K=None, kernel="gaussian", selection_mode="threshold",
              use_ld=True, need_grads=True):
    users = np.asarray(batch.users, dtype=np.int64)
    items = np.asarray(batch.items, dtype=np.int64)
    centers = np.asarray(batch.centers, dtype=np.float64)
    K = centers.shape[0] if K is None else K
    uniq_u, inv_u = np.unique(users, return_inverse=True)
    uniq_i, inv_i = np.unique(items, return_inverse=True)
    e_u, acts_f = model.encode("f", inputs.user_in[uniq_u])
    e_i, acts_g = model.encode("g", inputs.item_in[uniq_i])
    E, acts_gamma = model.fuse_with_cache(e_u[inv_u], e_i[inv_i])
    B = E.shape[0]

    bw = float(batch.bandwidth)
    s = assignment_logits(E, centers, kernel, bw)
    s -= s.max(axis=1, keepdims=True)
    Q = np.exp(s)
    Q /= Q.sum(axis=1, keepdims=True)
    P = sharpen(Q, T) if batch.P is None else np.asarray(batch.P)
    l_d = self_distillation_loss(P, Q)

    sel = batch.selection if batch.selection is not None else \
        select_high_confidence(Q, tau, selection_mode)
    clusters = divide(sel.labels, K)
    E_h = E[sel.indices]
    nonempty = [m for m in range(K) if clusters[m].size]
    dEh_p = np.zeros_like(E_h)
    dEh_n = np.zeros_like(E_h)
    if len(nonempty) < 2:
        warnings.warn("batch has fewer than 2 confident clusters; contrastive loss skipped",
                      RuntimeWarning, stacklevel=2)
        l_p = l_n = 0.0
    else:
        l_p, g_members = _positive([E_h[c] for c in clusters], K)
        for m in nonempty:
            dEh_p[clusters[m]] += g_members[m]
        cents = np.stack([E_h[clusters[m]].mean(axis=0) for m in nonempty])
        l_n, g_cents = _negative(cents, K)
        for row, m in enumerate(nonempty):
            dEh_n[clusters[m]] += g_cents[row] / clusters[m].size
    l_c = l_p + l_n
    w_d = 1.0 if use_ld else 0.0
    breakdown = LossBreakdown(w_d * l_d, l_p, l_n, l_c, w_d * l_d + alpha * l_c)
    if not need_grads:
        return breakdown, None, E, Q

    def grads_for(c_d, c_p, c_n):
        dS = c_d * (Q - P) / B
        if kernel == "gaussian":
            W = dS / bw
        else:
            W = dS / (bw + kernels.sq_dist_to_centers(E, centers))
        dE = -2.0 * (W.sum(axis=1, keepdims=True) * E - W @ centers)
        if c_p or c_n:
            dE[sel.indices] += c_p * dEh_p + c_n * dEh_n
        grads = model.zero_grads()
        dZ = model.backward("gamma", acts_gamma, dE, grads, need_dx=True)
        d = e_u.shape[1]
        d_eu = scatter_rows(inv_u, dZ[:, :d], e_u.shape[0])
        d_ei = scatter_rows(inv_i, dZ[:, d:], e_i.shape[0])
        model.backward("f", acts_f, d_eu, grads)
        model.backward("g", acts_g, d_ei, grads)
        return grads

    return breakdown, grads_for, E, Q


def ssl_loss_and_grads(selector: str, batch: SSLBatch, model: RecommenderModel,
                       inputs: EncoderInputs, alpha: float = 1.0, **kwargs):
    """(loss, grads) for one of ``ld``, ``lp``, ``ln``, ``lc``, ``total``."""
    coeffs = {"ld": (1.0, 0.0, 0.0), "lp": (0.0, 1.0, 0.0), "ln": (0.0, 0.0, 1.0),
              "lc": (0.0, 1.0, 1.0)}
    breakdown, grads_for, _, _ = _ssl_pass(batch, model, inputs, alpha=alpha, **kwargs)
    if selector == "total":
        w_d = 1.0 if kwargs.get("use_ld", True) else 0.0
        return breakdown.L_total, grads_for(w_d, alpha, alpha)
    if selector not in coeffs:
        raise ValueError(f"unknown loss selector {selector!r}")
    value = {"ld": breakdown.L_d, "lp": breakdown.L_p, "ln": breakdown.L_n,
             "lc": breakdown.L_c}[selector]
    return value, grads_for(*coeffs[selector])


def ssl_loss_value(selector: str, batch: SSLBatch, model: RecommenderModel,
                   inputs: EncoderInputs, alpha: float = 1.0, **kwargs) -> float:
    breakdown = _ssl_pass(batch, model, inputs, alpha=alpha, need_grads=False, **kwargs)[0]
    return {"ld": breakdown.L_d, "lp": breakdown.L_p, "ln": breakdown.L_n,
            "lc": breakdown.L_c, "total": breakdown.L_total}[selector]


# --- adaptation loop --------------------------------------------------------

@dataclass
class AdaptReport:
    variant: str
    seed: int
    config: dict
    epochs: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "config": self.config,
                "epochs": self.epochs, "metrics": self.metrics, "diagnostics": self.diagnostics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def loss_curve_csv(self) -> str:
        cols = ["epoch", "L_d", "L_p", "L_n", "L_c", "L_total"]
        lines = [",".join(cols)]
        for row in self.epochs:
            lines.append(",".join(repr(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def fused_embeddings(model: RecommenderModel, inputs: EncoderInputs, users, items) -> np.ndarray:
    e_u = model.encode("f", inputs.user_in)[0]
    e_i = model.encode("g", inputs.item_in)[0]
    return model.fuse_with_cache(e_u[users], e_i[items])[0]


def adaptation_pairs(users, items, cfg: TTTConfig):
    """Seeded subsample of at most ``cfg.max_samples`` pairs, original order kept."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if cfg.max_samples is not None and users.size > cfg.max_samples:
        rng = RngStreams(cfg.seed).stream("ttt_subsample")
        keep = np.sort(rng.choice(users.size, cfg.max_samples, replace=False))
        users, items = users[keep], items[keep]
    return users, items


def adapt(model: RecommenderModel, inputs: EncoderInputs, users, items, cfg: TTTConfig,
          variant: str = "full", epoch_callback=None):
    """Adapt a copy of ``model`` on unlabeled pairs from the shifted domain.

    ``inputs`` carry the shifted user features and historical interactions;
    ``users``/``items`` are the observed historical pairs fed to fusion.
    Returns ``(adapted_model, [LossBreakdown per epoch], AdaptReport)``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    alpha = 0.0 if variant == "no_SSL2" else cfg.alpha
    use_ld = variant != "no_SSL1"
    report = AdaptReport(variant, cfg.seed, asdict(cfg))
    adapted = model.copy()
    users, items = adaptation_pairs(users, items, cfg)
    n = users.size
    report.diagnostics["n_samples"] = int(n)
    if variant == "no_both" or cfg.epochs == 0:
        return adapted, [], report
    if cfg.K > n:
        raise ValueError(f"K={cfg.K} exceeds the number of adaptation pairs ({n})")

    streams = RngStreams(cfg.seed)
    km_rng = streams.stream("kmeans")
    shuffle_rng = streams.stream("shuffle")
    opt = Adam(adapted.params, cfg.learning_rate)
    history = []
    fallbacks = []
    bandwidths = []
    for epoch in range(cfg.epochs):
        E_all = fused_embeddings(adapted, inputs, users, items)
        bw = (estimate_bandwidth(E_all, cfg.bandwidth_factor) if cfg.bandwidth == "auto"
              else float(cfg.bandwidth))
        bandwidths.append(bw)
        state = fit_soft_kmeans(E_all, cfg.K, km_rng, kernel=cfg.kernel, bandwidth=bw)
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        n_fallback = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = SSLBatch(users[idx], items[idx], state.centers, bandwidth=bw)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                breakdown, grads_for, _, Q = _ssl_pass(
                    batch, adapted, inputs, alpha=alpha, T=cfg.T, tau=cfg.tau, K=cfg.K,
                    kernel=cfg.kernel, selection_mode=cfg.selection, use_ld=use_ld)
            if not math.isfinite(breakdown.L_total):
                raise FloatingPointError(f"non-finite test-time loss at epoch {epoch}")
            w_d = 1.0 if use_ld else 0.0
            grads = grads_for(w_d, alpha, alpha)
            opt.step(adapted.params, grads)
            sums += (breakdown.L_d, breakdown.L_p, breakdown.L_n, breakdown.L_c)
            n_batches += 1
            n_fallback += int((Q.max(axis=1) >= cfg.tau).sum() < 2 * cfg.K)
        l_d, l_p, l_n, l_c = (sums / n_batches).tolist()
        row = LossBreakdown(l_d, l_p, l_n, l_c, l_d + alpha * l_c)
        history.append(row)
        report.epochs.append({"epoch": epoch, **row.as_dict()})
        fallbacks.append(n_fallback)
        logger.info("ttt epoch %d: %s", epoch, row)
        if not adapted.check_finite():
            raise FloatingPointError(f"parameters became non-finite at epoch {epoch}")
        if epoch_callback is not None:
            epoch_callback(epoch, adapted, row)
    report.diagnostics["fallback_batches"] = fallbacks
    report.diagnostics["bandwidths"] = bandwidths
    return adapted, history, report


def ablate(model, inputs, users, items, cfg: TTTConfig, which: str):
    """Adaptation with one or both self-supervised tasks removed."""
    if which not in VARIANTS[1:]:
        raise ValueError(f"unknown ablation {which!r}")
    return adapt(model, inputs, users, items, cfg, variant=which)
