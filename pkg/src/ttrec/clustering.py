"""Soft K-means over fused embeddings, sharpening, and high-confidence
selection with per-cluster centroids."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

KERNELS = ("gaussian", "student_t")


@dataclass
class ClusterState:
    centers: np.ndarray
    Q: np.ndarray
    P: np.ndarray | None = None
    inertia: float = 0.0
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centers.shape[0]


@dataclass
class ConfidenceSelection:
    indices: np.ndarray
    labels: np.ndarray
    threshold: float
    used_fallback: bool = False

    def __len__(self) -> int:
        return int(self.indices.size)


def assignment_logits(E, centers, kernel: str = "gaussian", bandwidth: float = 1.0) -> np.ndarray:
    """Per-row unnormalized log assignment scores; softmax gives Q.

    Squared distances are divided by ``bandwidth`` before the kernel is
    applied, so ``bandwidth=1`` is the plain unit-temperature kernel.
    """
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    dist = kernels.sq_dist_to_centers(E, centers)
    if bandwidth != 1.0:
        dist /= bandwidth
    if kernel == "gaussian":
        return -dist
    if kernel == "student_t":
        return -np.log1p(dist)
    raise ValueError(f"unknown assignment kernel {kernel!r}; expected one of {KERNELS}")


def assign(E, centers, kernel: str = "gaussian", bandwidth: float = 1.0) -> np.ndarray:
    """Soft assignment q[n, k] = softmax_k(-||e_n - mu_k||^2 / bandwidth)."""
    s = assignment_logits(np.asarray(E, dtype=np.float64), np.asarray(centers, dtype=np.float64),
                          kernel, bandwidth)
    s -= s.max(axis=1, keepdims=True)
    q = np.exp(s)
    return q / q.sum(axis=1, keepdims=True)


def kmeans_pp_init(E: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = E.shape[0]
    chosen = [int(rng.integers(n))]
    closest = kernels.sq_dist_to_centers(E, E[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining)) if remaining.size else int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, kernels.sq_dist_to_centers(E, E[[idx]])[:, 0])
    return E[chosen].copy()


def fit_soft_kmeans(E, k: int, rng: np.random.Generator, max_iter: int = 100,
                    tol: float = 1e-6, kernel: str = "gaussian",
                    bandwidth: float = 1.0) -> ClusterState:
    """k-means++ seeding followed by soft EM (assign, then weighted means)."""
    E = np.ascontiguousarray(E, dtype=np.float64)
    n = E.shape[0]
    if k < 2:
        raise ValueError("need at least 2 clusters")
    if n < k:
        raise ValueError(f"cannot fit {k} clusters to {n} points")
    if not np.all(np.isfinite(E)):
        raise ValueError("embeddings contain non-finite values")
    centers = kmeans_pp_init(E, k, rng)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        Q = assign(E, centers, kernel, bandwidth)
        weight = Q.sum(axis=0)
        new = centers.copy()
        live = weight > 0
        new[live] = (Q[:, live].T @ E) / weight[live, None]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break
    Q = assign(E, centers, kernel, bandwidth)
    inertia = float((Q * kernels.sq_dist_to_centers(E, centers)).sum())
    return ClusterState(centers, Q, None, inertia, n_iter)


def estimate_bandwidth(E, factor: float = 0.5) -> float:
    """Data-scaled kernel bandwidth: ``factor`` times the top covariance eigenvalue.

    Soft K-means with a Gaussian kernel merges every center into the mean
    once the bandwidth exceeds twice the leading eigenvalue, so any factor
    below 2 keeps at least one split alive.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.shape[0] < 2:
        raise ValueError("need at least 2 rows to estimate a bandwidth")
    centered = E - E.mean(axis=0)
    lam = float(np.linalg.eigvalsh(centered.T @ centered / (E.shape[0] - 1))[-1])
    if not lam > 0:
        raise ValueError("embeddings have zero variance; clustering is undefined")
    return factor * lam


def sharpen(Q, T: float) -> np.ndarray:
    """Row-wise q^(1/T) renormalized; T < 1 lowers entropy."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    Q = np.asarray(Q, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = np.log(Q) / T
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def select_high_confidence(Q, tau: float, mode: str = "threshold",
                           fallback: bool = True) -> ConfidenceSelection:
    """Rows whose largest assignment probability reaches ``tau``.

    With ``mode="top_fraction"`` the ``ceil(tau * N)`` most confident rows are
    taken instead. When fewer than ``2K`` rows pass the threshold and
    ``fallback`` is on, the top 10% rows (at least ``min(N, 2K)``) are used.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    Q = np.asarray(Q, dtype=np.float64)
    n, k = Q.shape
    conf = Q.max(axis=1)
    labels_all = Q.argmax(axis=1)
    by_conf = np.argsort(-conf, kind="stable")
    used_fallback = False
    if mode == "threshold":
        idx = np.flatnonzero(conf >= tau)
        if fallback and idx.size < 2 * k:
            count = max(math.ceil(0.1 * n), min(n, 2 * k))
            idx = np.sort(by_conf[:count])
            used_fallback = True
    elif mode == "top_fraction":
        idx = np.sort(by_conf[:math.ceil(tau * n)])
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return ConfidenceSelection(idx, labels_all[idx], tau, used_fallback)


def divide(labels, k: int) -> list[np.ndarray]:
    """Positions of the selected rows grouped by cluster label (may be empty)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return [np.flatnonzero(labels == m) for m in range(k)]


def compute_centers(E_h, clusters) -> tuple[np.ndarray, np.ndarray]:
    """Centroid of each nonempty cluster; returns (cluster ids, centers)."""
    E_h = np.asarray(E_h, dtype=np.float64)
    ids = [m for m, members in enumerate(clusters) if members.size]
    if len(ids) < 2:
        raise ValueError("contrastive loss undefined: fewer than 2 nonempty clusters")
    centers = np.stack([E_h[clusters[m]].mean(axis=0) for m in ids])
    return np.asarray(ids), centers


def write_cluster_dump(path, Q, row_ids=None) -> Path:
    """CSV of row id, argmax label and max probability per row."""
    Q = np.asarray(Q)
    row_ids = np.arange(Q.shape[0]) if row_ids is None else np.asarray(row_ids)
    lines = ["row,label,max_prob"]
    for rid, lab, prob in zip(row_ids.tolist(), Q.argmax(axis=1).tolist(), Q.max(axis=1).tolist()):
        lines.append(f"{rid},{lab},{prob!r}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
