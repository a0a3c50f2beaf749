"""Dense numeric kernels shared across the package.

All arrays are float64. Functions are pure; random draws go through
explicitly passed ``numpy.random.Generator`` objects obtained from
:class:`RngStreams` so every run is reproducible from one integer seed.
"""
from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty vector is undefined")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax requires finite logits")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("log_softmax of an empty vector is undefined")
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def kl_divergence(p, q) -> float:
    """KL(p || q) = sum p log(p/q), with 0 log 0 = 0 and q floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(kl_rows(p.reshape(1, -1), q.reshape(1, -1))[0])


def kl_rows(P, Q) -> np.ndarray:
    """Row-wise KL(P[n] || Q[n]) for two row-stochastic matrices."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    qf = np.maximum(Q, PROB_FLOOR)
    mask = P > 0
    terms = np.zeros_like(P)
    terms[mask] = P[mask] * (np.log(P[mask]) - np.log(qf[mask]))
    return terms.sum(axis=-1)


def entropy_rows(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    mask = P > 0
    terms = np.zeros_like(P)
    terms[mask] = -P[mask] * np.log(P[mask])
    return terms.sum(axis=-1)


def cosine_similarity(a, b, names: tuple[str, str] = ("a", "b")) -> float:
    """Cosine of the angle between two nonzero vectors.

    ``names`` label the operands in the error raised for a zero-norm input.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    for norm, name in ((na, names[0]), (nb, names[1])):
        if norm <= NORM_FLOOR:
            raise ValueError(f"zero-norm vector {name}: cosine similarity undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_similarity_grad(a, b) -> tuple[float, np.ndarray, np.ndarray]:
    """Cosine similarity with its gradients with respect to ``a`` and ``b``."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise ValueError("zero-norm vector: cosine similarity undefined")
    s = float(a @ b / (na * nb))
    ga = b / (na * nb) - s * a / na**2
    gb = a / (na * nb) - s * b / nb**2
    return s, ga, gb


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], theta, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        fp = f(theta)
        theta[i] = orig - h
        fm = f(theta)
        theta[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||); zero when both are zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


class RngStreams:
    """One seed split into independent named generators.

    ``RngStreams(7).stream("datagen")`` always yields the same sequence,
    independent of which other streams were requested first.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, key]))


def sample_gaussian(rng: np.random.Generator, mean: float, std: float, shape) -> np.ndarray:
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.normal(loc=mean, scale=std, size=shape)


def sample_bernoulli(rng: np.random.Generator, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("Bernoulli probabilities must lie in [0, 1]")
    return (rng.random(p.shape) < p).astype(np.int8)


def finite_diff_hessian(f: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Finite-difference Hessian: 5-point stencil on the diagonal, 4-point
    cross stencil off the diagonal."""
    x = np.array(x, dtype=np.float64).ravel()
    n = x.size
    hess = np.empty((n, n))
    f0 = f(x)

    def at(*shifts):
        y = x.copy()
        for i, s in shifts:
            y[i] += s
        return f(y)

    for i in range(n):
        hess[i, i] = (-at((i, 2 * h)) + 16 * at((i, h)) - 30 * f0
                      + 16 * at((i, -h)) - at((i, -2 * h))) / (12 * h * h)
        for j in range(i + 1, n):
            v = (at((i, h), (j, h)) - at((i, h), (j, -h))
                 - at((i, -h), (j, h)) + at((i, -h), (j, -h))) / (4 * h * h)
            hess[i, j] = hess[j, i] = v
    return hess
