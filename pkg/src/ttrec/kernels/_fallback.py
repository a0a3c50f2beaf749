"""Pure NumPy versions of the compiled kernels, same signatures and results."""
import numpy as np

_CHUNK = 4096


def sq_dist_to_centers(points, centers):
    """Squared Euclidean distance from every point to every center, shape (N, K)."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if points.shape[1] != centers.shape[1]:
        raise ValueError(
            f"dimension mismatch: points have {points.shape[1]} columns, "
            f"centers {centers.shape[1]}"
        )
    out = np.empty((points.shape[0], centers.shape[0]))
    for start in range(0, points.shape[0], _CHUNK):
        block = points[start:start + _CHUNK]
        diff = block[:, None, :] - centers[None, :, :]
        out[start:start + _CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def pairwise_sq_sum(members):
    """Sum of squared distances over unordered member pairs, and its gradient."""
    members = np.asarray(members, dtype=np.float64)
    n = members.shape[0]
    if n < 2:
        return 0.0, np.zeros_like(members)
    sq = np.einsum("nd,nd->n", members, members)
    gram = members @ members.T
    dist = sq[:, None] + sq[None, :] - 2.0 * gram
    total = float(np.triu(dist, 1).sum())
    grad = 2.0 * (n * members - members.sum(axis=0))
    return total, grad
