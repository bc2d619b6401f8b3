"""Lloyd k-means, closed-form output weights, and metric retrieval."""
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    loss: float
    history: list  # clustering loss after every assignment step
    n_iter: int


def _sq_dists(x, centers):
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("mcd,mcd->mc", diff, diff)


def _plus_plus(x, k, rng):
    m = x.shape[0]
    centers = [x[rng.integers(m)]]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.integers(m) if total <= 0 else rng.choice(m, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=x.dtype)


def kmeans(x, k, rng, max_iter=100, init=None):
    """Lloyd iterations from k-means++ seeds until the assignment is a fixpoint.

    The loss is the summed squared distance of every point to its assigned
    center. A cluster left empty by an update is moved onto the point that is
    farthest from its own center, which never increases the loss.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError("embeddings must be an (M, D) matrix")
    m = x.shape[0]
    if not 1 <= k <= m:
        raise ConfigError(f"need 1 <= clusters <= samples, got {k} clusters for {m} samples")
    centers = _plus_plus(x, k, rng) if init is None else np.array(init, dtype=x.dtype)
    rows = np.arange(m)

    d2 = _sq_dists(x, centers)
    assign = d2.argmin(axis=1)
    history = [float(d2[rows, assign].sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centers = centers.copy()
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            own = ((x - centers[assign]) ** 2).sum(axis=1)
            for j in empty:
                far = int(own.argmax())
                centers[j] = x[far]
                own[far] = -1.0
        d2 = _sq_dists(x, centers)
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[rows, new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return KMeansResult(centers, assign, history[-1], history, n_iter)


def kmeans_init(embeddings, n_clusters, rng, max_iter=100):
    """``(centers, assignments, loss)`` for warm-starting an RBF head."""
    res = kmeans(embeddings, n_clusters, rng, max_iter=max_iter)
    return res.centers, res.assignments, res.loss


def solve_output_weights(activations, targets, alpha=1e-8):
    """Ridge-regularized least squares ``(H^T H + alpha I)^-1 H^T Y``.

    As ``alpha`` goes to zero this approaches the pseudo-inverse solution.
    """
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    h = np.asarray(activations, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if h.ndim != 2 or y.ndim != 2 or h.shape[0] != y.shape[0]:
        raise ShapeError(f"incompatible shapes {h.shape} and {y.shape}")
    gram = h.T @ h + alpha * np.eye(h.shape[1])
    return np.linalg.solve(gram, h.T @ y)


def one_hot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1
    return out


@dataclass
class Neighbor:
    index: int
    distance_sq: float


def similarity_query(head, query, corpus, top_n):
    """Most similar and most dissimilar corpus rows under the head's metric.

    Both lists break distance ties by the lower corpus index.
    """
    corpus = np.asarray(corpus)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise ShapeError("corpus must be a non-empty (M, D) matrix")
    m = corpus.shape[0]
    if not 0 <= top_n <= m:
        raise ConfigError(f"top_n must be within [0, {m}]")
    r2 = head.pairwise_distance_sq(np.asarray(query).reshape(1, -1), corpus)[0]
    idx = np.arange(m)
    near = np.lexsort((idx, r2))[:top_n]
    far = np.lexsort((idx, -r2))[:top_n]
    return ([Neighbor(int(i), float(r2[i])) for i in near],
            [Neighbor(int(i), float(r2[i])) for i in far])
