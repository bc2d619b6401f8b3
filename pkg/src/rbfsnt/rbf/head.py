"""RBF classifier head with a learned distance metric."""
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError, StateError
from ..nn.functional import softmax_cross_entropy
from ..nn.layers import glorot_uniform
from ..nn.network import DTYPES
from .kernels import KernelConfig, kernel_with_grads

METRIC_MODES = ("euclidean", "diagonal", "full")
EPS = 1e-6


@dataclass
class HeadCache:
    x: np.ndarray
    diff: np.ndarray     # (N, C, D)
    metric_diff: np.ndarray  # R @ diff, (N, C, D)
    r2: np.ndarray       # (N, C)
    h: np.ndarray        # (N, C)
    dh_dr2: np.ndarray
    dh_dsigma: np.ndarray
    version: int


class RbfHead:
    """Centers, metric factor, kernel width, and output layer.

    The effective metric is ``R = A^T A + eps * I`` in ``full`` mode and
    ``diag(a^2 + eps)`` in ``diagonal`` mode, so any value of the trainable
    factor yields a positive definite metric. ``euclidean`` mode uses the
    identity and has no metric parameter.
    """

    param_names = ("centers", "metric", "sigma", "weight", "bias")

    def __init__(self, centers, n_classes, kernel=None, metric_mode="euclidean",
                 per_cluster_sigma=False, rng=None, dtype="float64", eps=EPS):
        if metric_mode not in METRIC_MODES:
            raise ConfigError(f"metric_mode must be one of {METRIC_MODES}")
        centers = np.asarray(centers, dtype=DTYPES[dtype])
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ShapeError("centers must be a non-empty (C, D) matrix")
        kernel = kernel or KernelConfig()
        c, d = centers.shape
        self.kernel = kernel
        self.metric_mode = metric_mode
        self.per_cluster_sigma = per_cluster_sigma
        self.n_classes = n_classes
        self.eps = eps
        self.dtype = dtype
        self.version = 0
        self._last_cache = None
        ft = DTYPES[dtype]
        self.params = {"centers": centers}
        if metric_mode == "full":
            self.params["metric"] = np.eye(d, dtype=ft)
        elif metric_mode == "diagonal":
            self.params["metric"] = np.ones(d, dtype=ft)
        sigma_shape = (c,) if per_cluster_sigma else ()
        self.params["sigma"] = np.full(sigma_shape, kernel.sigma, dtype=ft)
        if rng is None:
            self.params["weight"] = np.zeros((c, n_classes), dtype=ft)
        else:
            self.params["weight"] = glorot_uniform(rng, (c, n_classes), c, n_classes, ft)
        self.params["bias"] = np.zeros(n_classes, dtype=ft)

    # shape helpers ---------------------------------------------------------

    @property
    def n_centers(self):
        return self.params["centers"].shape[0]

    @property
    def dim(self):
        return self.params["centers"].shape[1]

    @property
    def centers(self):
        return self.params["centers"]

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def bias(self):
        return self.params["bias"]

    @property
    def sigma(self):
        return self.params["sigma"]

    def named_parameters(self):
        for name in self.param_names:
            if name in self.params:
                yield f"head.{name}", self.params[name]

    def set_parameter(self, name, value):
        key = name.split(".", 1)[1]
        if self.params[key].shape != value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self.params[key].shape}")
        self.params[key] = value
        self.touch()

    def touch(self):
        self.version += 1
        self._last_cache = None

    def astype(self, dtype):
        for k, v in self.params.items():
            self.params[k] = v.astype(DTYPES[dtype])
        self.dtype = dtype
        self.touch()
        return self

    def enforce_constraints(self):
        """Kernels depend on sigma only through sigma^2; keep the stored value positive."""
        np.abs(self.params["sigma"], out=self.params["sigma"])
        np.maximum(self.params["sigma"], 1e-12, out=self.params["sigma"])

    # metric ----------------------------------------------------------------

    def metric_matrix(self):
        d = self.dim
        if self.metric_mode == "euclidean":
            return np.eye(d)
        a = self.params["metric"]
        if self.metric_mode == "diagonal":
            return np.diag(a * a + self.eps)
        return a.T @ a + self.eps * np.eye(d)

    def _apply_metric(self, diff):
        if self.metric_mode == "euclidean":
            return diff
        a = self.params["metric"]
        if self.metric_mode == "diagonal":
            return diff * (a * a + self.eps)
        return (diff @ a.T) @ a + self.eps * diff

    def pairwise_distance_sq(self, x, y):
        """Squared metric distances between rows of ``x`` (N,D) and ``y`` (M,D)."""
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        if x.shape[1] != self.dim or y.shape[1] != self.dim:
            raise ShapeError(f"expected vectors of dimension {self.dim}")
        diff = x[:, None, :] - y[None, :, :]
        return np.einsum("nmd,nmd->nm", diff, self._apply_metric(diff))

    def distance_sq(self, x):
        return self.pairwise_distance_sq(x, self.centers)

    # passes ----------------------------------------------------------------

    def forward(self, x, remember=True):
        """Return ``(activations (N,C), logits (N,K), cache)``."""
        x = np.asarray(x, dtype=DTYPES[self.dtype])
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"head expects (N, {self.dim}) input, got {x.shape}")
        diff = x[:, None, :] - self.centers[None, :, :]
        mdiff = self._apply_metric(diff)
        r2 = np.einsum("ncd,ncd->nc", diff, mdiff)
        h, dh_dr2, dh_ds = kernel_with_grads(np.maximum(r2, 0), self.sigma, self.kernel)
        logits = h @ self.weight + self.bias
        cache = HeadCache(x, diff, mdiff, r2, h, dh_dr2, dh_ds, self.version)
        if remember:
            self._last_cache = cache
        return h, logits, cache

    def backward(self, grad_logits, cache=None, grad_r2=None, grad_diff_plain=None,
                 need_param_grads=True):
        """Gradients of a loss given ``dL/dlogits``.

        ``grad_r2`` adds a direct contribution on the squared distances (used by
        the clustering term); ``grad_diff_plain`` adds one on ``x - c`` outside the
        metric. Returns ``(grad_x, {param_name: grad})``.
        """
        cache = self._last_cache if cache is None else cache
        if cache is None:
            raise StateError("rbf backward called before forward")
        if cache.version != self.version:
            raise StateError("head cache is stale: parameters changed after forward")
        grads = {}
        g_h = grad_logits @ self.weight.T
        g_r2 = g_h * cache.dh_dr2
        if grad_r2 is not None:
            g_r2 = g_r2 + grad_r2
        # d r2 / d diff = 2 R diff
        g_diff = 2 * g_r2[:, :, None] * cache.metric_diff
        if grad_diff_plain is not None:
            g_diff = g_diff + grad_diff_plain
        grad_x = g_diff.sum(axis=1)
        if need_param_grads:
            grads["head.weight"] = cache.h.T @ grad_logits
            grads["head.bias"] = grad_logits.sum(axis=0)
            grads["head.centers"] = -g_diff.sum(axis=0)
            g_s = g_h * cache.dh_dsigma
            grads["head.sigma"] = g_s.sum(axis=0) if self.per_cluster_sigma else np.asarray(g_s.sum())
            if self.metric_mode == "diagonal":
                a = self.params["metric"]
                grads["head.metric"] = 2 * a * np.einsum("nc,ncd->d", g_r2, cache.diff ** 2)
            elif self.metric_mode == "full":
                a = self.params["metric"]
                ad = cache.diff @ a.T
                grads["head.metric"] = 2 * np.einsum("nc,nci,ncj->ij", g_r2, ad, cache.diff)
        return grad_x, grads

    def unsupervised_terms(self, cache, plain=False):
        """Mean nearest-center squared distance and its gradient hooks.

        Returns ``(loss, grad_r2, grad_diff_plain)`` ready for :meth:`backward`.
        With ``plain=True`` the nearest center and the distance use the
        unweighted Euclidean norm instead of the learned metric.
        """
        n = cache.r2.shape[0]
        rows = np.arange(n)
        if plain:
            d2 = np.einsum("ncd,ncd->nc", cache.diff, cache.diff)
            nearest = d2.argmin(axis=1)
            loss = d2[rows, nearest].mean()
            g = np.zeros_like(cache.diff)
            g[rows, nearest] = 2 * cache.diff[rows, nearest] / n
            return float(loss), None, g
        nearest = cache.r2.argmin(axis=1)
        loss = cache.r2[rows, nearest].mean()
        g_r2 = np.zeros_like(cache.r2)
        g_r2[rows, nearest] = 1.0 / n
        return float(loss), g_r2, None

    def assign(self, x):
        return self.distance_sq(x).argmin(axis=1)

    def spec(self):
        return {"n_centers": self.n_centers, "dim": self.dim, "n_classes": self.n_classes,
                "metric_mode": self.metric_mode, "per_cluster_sigma": self.per_cluster_sigma,
                "kernel": self.kernel.to_dict(), "eps": self.eps}

    @classmethod
    def from_spec(cls, spec, dtype="float64"):
        head = cls(np.zeros((spec["n_centers"], spec["dim"])), spec["n_classes"],
                   KernelConfig(**spec["kernel"]), spec["metric_mode"],
                   spec["per_cluster_sigma"], dtype=dtype, eps=spec.get("eps", EPS))
        return head


# functional surface -------------------------------------------------------

def metric_distance_sq(x, center, head):
    """Squared distance between one vector and one center under the head's metric."""
    x = np.asarray(x, dtype=float)
    center = np.asarray(center, dtype=float)
    if x.shape != center.shape or x.shape != (head.dim,):
        raise ShapeError(f"expected two vectors of dimension {head.dim}")
    return float(head.pairwise_distance_sq(x[None], center[None])[0, 0])


def rbf_forward(head, x):
    h, logits, _ = head.forward(x)
    return h, logits


def rbf_backward(head, grad_logits):
    """Gradients for every head parameter plus ``"x"`` from the last forward."""
    gx, grads = head.backward(grad_logits)
    grads["x"] = gx
    return grads


def unsupervised_loss(head, x, plain=False):
    _, _, cache = head.forward(x)
    return head.unsupervised_terms(cache, plain=plain)[0]


def combined_loss(head, x, labels, lam, plain=False):
    """Cross-entropy on the head's logits plus ``lam`` times the clustering term."""
    if lam < 0:
        raise ConfigError("loss constant must be non-negative")
    _, logits, cache = head.forward(x)
    sup, _ = softmax_cross_entropy(logits, labels)
    unsup = head.unsupervised_terms(cache, plain=plain)[0]
    return sup + lam * unsup


def cluster_contributions(head, x):
    """Per-cluster, per-class share of the logits: ``h_j(x) * w[j, k]``."""
    x = np.asarray(x, dtype=DTYPES[head.dtype])
    h, _, _ = head.forward(x.reshape(1, -1), remember=False)
    return h[0][:, None] * head.weight
