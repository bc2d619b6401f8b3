"""Backbone network plus optional RBF head, viewed as one classifier."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError
from .nn.functional import softmax_cross_entropy
from .nn.layers import (Conv2d, Flatten, FullyConnected, GlobalAvgPool, MaxPool2d, ReLU,
                        Dropout)
from .nn.network import DTYPES, Network
from .rbf.head import RbfHead
from .rbf.kernels import KernelConfig


@dataclass
class ModelTrace:
    backbone: object
    head: object
    embeddings: np.ndarray
    logits: np.ndarray


@dataclass
class LossBreakdown:
    total: float
    supervised: float
    unsupervised: float


class Model:
    """A classifier: ``logits = head(backbone(x))``.

    Without a head the backbone output is taken as the logits.
    """

    def __init__(self, backbone, head=None, n_classes=None):
        self.backbone = backbone
        self.head = head
        if head is not None:
            if backbone.output_shape != (head.dim,):
                raise ConfigError(f"backbone emits {backbone.output_shape}, head expects ({head.dim},)")
            self.n_classes = head.n_classes
        else:
            self.n_classes = n_classes or backbone.output_shape[0]

    @property
    def dtype(self):
        return self.backbone.dtype

    @property
    def input_shape(self):
        return self.backbone.input_shape

    @property
    def version(self):
        return (self.backbone.version, self.head.version if self.head else 0)

    def named_parameters(self):
        yield from self.backbone.named_parameters()
        if self.head is not None:
            yield from self.head.named_parameters()

    def parameters_dict(self):
        return dict(self.named_parameters())

    def set_parameter(self, name, value):
        if name.startswith("head."):
            self.head.set_parameter(name, value)
        else:
            self.backbone.set_parameter(name, value)

    def touch(self):
        self.backbone.touch()
        if self.head is not None:
            self.head.enforce_constraints()
            self.head.touch()

    def astype(self, dtype):
        self.backbone.astype(dtype)
        if self.head is not None:
            self.head.astype(dtype)
        return self

    # passes ----------------------------------------------------------------

    def forward(self, x, training=False, rng=None, remember=True):
        emb, btrace = self.backbone.forward(x, training=training, rng=rng, remember=remember)
        if self.head is None:
            return emb, ModelTrace(btrace, None, emb, emb)
        _, logits, hcache = self.head.forward(emb, remember=remember)
        return logits, ModelTrace(btrace, hcache, emb, logits)

    def backward(self, trace, grad_logits, grad_r2=None, grad_diff_plain=None,
                 need_param_grads=True):
        """Return ``(grad_input, {param_name: grad})``."""
        grads = {}
        if self.head is not None:
            g_emb, grads = self.head.backward(grad_logits, trace.head, grad_r2=grad_r2,
                                              grad_diff_plain=grad_diff_plain,
                                              need_param_grads=need_param_grads)
        else:
            g_emb = grad_logits
        g_in, bgrads = self.backbone.backward(g_emb, trace.backbone,
                                              need_param_grads=need_param_grads)
        grads.update(bgrads)
        return g_in, grads

    def loss_and_grads(self, x, labels, lam=0.0, training=True, rng=None, plain_unsup=False):
        logits, trace = self.forward(x, training=training, rng=rng)
        sup, g_logits = softmax_cross_entropy(logits, labels)
        unsup, g_r2, g_plain = 0.0, None, None
        if self.head is not None and lam > 0:
            unsup, g_r2, g_plain = self.head.unsupervised_terms(trace.head, plain=plain_unsup)
            g_r2 = None if g_r2 is None else lam * g_r2
            g_plain = None if g_plain is None else lam * g_plain
        _, grads = self.backward(trace, g_logits, g_r2, g_plain)
        return LossBreakdown(sup + lam * unsup, sup, unsup), grads, logits

    def input_gradient(self, x, objective):
        """Gradient of ``objective(logits) -> (value, dvalue/dlogits)`` w.r.t. ``x``.

        Parameters are read, never written, and scratch state stays local to
        the call.
        """
        logits, trace = self.forward(x, remember=False)
        value, g_logits = objective(logits)
        g_in, _ = self.backward(trace, g_logits, need_param_grads=False)
        return value, g_in, logits

    def logits(self, x, batch_size=512):
        x = np.asarray(x)
        out = [self.forward(x[i:i + batch_size], remember=False)[0] for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.n_classes), dtype=DTYPES[self.dtype])
        return np.concatenate(out)

    def predict(self, x, batch_size=512):
        return self.logits(x, batch_size).argmax(axis=1)

    def embed(self, x, batch_size=512):
        x = np.asarray(x)
        out = [self.backbone.forward(x[i:i + batch_size], remember=False)[0] for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0,) + self.backbone.output_shape, dtype=DTYPES[self.dtype])
        return np.concatenate(out)

    def __call__(self, x):
        return self.forward(x)[0]


def cnn_backbone_layers(in_channels=1, widths=(16, 32, 64, 64), embed_dim=64, pooling="gap",
                        spatial=(28, 28), dropout=0.0):
    """conv-relu-pool blocks, then global-average-pool (or flatten) and a linear embedding."""
    layers, c = [], in_channels
    h, w = spatial
    for width in widths:
        layers += [Conv2d(c, width, 3, 1, 1), ReLU(), MaxPool2d(2, 2)]
        c, h, w = width, h // 2, w // 2
    if pooling == "gap":
        layers.append(GlobalAvgPool())
        feat = c
    elif pooling == "flatten":
        layers.append(Flatten())
        feat = c * h * w
    else:
        raise ConfigError(f"unknown pooling {pooling!r}")
    if dropout:
        layers.append(Dropout(dropout))
    layers.append(FullyConnected(feat, embed_dim))
    return layers


def build_cnn_rbf(rng, input_shape=(1, 28, 28), n_classes=10, n_centers=10, widths=(16, 32, 64, 64),
                  embed_dim=64, pooling="gap", kernel="quadratic", metric_mode="full",
                  per_cluster_sigma=False, head="rbf", dtype="float32", dropout=0.0):
    layers = cnn_backbone_layers(input_shape[0], widths, embed_dim, pooling, input_shape[1:],
                                 dropout)
    return _attach_head(layers, rng, input_shape, n_classes, n_centers, embed_dim, kernel,
                        metric_mode, per_cluster_sigma, head, dtype)


def build_mlp_rbf(rng, input_shape, n_classes, n_centers=None, hidden=(), embed_dim=None,
                  kernel="quadratic", metric_mode="euclidean", per_cluster_sigma=False,
                  head="rbf", dtype="float64"):
    """Flatten, optional ReLU hidden layers, optional linear embedding, then the head."""
    layers = [Flatten()]
    d = int(np.prod(input_shape))
    for width in hidden:
        layers += [FullyConnected(d, width), ReLU()]
        d = width
    if embed_dim:
        layers.append(FullyConnected(d, embed_dim))
        d = embed_dim
    return _attach_head(layers, rng, input_shape, n_classes, n_centers or n_classes, d, kernel,
                        metric_mode, per_cluster_sigma, head, dtype)


def _attach_head(layers, rng, input_shape, n_classes, n_centers, dim, kernel, metric_mode,
                 per_cluster_sigma, head, dtype):
    if head == "fc":
        layers = layers + [FullyConnected(dim, n_classes)]
        return Model(Network(layers, input_shape, dtype, rng), None, n_classes)
    if head != "rbf":
        raise ConfigError(f"unknown head {head!r}")
    net = Network(layers, input_shape, dtype, rng)
    # placeholder centers; train() warm-starts them with k-means
    centers = rng.standard_normal((n_centers, dim))
    rbf = RbfHead(centers, n_classes, KernelConfig(kind=kernel), metric_mode,
                  per_cluster_sigma, rng=rng, dtype=dtype)
    return Model(net, rbf)
