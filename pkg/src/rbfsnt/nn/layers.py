"""Layer objects: a hyperparameter spec plus materialized parameters."""
import numpy as np

from ..errors import ConfigError, ShapeError
from . import functional as F

LAYER_KINDS = ("conv2d", "maxpool2d", "avgpool2d", "fully_connected", "relu",
               "dropout", "flatten", "global_avg_pool")


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Layer:
    kind = None
    params = {}

    def spec(self):
        return {"kind": self.kind}

    def output_shape(self, shape):
        return shape

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, cache, need_param_grads=True):
        """Return ``(grad_input, {param_name: grad})``."""
        raise NotImplementedError

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0):
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ConfigError("conv2d needs kernel_size >= 1, stride >= 1, padding >= 0")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.params = {}

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                "stride": self.stride, "padding": self.padding}

    def init_params(self, rng, dtype):
        k = self.kernel_size
        shape = (self.out_channels, self.in_channels, k, k)
        self.params = {
            "weight": glorot_uniform(rng, shape, self.in_channels * k * k,
                                     self.out_channels * k * k, dtype),
            "bias": np.zeros(self.out_channels, dtype=dtype),
        }

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, F.conv_output_size(h, k, s, p), F.conv_output_size(w, k, s, p))

    def forward(self, x, training=False, rng=None):
        return F.conv2d_forward(x, self.params["weight"], self.params["bias"],
                                self.stride, self.padding)

    def backward(self, grad, cache, need_param_grads=True):
        gx, gw, gb = F.conv2d_backward(grad, cache, need_param_grads)
        return gx, ({"weight": gw, "bias": gb} if need_param_grads else {})


class _Pool2d(Layer):
    pool_kind = None

    def __init__(self, kernel_size=2, stride=None):
        stride = kernel_size if stride is None else stride
        if kernel_size < 1 or stride < 1:
            raise ConfigError("pool needs kernel_size >= 1 and stride >= 1")
        self.kernel_size = kernel_size
        self.stride = stride

    def spec(self):
        return {"kind": self.kind, "kernel_size": self.kernel_size, "stride": self.stride}

    def output_shape(self, shape):
        c, h, w = shape
        k, s = self.kernel_size, self.stride
        if k > h or k > w:
            raise ShapeError(f"pool window {k} exceeds input {h}x{w}")
        return (c, F.conv_output_size(h, k, s, 0), F.conv_output_size(w, k, s, 0))

    def forward(self, x, training=False, rng=None):
        return F.pool2d_forward(x, self.pool_kind, self.kernel_size, self.stride)

    def backward(self, grad, cache, need_param_grads=True):
        return F.pool2d_backward(grad, cache), {}


class MaxPool2d(_Pool2d):
    kind = "maxpool2d"
    pool_kind = "max"


class AvgPool2d(_Pool2d):
    kind = "avgpool2d"
    pool_kind = "avg"


class FullyConnected(Layer):
    kind = "fully_connected"

    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.params = {}

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features}

    def init_params(self, rng, dtype):
        shape = (self.in_features, self.out_features)
        self.params = {
            "weight": glorot_uniform(rng, shape, self.in_features, self.out_features, dtype),
            "bias": np.zeros(self.out_features, dtype=dtype),
        }

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"fully_connected expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, x, training=False, rng=None):
        return F.fully_connected_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad, cache, need_param_grads=True):
        gx, gw, gb = F.fully_connected_backward(grad, cache, need_param_grads)
        return gx, ({"weight": gw, "bias": gb} if need_param_grads else {})


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        return F.relu(x)

    def backward(self, grad, cache, need_param_grads=True, guided=False):
        return F.relu_backward(grad, cache, guided=guided), {}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p=0.5):
        if not 0 <= p < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def spec(self):
        return {"kind": self.kind, "p": self.p}

    def forward(self, x, training=False, rng=None):
        return F.dropout(x, self.p, training, rng)

    def backward(self, grad, cache, need_param_grads=True):
        return F.dropout_backward(grad, cache), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, training=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, need_param_grads=True):
        return grad.reshape(cache), {}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x, training=False, rng=None):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, grad, cache, need_param_grads=True):
        n, c, h, w = cache
        return np.broadcast_to(grad[:, :, None, None] / (h * w), cache).copy(), {}


_BY_KIND = {cls.kind: cls for cls in (Conv2d, MaxPool2d, AvgPool2d, FullyConnected, ReLU,
                                      Dropout, Flatten, GlobalAvgPool)}


def layer_from_spec(spec):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in _BY_KIND:
        raise ConfigError(f"unknown layer kind {kind!r}")
    return _BY_KIND[kind](**spec)
