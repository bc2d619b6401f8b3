"""Ordered layer stacks with per-call traces."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError, StateError
from .layers import layer_from_spec

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class Trace:
    """Scratch state of one forward pass: per-layer caches, switches included.

    Traces belong to the caller, which is what makes concurrent inference on a
    shared network safe.
    """
    caches: list
    version: int
    stop: int
    training: bool = False
    outputs: list = field(default_factory=list)


class Network:
    def __init__(self, layers, input_shape, dtype="float64", rng=None):
        if dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = dtype
        self.version = 0
        self._last_trace = None
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            if hasattr(layer, "init_params") and not layer.params:
                if rng is None:
                    raise ConfigError("an rng is needed to initialize parameters")
                layer.init_params(rng, DTYPES[dtype])
        self.output_shape = shape

    @classmethod
    def from_specs(cls, specs, input_shape, dtype="float64", rng=None):
        return cls([layer_from_spec(s) for s in specs], input_shape, dtype, rng)

    def specs(self):
        return [layer.spec() for layer in self.layers]

    # parameters ------------------------------------------------------------

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield f"layers.{i}.{name}", value

    def set_parameter(self, name, value):
        _, idx, pname = name.split(".")
        layer = self.layers[int(idx)]
        if layer.params[pname].shape != value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {layer.params[pname].shape}")
        layer.params[pname] = value
        self.touch()

    def touch(self):
        """Record a parameter mutation; outstanding traces become stale."""
        self.version += 1
        self._last_trace = None

    def astype(self, dtype):
        for layer in self.layers:
            for k, v in layer.params.items():
                layer.params[k] = v.astype(DTYPES[dtype])
        self.dtype = dtype
        self.touch()
        return self

    @property
    def last_trace(self):
        return self._last_trace

    # passes ----------------------------------------------------------------

    def forward(self, x, training=False, rng=None, stop=None, keep_outputs=False, remember=True):
        """Run layers ``[0, stop)`` and return ``(output, trace)``."""
        x = np.asarray(x, dtype=DTYPES[self.dtype])
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match {self.input_shape}")
        stop = len(self.layers) if stop is None else stop
        caches, outputs = [], []
        for layer in self.layers[:stop]:
            x, cache = layer.forward(x, training=training, rng=rng)
            caches.append(cache)
            if keep_outputs:
                outputs.append(x)
        trace = Trace(caches, self.version, stop, training, outputs)
        if remember:
            self._last_trace = trace
        return x, trace

    def backward(self, grad, trace=None, need_param_grads=True, guided=False):
        """Backpropagate ``grad`` through the layers recorded in ``trace``.

        Returns ``(grad_input, {param_name: grad})``. With ``guided=True`` every
        ReLU also blocks negative upstream gradients.
        """
        trace = self._last_trace if trace is None else trace
        if trace is None:
            raise StateError("backward called before forward")
        if trace.version != self.version:
            raise StateError("trace is stale: parameters changed after the forward pass")
        grads = {}
        for i in range(trace.stop - 1, -1, -1):
            layer = self.layers[i]
            if layer.kind == "relu":
                grad, pg = layer.backward(grad, trace.caches[i], guided=guided)
            else:
                grad, pg = layer.backward(grad, trace.caches[i], need_param_grads)
            for name, g in pg.items():
                grads[f"layers.{i}.{name}"] = g
        return grad, grads

    def __call__(self, x):
        return self.forward(x)[0]
