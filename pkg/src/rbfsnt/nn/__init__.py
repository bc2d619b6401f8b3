from .functional import (conv2d_backward, conv2d_forward, dropout, dropout_backward,
                         fully_connected_backward, fully_connected_forward, log_softmax,
                         pool2d_backward, pool2d_forward, relu, relu_backward, softmax,
                         softmax_cross_entropy)
from .layers import (LAYER_KINDS, AvgPool2d, Conv2d, Dropout, Flatten, FullyConnected,
                     GlobalAvgPool, MaxPool2d, ReLU, layer_from_spec)
from .network import DTYPES, Network, Trace

__all__ = [
    "AvgPool2d", "Conv2d", "DTYPES", "Dropout", "Flatten", "FullyConnected", "GlobalAvgPool",
    "LAYER_KINDS", "MaxPool2d", "Network", "ReLU", "Trace", "conv2d_backward",
    "conv2d_forward", "dropout", "dropout_backward", "fully_connected_backward",
    "fully_connected_forward", "layer_from_spec", "log_softmax", "pool2d_backward",
    "pool2d_forward", "relu", "relu_backward", "softmax", "softmax_cross_entropy",
]
