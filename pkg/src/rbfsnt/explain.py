"""Guided-backpropagation feature-response maps and local spatial entropy."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

GUIDED_KINDS = {"conv2d", "maxpool2d", "avgpool2d", "fully_connected", "relu", "flatten"}
ENTROPY_METHODS = ("histogram", "intensity")


@dataclass
class FeatureResponseMap:
    map: np.ndarray          # (C, H, W), same shape as the input
    grayscale: np.ndarray    # (H, W) in [0, 1]
    entropy_map: np.ndarray  # (H // patch, W // patch)
    mean_entropy: float


def _backbone(network):
    return getattr(network, "backbone", network)


def seed_stop(network):
    """Index one past the layer whose activation seeds the backward pass.

    That is the last convolution, or the ReLU right after it when there is one.
    """
    layers = _backbone(network).layers
    convs = [i for i, layer in enumerate(layers) if layer.kind == "conv2d"]
    if not convs:
        raise ConfigError("network has no convolutional layer to seed from")
    last = convs[-1]
    if last + 1 < len(layers) and layers[last + 1].kind == "relu":
        return last + 2
    return last + 1


def guided_backprop(network, images, stop=None, guided=True):
    """Input-shaped response maps for a batch ``(N, C, H, W)`` (or one image).

    The forward pass runs up to the seed layer, whose own activation is sent
    back through the network with the guided ReLU rule.
    """
    net = _backbone(network)
    single = np.ndim(images) == 3
    x = np.asarray(images, dtype=net.dtype)
    if single:
        x = x[None]
    stop = seed_stop(net) if stop is None else stop
    for layer in net.layers[:stop]:
        if layer.kind not in GUIDED_KINDS:
            raise ConfigError(f"no guided rule for layer kind {layer.kind!r}")
    act, trace = net.forward(x, stop=stop, remember=False)
    gx, _ = net.backward(act, trace, need_param_grads=False, guided=guided)
    return gx[0] if single else gx


def to_grayscale(response):
    """Channel mean followed by min-max scaling; a constant map becomes zeros."""
    r = np.asarray(response, dtype=np.float64)
    if r.ndim == 3:
        if r.shape[0] not in (1, 3):
            raise ShapeError(f"expected 1 or 3 channels, got {r.shape[0]}")
        r = r.mean(axis=0)
    elif r.ndim != 2:
        raise ShapeError(f"expected (C, H, W) or (H, W), got shape {r.shape}")
    if r.size == 0:
        return r
    lo, hi = r.min(), r.max()
    if hi - lo == 0:
        return np.zeros_like(r)
    return (r - lo) / (hi - lo)


def _tiles(gray, patch):
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {g.shape}")
    if patch < 1 or g.shape[0] < patch or g.shape[1] < patch:
        raise ShapeError(f"patch {patch} does not fit a {g.shape} map")
    ph, pw = g.shape[0] // patch, g.shape[1] // patch
    t = g[:ph * patch, :pw * patch].reshape(ph, patch, pw, patch).transpose(0, 2, 1, 3)
    return t.reshape(ph, pw, patch * patch)


def local_entropy(gray, patch=3, levels=256, method="histogram"):
    """Shannon entropy (bits) of each non-overlapping ``patch x patch`` tile.

    ``histogram`` counts quantized gray levels inside the tile. ``intensity``
    instead treats the tile's normalized intensities as a distribution over
    pixel positions.
    """
    t = _tiles(gray, patch)
    n = t.shape[-1]
    if method == "histogram":
        q = np.clip(np.round(t * (levels - 1)), 0, levels - 1).astype(np.int64)
        # each pixel's share is the count of equal pixels; averaging -log2 over
        # pixels is the same as summing -p log2 p over occupied levels
        counts = (q[..., :, None] == q[..., None, :]).sum(axis=-1)
        return -np.mean(np.log2(counts / n), axis=-1)
    if method == "intensity":
        s = t.sum(axis=-1, keepdims=True)
        p = np.divide(t, s, out=np.zeros_like(t), where=s > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log2(p), 0.0)
        return -terms.sum(axis=-1)
    raise ConfigError(f"unknown entropy method {method!r}; choose from {ENTROPY_METHODS}")


def average_entropy(entropy_map):
    e = np.asarray(entropy_map, dtype=np.float64)
    if e.size == 0:
        raise ShapeError("entropy map is empty")
    return float(e.mean())


def feature_response(network, images, patch=3, method="histogram"):
    """Full map pipeline for one image or a batch; returns one or a list of maps."""
    single = np.ndim(images) == 3
    maps = guided_backprop(network, images[None] if single else images)
    out = []
    for m in maps:
        gray = to_grayscale(m)
        ent = local_entropy(gray, patch, method=method)
        out.append(FeatureResponseMap(m, gray, ent, average_entropy(ent)))
    return out[0] if single else out
