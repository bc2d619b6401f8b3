"""Radial activation functions evaluated on squared distances.

Each kernel is written as a function of ``r2`` (the squared metric distance)
and returns the activation together with its partial derivatives with
respect to ``r2`` and to the width ``sigma``. ``sigma`` may be a scalar or a
per-cluster vector broadcast against the last axis of ``r2``.
"""
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError

KERNEL_KINDS = ("linear", "gaussian", "thin_plate", "logistic", "inv_power", "power",
                "dsp", "quadratic")


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "quadratic"
    sigma: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    r0: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel {self.kind!r}; choose from {KERNEL_KINDS}")
        if not self.sigma > 0:
            raise ConfigError("kernel width sigma must be positive")
        if self.kind == "inv_power" and not self.alpha > 0:
            raise ConfigError("inv_power kernel needs alpha > 0")
        if self.kind == "power" and not 0 < self.beta < 1:
            raise ConfigError("power kernel needs 0 < beta < 1")

    def to_dict(self):
        return asdict(self)


def kernel_with_grads(r2, sigma, config):
    """Return ``(h, dh/dr2, dh/dsigma)`` elementwise."""
    r2 = np.asarray(r2)
    sigma = np.asarray(sigma, dtype=r2.dtype if r2.dtype.kind == "f" else float)
    if np.any(sigma <= 0):
        raise ConfigError("kernel width sigma must be positive")
    if np.any(r2 < 0):
        raise ConfigError("squared distance must be non-negative")
    s2 = sigma * sigma
    kind = config.kind
    zeros = np.zeros(np.broadcast(r2, sigma).shape, dtype=np.result_type(r2, sigma))

    if kind == "quadratic":
        h = 1 - r2 / s2
        return h, zeros - 1 / s2, 2 * r2 / (s2 * sigma)
    if kind == "gaussian":
        h = np.exp(-r2 / (2 * s2))
        return h, -h / (2 * s2), h * r2 / (s2 * sigma)
    if kind == "linear":
        r = np.sqrt(r2)
        safe = np.where(r > 0, r, 1)
        return r + zeros, np.where(r > 0, 0.5 / safe, 0) + zeros, zeros
    if kind == "thin_plate":
        # r^2 ln r, continued by its limit 0 at r = 0
        pos = r2 > 0
        log_r2 = np.log(np.where(pos, r2, 1))
        h = np.where(pos, 0.5 * r2 * log_r2, 0)
        dh = np.where(pos, 0.5 * (log_r2 + 1), 0)
        return h + zeros, dh + zeros, zeros
    if kind == "logistic":
        z = (r2 - config.r0 ** 2) / s2
        h = 0.5 * (1 - np.tanh(z / 2))  # 1 / (1 + e^z) without overflow
        dh_dz = -h * (1 - h)
        return h, dh_dz / s2, dh_dz * (-2 * (r2 - config.r0 ** 2) / (s2 * sigma))
    if kind == "inv_power":
        u = r2 + s2
        h = u ** (-config.alpha)
        dh_du = -config.alpha * u ** (-config.alpha - 1)
        return h, dh_du, dh_du * 2 * sigma
    if kind == "power":
        u = r2 + s2
        h = u ** config.beta
        dh_du = config.beta * u ** (config.beta - 1)
        return h, dh_du, dh_du * 2 * sigma
    if kind == "dsp":
        h = 1 / (1 + r2 / s2)
        return h, -h * h / s2, h * h * 2 * r2 / (s2 * sigma)
    raise ConfigError(f"unknown kernel {kind!r}")


def kernel_eval(r2, config, sigma=None):
    """Activation for squared distance ``r2``; ``sigma`` defaults to ``config.sigma``."""
    return kernel_with_grads(r2, config.sigma if sigma is None else sigma, config)[0]
