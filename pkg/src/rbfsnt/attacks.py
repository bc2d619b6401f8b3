"""White-box attacks: FGSM, single-step gradient attack, and DeepFool.

All attacks read the model and never write to it; gradients come from
per-call traces, so images can be attacked from several threads at once.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .csvio import write_csv
from .errors import ConfigError
from .nn.functional import softmax, softmax_cross_entropy

ATTACKS = ("fgsm", "gradient", "deepfool")


@dataclass
class AttackResult:
    attack: str
    strength: float
    original: np.ndarray
    perturbation: np.ndarray  # before clipping
    adversarial: np.ndarray   # clip(original + perturbation, 0, 1)
    label: int
    original_pred: int
    adversarial_pred: int
    gt_conf_before: float
    gt_conf_after: float
    success: bool
    iterations: int = 1

    @property
    def delta(self):
        """What actually changed in the image, after clipping."""
        return self.adversarial - self.original

    @property
    def l2(self):
        return float(np.sqrt(np.sum(self.delta.astype(np.float64) ** 2)))

    @property
    def linf(self):
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0


def _probs(model, image):
    logits = model.logits(image[None])[0].astype(np.float64)
    return softmax(logits[None])[0]


def _finish(model, attack, strength, image, eta, adv, label, iterations=1):
    before = _probs(model, image)
    after = _probs(model, adv)
    pred_after = int(after.argmax())
    return AttackResult(attack, float(strength), image, eta, adv, int(label),
                        int(before.argmax()), pred_after, float(before[label]),
                        float(after[label]), pred_after != label, iterations)


def _check_image(model, image):
    image = np.asarray(image, dtype=np.dtype(model.dtype))
    if image.shape != tuple(model.input_shape):
        raise ConfigError(f"image shape {image.shape} does not match model input {model.input_shape}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ConfigError("image values must lie in [0, 1]")
    return image


def loss_gradient(model, image, label):
    """Gradient of the cross-entropy of ``label`` with respect to the image."""
    def objective(logits):
        return softmax_cross_entropy(logits, np.array([label]))
    _, g, _ = model.input_gradient(image[None], objective)
    return g[0]


def fgsm(model, image, label, epsilon):
    """One signed-gradient step of size ``epsilon`` on the cross-entropy, then clipping."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    image = _check_image(model, image)
    g = loss_gradient(model, image, label)
    eta = (epsilon * np.sign(g)).astype(image.dtype)
    adv = np.clip(image + eta, 0, 1)
    return _finish(model, "fgsm", epsilon, image, eta, adv, label)


def gradient_attack(model, image, label, step):
    """Single step down the gradient of the ground-truth probability.

    The gradient is scaled to unit L2 norm before multiplying by ``step``; a
    zero gradient leaves the image unchanged.
    """
    if step < 0:
        raise ConfigError("step must be >= 0")
    image = _check_image(model, image)

    def objective(logits):
        p = softmax(logits.astype(np.float64))[0]
        g = -p[label] * p
        g[label] += p[label]
        return p[label], g[None].astype(logits.dtype)

    _, g, _ = model.input_gradient(image[None], objective)
    g = g[0].astype(np.float64)
    norm = np.sqrt(np.sum(g * g))
    eta = np.zeros_like(image) if norm == 0 else (-step * g / norm).astype(image.dtype)
    adv = np.clip(image + eta, 0, 1)
    return _finish(model, "gradient", step, image, eta, adv, label)


def _logit_jacobian(model, x):
    """Logits and the gradient of every logit w.r.t. ``x`` from one batched pass."""
    k = model.n_classes
    batch = np.repeat(x[None], k, axis=0)
    seed = np.eye(k, dtype=np.dtype(model.dtype))
    logits, trace = model.forward(batch, remember=False)
    grads, _ = model.backward(trace, seed, need_param_grads=False)
    return logits[0].astype(np.float64), grads.astype(np.float64)


def deepfool(model, image, label=None, max_iter=50, overshoot=0.02):
    """Iterative linearized projection onto the nearest class boundary.

    Each step moves to the closest boundary of the linearized classifier; the
    accumulated step is scaled by ``1 + overshoot`` and clipped to the valid
    pixel range before the next linearization.
    """
    if max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    image = _check_image(model, image)
    x0 = image.astype(np.float64)
    start = int(model.predict(image[None])[0])
    label = start if label is None else int(label)
    total = np.zeros_like(x0)
    x = image
    it = 0
    if start == label:
        pred = start
        while pred == start and it < max_iter:
            f, grads = _logit_jacobian(model, x)
            best, step = np.inf, None
            for k in range(model.n_classes):
                if k == start:
                    continue
                w = grads[k] - grads[start]
                fk = f[k] - f[start]
                wn = np.sum(w * w)
                if wn == 0:
                    continue
                dist = abs(fk) / np.sqrt(wn)
                if dist < best:
                    best, step = dist, abs(fk) / wn * w
            if step is None:
                break
            total += step
            it += 1
            x = np.clip(x0 + (1 + overshoot) * total, 0, 1).astype(image.dtype)
            pred = int(model.predict(x[None])[0])
    eta = ((1 + overshoot) * total).astype(image.dtype) if it else np.zeros_like(image)
    return _finish(model, "deepfool", overshoot, image, eta, x, label, it)


def run_attack(model, image, label, attack, strength=None, max_iter=50):
    if attack == "fgsm":
        return fgsm(model, image, label, 0.25 if strength is None else strength)
    if attack == "gradient":
        return gradient_attack(model, image, label, 1.0 if strength is None else strength)
    if attack == "deepfool":
        return deepfool(model, image, label, max_iter, 0.02 if strength is None else strength)
    raise ConfigError(f"unknown attack {attack!r}; choose from {ATTACKS}")


def attack_many(model, images, labels, attack, strength=None, max_iter=50, threads=1):
    """Attack every image; results come back in input order."""
    def one(i):
        return run_attack(model, images[i], int(labels[i]), attack, strength, max_iter)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(images))))
    return [one(i) for i in range(len(images))]


ATTACK_CSV_COLUMNS = ("sample_id", "attack", "strength", "success", "gt_conf_before",
                      "gt_conf_after", "l2", "linf")


def write_attack_csv(path, results, sample_ids=None):
    ids = range(len(results)) if sample_ids is None else sample_ids
    rows = ([sid, r.attack, r.strength, r.success, r.gt_conf_before, r.gt_conf_after,
             r.l2, r.linf] for sid, r in zip(ids, results))
    write_csv(path, ATTACK_CSV_COLUMNS, rows)


def fgsm_min_epsilon(model, image, label, grid):
    """Smallest ``epsilon`` in ``grid`` at which FGSM flips the prediction, or None."""
    g = loss_gradient(model, _check_image(model, image), label)
    for eps in sorted(grid):
        adv = np.clip(image + eps * np.sign(g), 0, 1).astype(image.dtype)
        if int(model.predict(adv[None])[0]) != label:
            return eps, adv
    return None, None
