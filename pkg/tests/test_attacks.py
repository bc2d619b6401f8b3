import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import numeric_grad
from rbfsnt.attacks import (attack_many, deepfool, fgsm, fgsm_min_epsilon, gradient_attack,
                            run_attack, write_attack_csv)
from rbfsnt.checkpoint import dumps
from rbfsnt.errors import ConfigError
from rbfsnt.model import Model, build_cnn_rbf
from rbfsnt.nn import Flatten, FullyConnected, Network, ReLU
from rbfsnt.nn.functional import softmax_cross_entropy


def linear_model(w, b):
    w = np.asarray(w, dtype=float)
    net = Network([Flatten(), FullyConnected(w.shape[0], w.shape[1])], (1, 1, w.shape[0]),
                  rng=np.random.default_rng(0))
    net.layers[1].params["weight"] = w
    net.layers[1].params["bias"] = np.asarray(b, dtype=float)
    net.touch()
    return Model(net, None, w.shape[1])


def small_model(seed=0):
    net = Network([Flatten(), FullyConnected(6, 8), ReLU(), FullyConnected(8, 3)], (1, 2, 3),
                  rng=np.random.default_rng(seed))
    return Model(net, None, 3)


def test_fgsm_zero_epsilon():
    m = small_model()
    x = np.random.default_rng(0).uniform(size=(1, 2, 3))
    pred = int(m.predict(x[None])[0])
    for label in range(3):
        r = fgsm(m, x, label, 0.0)
        assert np.array_equal(r.adversarial, x)
        assert r.success == (pred != label)


@given(st.integers(0, 1000), st.floats(0, 1), st.integers(0, 2))
def test_fgsm_bounds(seed, eps, label):
    m = small_model(seed % 5)
    x = np.random.default_rng(seed).uniform(size=(1, 2, 3))
    r = fgsm(m, x, label, eps)
    assert np.all(r.adversarial >= 0) and np.all(r.adversarial <= 1)
    assert np.max(np.abs(r.perturbation)) <= eps
    # (x + eps) - x can round one ulp past eps
    assert np.max(np.abs(r.adversarial - x)) <= eps + 4 * np.finfo(np.float64).eps
    nz = r.perturbation[r.perturbation != 0]
    assert np.all(np.abs(nz) == eps)
    assert np.array_equal(r.adversarial, np.clip(x + r.perturbation, 0, 1))
    assert r.success == (r.adversarial_pred != label)


def test_fgsm_linear_two_pixel_matches_fd_sign():
    m = linear_model([[1.0, -2.0], [0.5, 3.0]], [0.1, -0.1])
    x = np.array([[[0.4, 0.6]]])
    label = 0

    def loss():
        return softmax_cross_entropy(m.logits(x[None]), np.array([label]))[0]

    g = numeric_grad(loss, x)
    r = fgsm(m, x, label, 0.1)
    assert np.array_equal(r.perturbation, 0.1 * np.sign(g))


def test_gradient_attack_trivial_cases():
    m = small_model()
    x = np.random.default_rng(1).uniform(size=(1, 2, 3))
    assert np.array_equal(gradient_attack(m, x, 0, 0.0).adversarial, x)
    flat = Model(Network([Flatten(), FullyConnected(6, 3)], (1, 2, 3), rng=np.random.default_rng(0)),
                 None, 3)
    flat.backbone.layers[1].params["weight"][...] = 0
    flat.backbone.layers[1].params["bias"][...] = [5.0, 0.0, 0.0]
    r = gradient_attack(flat, x, 0, 2.0)
    assert np.array_equal(r.adversarial, x) and not r.success


def test_gradient_attack_unit_step():
    m = small_model(2)
    x = np.full((1, 2, 3), 0.5)
    r = gradient_attack(m, x, 1, 0.1)
    assert np.isclose(np.linalg.norm(r.perturbation), 0.1)


def test_deepfool_already_misclassified():
    m = small_model()
    x = np.random.default_rng(0).uniform(size=(1, 2, 3))
    wrong = (int(m.predict(x[None])[0]) + 1) % 3
    r = deepfool(m, x, wrong)
    assert r.iterations == 0 and not r.perturbation.any() and r.success


@pytest.mark.parametrize("seed", range(10))
def test_deepfool_binary_linear_one_step(seed):
    r = np.random.default_rng(seed)
    w = r.normal(size=(4, 2)) * 0.2
    x = np.full((1, 1, 4), 0.5)
    wd = w[:, 1] - w[:, 0]
    # class 0 wins, with the boundary 0.05 away so the projection stays in the box
    b = np.array([0.0, -x.reshape(-1) @ wd - 0.05 * np.linalg.norm(wd)])
    m = linear_model(w, b)
    start = int(m.predict(x[None])[0])
    res = deepfool(m, x, start, max_iter=1, overshoot=0.0)
    other = 1 - start
    wd = w[:, other] - w[:, start]
    f = float(x.reshape(-1) @ wd + b[other] - b[start])
    expected = -f * wd / (wd @ wd)
    assert np.allclose(res.perturbation.reshape(-1), expected, atol=1e-12)
    logits = m.logits(res.adversarial[None])[0]
    assert abs(logits[other] - logits[start]) < 1e-8


def test_attacks_do_not_mutate_model_and_threads_agree(tmp_path):
    m = build_cnn_rbf(np.random.default_rng(0), input_shape=(1, 10, 10), n_classes=3, n_centers=3,
                      widths=(3,), embed_dim=4, dtype="float64")
    x = np.random.default_rng(1).uniform(size=(5, 1, 10, 10))
    y = m.predict(x)
    before = dumps(m)
    for kind in ("fgsm", "gradient", "deepfool"):
        serial = attack_many(m, x, y, kind, max_iter=5)
        threaded = attack_many(m, x, y, kind, max_iter=5, threads=3)
        assert [r.adversarial.tobytes() for r in serial] == [r.adversarial.tobytes() for r in threaded]
    assert dumps(m) == before
    write_attack_csv(tmp_path / "a.csv", serial, [10, 11, 12, 13, 14])
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "sample_id,attack,strength,success,gt_conf_before,gt_conf_after,l2,linf"
    assert lines[1].startswith("10,deepfool,0.02,")


def test_bad_inputs():
    m = small_model()
    with pytest.raises(ConfigError):
        fgsm(m, np.full((1, 2, 3), 2.0), 0, 0.1)
    with pytest.raises(ConfigError):
        fgsm(m, np.zeros((1, 2, 3)), 0, -0.1)
    with pytest.raises(ConfigError):
        run_attack(m, np.zeros((1, 2, 3)), 0, "onepixel")
    with pytest.raises(ConfigError):
        deepfool(m, np.zeros((1, 2, 3)), max_iter=0)


# on the trained reference model ----------------------------------------------------

def test_gradient_attack_lowers_ground_truth_confidence(trained_mnist, mnist):
    model = trained_mnist["model"]
    _, test_set = mnist
    idx = np.random.default_rng(20).choice(len(test_set), 20, replace=False)
    for i in idx:
        r = gradient_attack(model, test_set.images[i], int(test_set.labels[i]), 0.1)
        assert r.gt_conf_after <= r.gt_conf_before + 1e-6


def test_deepfool_smaller_than_matched_fgsm(trained_mnist, correct_test_subset):
    model = trained_mnist["model"]
    subset, _ = correct_test_subset
    grid = np.round(np.arange(0.002, 0.6, 0.002), 3)
    wins = 0
    for i in range(50):
        x, y = subset.images[i], int(subset.labels[i])
        df = deepfool(model, x, y, max_iter=50)
        eps, adv = fgsm_min_epsilon(model, x, y, grid)
        fg_l2 = np.inf if eps is None else np.linalg.norm((adv - x).astype(np.float64))
        if df.success and df.l2 < fg_l2:
            wins += 1
    print(f"deepfool smaller than matched fgsm on {wins}/50")
    assert wins >= 35
