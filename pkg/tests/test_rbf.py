import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import numeric_grad, rel_err
from rbfsnt.errors import ConfigError, ShapeError, StateError
from rbfsnt.nn.functional import softmax_cross_entropy
from rbfsnt.rbf import (KERNEL_KINDS, KernelConfig, RbfHead, cluster_contributions,
                        combined_loss, kernel_eval, kernel_with_grads, kmeans, kmeans_init,
                        metric_distance_sq, rbf_backward, rbf_forward, similarity_query,
                        solve_output_weights, unsupervised_loss)

MODES = ("euclidean", "diagonal", "full")
SEEDS = range(20)


def make_head(seed, mode="full", kind="quadratic", per_cluster=False, c=3, d=4, k=3):
    r = np.random.default_rng(seed)
    head = RbfHead(r.normal(size=(c, d)), k, KernelConfig(kind=kind), mode, per_cluster, rng=r)
    if mode == "full":
        head.params["metric"] = np.eye(d) + 0.3 * r.normal(size=(d, d))
    elif mode == "diagonal":
        head.params["metric"] = 1 + 0.3 * r.normal(size=d)
    head.params["sigma"] = np.asarray(np.abs(r.normal(size=head.sigma.shape)) + 2.0)
    head.params["bias"] = r.normal(size=k)
    head.touch()
    return head


def metric_oracle(head):
    d = head.dim
    if head.metric_mode == "euclidean":
        return np.eye(d)
    a = head.params["metric"]
    if head.metric_mode == "diagonal":
        return np.diag(a * a + head.eps)
    return a.T @ a + head.eps * np.eye(d)


# distances and kernels ------------------------------------------------------

def test_distance_hand_cases():
    e = RbfHead(np.zeros((1, 2)), 2)
    assert metric_distance_sq([1.0, 1.0], [0.0, 0.0], e) == 2.0
    assert metric_distance_sq([0.3, -2.0], [0.3, -2.0], e) == 0.0
    f = RbfHead(np.zeros((1, 2)), 2, metric_mode="full")
    f.params["metric"] = 2 * np.eye(2)
    assert math.isclose(metric_distance_sq([1.0, 0.0], [0.0, 0.0], f), 4 + 1e-6, rel_tol=1e-14)


@given(arrays(np.float64, (4, 4), elements=st.floats(-3, 3)))
def test_metric_is_positive_definite(a):
    head = RbfHead(np.zeros((1, 4)), 2, metric_mode="full")
    head.params["metric"] = a
    r = head.metric_matrix()
    assert np.allclose(r, r.T)
    assert np.linalg.eigvalsh(r).min() >= head.eps * (1 - 1e-6) - 1e-12


@given(arrays(np.float64, (5, 3), elements=st.floats(-4, 4)),
       arrays(np.float64, (3,), elements=st.floats(-4, 4)), st.sampled_from(MODES))
def test_distance_nonnegative_and_matches_oracle(x, c, mode):
    head = make_head(0, mode, d=3)
    r = metric_oracle(head)
    for row in x:
        d = metric_distance_sq(row, c, head)
        diff = row - c
        assert d >= 0
        assert math.isclose(d, float(diff @ r @ diff), rel_tol=1e-9, abs_tol=1e-12)


def test_kernel_anchor_values():
    q = KernelConfig("quadratic", sigma=1.5)
    assert kernel_eval(0.0, q) == 1.0
    assert kernel_eval(1.5 ** 2, q) == 0.0
    g = KernelConfig("gaussian", sigma=1.0)
    assert kernel_eval(0.0, g) == 1.0
    assert math.isclose(kernel_eval(2.0, g), math.exp(-1), rel_tol=1e-14)
    assert kernel_eval(0.0, KernelConfig("thin_plate")) == 0.0
    assert kernel_eval(0.0, KernelConfig("linear")) == 0.0


@given(st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 5))
def test_quadratic_affine_in_r2(a, b, s):
    cfg = KernelConfig("quadratic", sigma=s)
    lhs = kernel_eval(a, cfg) + kernel_eval(b, cfg)
    rhs = 2 * kernel_eval((a + b) / 2, cfg)
    assert math.isclose(lhs, rhs, rel_tol=1e-12, abs_tol=1e-9)


@pytest.mark.parametrize("kind", KERNEL_KINDS)
@pytest.mark.parametrize("seed", SEEDS)
def test_kernel_gradcheck(kind, seed):
    r = np.random.default_rng(seed)
    cfg = KernelConfig(kind)
    r2 = r.uniform(0.2, 4.0, size=6)
    sigma = np.array(r.uniform(0.5, 2.0))
    up = r.normal(size=6)
    _, d_r2, d_s = kernel_with_grads(r2, sigma, cfg)
    f = lambda: float(np.sum(kernel_with_grads(r2, sigma, cfg)[0] * up))  # noqa: E731
    assert rel_err(d_r2 * up, numeric_grad(f, r2)) < 1e-4
    num_s = numeric_grad(f, sigma)
    if kind in ("linear", "thin_plate"):
        assert not np.any(d_s) and abs(num_s) < 1e-8
    else:
        assert rel_err(np.sum(d_s * up), num_s) < 1e-4


def test_kernel_config_validation():
    with pytest.raises(ConfigError):
        KernelConfig("nope")
    with pytest.raises(ConfigError):
        KernelConfig(sigma=0)


# forward / backward ----------------------------------------------------------

def test_one_cluster_at_center():
    head = RbfHead(np.array([[1.0, 2.0]]), 3, rng=np.random.default_rng(0))
    head.params["bias"] = np.array([0.5, -1.0, 2.0])
    h, logits = rbf_forward(head, np.array([[1.0, 2.0]]))
    assert h[0, 0] == 1.0
    assert np.allclose(logits[0], head.weight[0] + head.bias)


def test_zero_weight_gives_bias():
    head = make_head(1)
    head.params["weight"] = np.zeros_like(head.weight)
    _, logits = rbf_forward(head, np.random.default_rng(0).normal(size=(5, 4)))
    assert np.allclose(logits, head.bias)


@pytest.mark.parametrize("mode", MODES)
def test_forward_matches_scalar_evaluation(mode):
    head = make_head(2, mode, c=2, d=3, k=2)
    x = np.random.default_rng(5).normal(size=(3, 3))
    r = metric_oracle(head)
    _, logits = rbf_forward(head, x)
    s = float(head.sigma)
    for n in range(3):
        for k in range(2):
            total = head.bias[k]
            for j in range(2):
                diff = x[n] - head.centers[j]
                total += (1 - float(diff @ r @ diff) / s ** 2) * head.weight[j, k]
            assert math.isclose(logits[n, k], total, rel_tol=1e-12, abs_tol=1e-12)


def test_backward_zero_and_bias_grad():
    head = make_head(3)
    x = np.random.default_rng(0).normal(size=(4, 4))
    rbf_forward(head, x)
    grads = rbf_backward(head, np.zeros((4, 3)))
    assert all(not np.any(g) for g in grads.values())
    rbf_forward(head, x[:1])
    grads = rbf_backward(head, np.array([[0.0, 1.0, 0.0]]))
    assert np.array_equal(grads["head.bias"], [0, 1, 0])


def test_backward_needs_fresh_cache():
    head = make_head(0)
    with pytest.raises(StateError):
        rbf_backward(head, np.zeros((1, 3)))
    rbf_forward(head, np.zeros((1, 4)))
    head.set_parameter("head.bias", np.ones(3))
    with pytest.raises(StateError):
        rbf_backward(head, np.zeros((1, 3)))


def _head_loss(head, x, labels, lam, plain):
    h, logits, cache = head.forward(x, remember=False)
    sup = softmax_cross_entropy(logits, labels)[0]
    return sup + lam * head.unsupervised_terms(cache, plain=plain)[0]


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("kind", ["quadratic", "gaussian", "dsp", "inv_power"])
@pytest.mark.parametrize("seed", SEEDS)
def test_head_gradcheck(mode, kind, seed):
    per_cluster = seed % 2 == 1
    plain = seed % 4 == 3
    head = make_head(seed, mode, kind, per_cluster)
    r = np.random.default_rng(1000 + seed)
    x = r.normal(size=(5, 4))
    labels = r.integers(0, 3, size=5)
    lam = 0.7

    _, logits, cache = head.forward(x)
    _, g_logits = softmax_cross_entropy(logits, labels)
    _, g_r2, g_plain = head.unsupervised_terms(cache, plain=plain)
    gx, grads = head.backward(g_logits, cache,
                              None if g_r2 is None else lam * g_r2,
                              None if g_plain is None else lam * g_plain)
    f = lambda: _head_loss(head, x, labels, lam, plain)  # noqa: E731
    assert rel_err(gx, numeric_grad(f, x)) < 1e-4
    for name, value in head.named_parameters():
        assert rel_err(grads[name], numeric_grad(f, value)) < 1e-4, name


# clustering losses -------------------------------------------------------------

def test_unsupervised_loss_cases():
    head = RbfHead(np.array([[0.0, 0.0], [5.0, 5.0]]), 2)
    assert unsupervised_loss(head, np.array([[0.0, 0.0], [5.0, 5.0]])) == 0.0
    one = RbfHead(np.zeros((1, 2)), 2)
    assert unsupervised_loss(one, np.array([[1.0, 1.0]])) == 2.0


@pytest.mark.parametrize("seed", range(10))
def test_unsupervised_loss_brute_force(seed):
    head = make_head(seed, "full", c=2, d=3)
    x = np.random.default_rng(seed).normal(size=(3, 3))
    r = metric_oracle(head)
    best = [min(float((p - c) @ r @ (p - c)) for c in head.centers) for p in x]
    assert math.isclose(unsupervised_loss(head, x), sum(best) / 3, rel_tol=1e-12)
    plain = [min(float((p - c) @ (p - c)) for c in head.centers) for p in x]
    assert math.isclose(unsupervised_loss(head, x, plain=True), sum(plain) / 3, rel_tol=1e-12)


def test_combined_loss_components():
    head = make_head(4, "diagonal")
    x = np.random.default_rng(4).normal(size=(6, 4))
    y = np.arange(6) % 3
    _, logits = rbf_forward(head, x)
    sup = softmax_cross_entropy(logits, y)[0]
    assert combined_loss(head, x, y, 0.0) == sup
    assert math.isclose(combined_loss(head, x, y, 0.4), sup + 0.4 * unsupervised_loss(head, x),
                        rel_tol=1e-12)


# k-means ------------------------------------------------------------------------

def test_kmeans_single_cluster_is_mean():
    x = np.random.default_rng(0).normal(size=(30, 3))
    centers, assign, _ = kmeans_init(x, 1, np.random.default_rng(1))
    assert np.allclose(centers[0], x.mean(axis=0)) and not assign.any()


def test_kmeans_repeated_points_zero_loss():
    pts = np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0]])
    x = np.repeat(pts, 7, axis=0)
    _, _, loss = kmeans_init(x, 3, np.random.default_rng(2))
    assert loss == 0.0


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_history_non_increasing(seed, k):
    r = np.random.default_rng(seed)
    x = np.concatenate([r.normal(loc=r.uniform(-5, 5, 2), size=(15, 2)) for _ in range(4)])
    res = kmeans(x, k, np.random.default_rng(seed + 1))
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9 * (1 + h[:-1]))


def test_kmeans_rejects_bad_k():
    with pytest.raises(ConfigError):
        kmeans(np.zeros((3, 2)), 4, np.random.default_rng(0))


# closed-form weights -------------------------------------------------------------

def test_solve_identity_and_ridge_limit():
    y = np.random.default_rng(0).normal(size=(4, 2))
    assert np.allclose(solve_output_weights(np.eye(4), y, 1e-12), y)
    assert np.abs(solve_output_weights(np.eye(4), y, 1e12)).max() < 1e-10


def test_solve_against_normal_equations():
    r = np.random.default_rng(5)
    h, y = r.normal(size=(6, 3)), r.normal(size=(6, 2))
    w = solve_output_weights(h, y, 1e-8)
    # independent oracle: least squares on the augmented system
    aug = np.vstack([h, np.sqrt(1e-8) * np.eye(3)])
    ref = np.linalg.lstsq(aug, np.vstack([y, np.zeros((3, 2))]), rcond=None)[0]
    assert np.allclose(w, ref, atol=1e-9)


def test_solve_rejects_nonpositive_alpha():
    with pytest.raises(ConfigError):
        solve_output_weights(np.eye(2), np.eye(2), 0.0)


# retrieval -----------------------------------------------------------------------

def brute_rank(head, q, corpus):
    r = metric_oracle(head)
    d = [float((c - q) @ r @ (c - q)) for c in corpus]
    order = sorted(range(len(corpus)), key=lambda i: (d[i], i))
    far = sorted(range(len(corpus)), key=lambda i: (-d[i], i))
    return order, far, d


@pytest.mark.parametrize("mode", MODES)
def test_similarity_query_small_corpus(mode):
    head = make_head(7, mode, d=3)
    r = np.random.default_rng(7)
    corpus = r.normal(size=(10, 3))
    corpus[6] = corpus[2]  # a tie
    near, far = similarity_query(head, corpus[2], corpus, 10)
    order, far_order, d = brute_rank(head, corpus[2], corpus)
    assert [n.index for n in near] == order and [n.index for n in far] == far_order
    assert near[0].index == 2 and near[0].distance_sq == 0.0 and near[1].index == 6


def test_similarity_query_euclidean_is_plain_nn():
    head = RbfHead(np.zeros((1, 2)), 2)
    corpus = np.random.default_rng(0).normal(size=(20, 2))
    q = np.array([0.1, -0.2])
    near, _ = similarity_query(head, q, corpus, 5)
    assert [n.index for n in near] == list(np.argsort(((corpus - q) ** 2).sum(1), kind="stable")[:5])


def test_similarity_query_errors():
    head = RbfHead(np.zeros((1, 2)), 2)
    with pytest.raises(ShapeError):
        similarity_query(head, np.zeros(2), np.zeros((0, 2)), 1)
    with pytest.raises(ConfigError):
        similarity_query(head, np.zeros(2), np.zeros((3, 2)), 4)


# contributions ---------------------------------------------------------------------

def test_contributions():
    one = make_head(0, c=1)
    x = np.random.default_rng(0).normal(size=4)
    _, logits = rbf_forward(one, x[None])
    assert np.allclose(cluster_contributions(one, x)[0], logits[0] - one.bias)
    three = make_head(1, c=3)
    contrib = cluster_contributions(three, x)
    _, logits = rbf_forward(three, x[None])
    assert np.allclose(contrib.sum(axis=0) + three.bias, logits[0], atol=1e-12)
    three.params["weight"] = np.zeros_like(three.weight)
    assert not cluster_contributions(three, x).any()


def test_sigma_kept_positive():
    head = make_head(0)
    head.params["sigma"] = np.array(-2.0)
    head.enforce_constraints()
    assert float(head.sigma) == 2.0
