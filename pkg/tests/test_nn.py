import numpy as np
import pytest

from metapool import nn
from metapool.nn import (
    Adam,
    AdamState,
    ConvPoolClassifier,
    NNError,
    adam_step,
    batchnorm,
    conv2d,
    conv3x3_batched,
    linear_softmax_xent,
    load_checkpoint,
    mse_loss,
    one_hot,
    save_checkpoint,
    sgd_step,
)
from metapool.tensor import (
    Record,
    ShapeError,
    Tensor,
    finite_difference_check,
    grad,
)


def brute_force_conv(img, kernels, bias):
    """Nested-loop 3x3 cross-correlation with pad 1, stride 1."""
    c_in, h, w = img.shape
    c_out = kernels.shape[0]
    padded = np.zeros((c_in, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = img
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for ci in range(c_in):
                    for kh in range(3):
                        for kw in range(3):
                            acc += kernels[o, ci, kh, kw] * padded[ci, i + kh, j + kw]
                out[o, i, j] = acc + bias[o]
    return out


# -- conv --------------------------------------------------------------------

def test_conv2d_zero_kernels_gives_bias():
    img = np.random.default_rng(0).uniform(size=(2, 4, 4))
    with Record():
        out = conv2d(img, np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5])).numpy()
    assert np.allclose(out[0], 1.0) and np.allclose(out[1], -2.0) and np.allclose(out[2], 0.5)


def test_conv2d_identity_kernel():
    img = np.random.default_rng(1).uniform(size=(1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    with Record():
        out = conv2d(img, k, np.zeros(1)).numpy()
    assert np.allclose(out, img, rtol=1e-15)


def test_conv2d_matches_brute_force_oracle():
    rng = np.random.default_rng(2)
    img = rng.normal(size=(1, 4, 4))
    k = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=2)
    with Record():
        got = conv2d(img, k, b).numpy()
    assert np.allclose(got, brute_force_conv(img, k, b), rtol=1e-13, atol=1e-14)


def test_conv2d_channel_mismatch():
    with Record():
        with pytest.raises(ShapeError, match="channel"):
            conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv3x3_batched_matches_reference():
    rng = np.random.default_rng(3)
    n, bsz, h = 2, 3, 6
    x = rng.uniform(size=(n, bsz, h, h, 1))
    k = rng.normal(size=(n, 3, 3, 1, 4))
    b = rng.normal(size=(n, 4))
    with Record() as rec:
        out = conv3x3_batched(rec.leaf(x), rec.leaf(k), rec.leaf(b)).numpy()
    for t in range(n):
        for i in range(bsz):
            want = brute_force_conv(x[t, i].transpose(2, 0, 1),
                                    k[t].transpose(3, 2, 0, 1), b[t])
            assert np.allclose(out[t, i], want.transpose(1, 2, 0), rtol=1e-12, atol=1e-13)


def test_conv2d_gradient_matches_fd():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(1, 4, 4))
    b = rng.normal(size=2)
    coeff = rng.normal(size=(2, 4, 4))

    def f(kt):
        return (conv2d(Tensor(img), kt.reshape((2, 1, 3, 3)), Tensor(b)) * Tensor(coeff)).sum()

    err = finite_difference_check(f, rng.normal(size=18), 1e-6)
    assert err < 1e-4

    def fx(xt):
        k = rng2.normal(size=(2, 1, 3, 3))
        return (conv2d(xt.reshape((1, 4, 4)), Tensor(_K), Tensor(b)) * Tensor(coeff)).sum()

    rng2 = np.random.default_rng(5)
    _K = rng2.normal(size=(2, 1, 3, 3))
    err = finite_difference_check(fx, img.reshape(-1), 1e-6)
    assert err < 1e-4


# -- batchnorm -----------------------------------------------------------------

def test_batchnorm_constant_input_centers_to_zero():
    x = np.full((3, 2, 4, 4), 5.0)
    with Record():
        y, _, _ = batchnorm(x, np.ones(2), np.zeros(2), "train", np.zeros(2), np.ones(2))
    assert np.allclose(y.numpy(), 0.0, atol=1e-3)


def test_batchnorm_two_values_normalize_to_pm1():
    x = np.zeros((2, 1, 1, 1))
    x[0], x[1] = 1.0, 3.0
    with Record():
        y, _, _ = batchnorm(x, np.ones(1), np.zeros(1), "train", np.zeros(1), np.ones(1))
    assert np.allclose(np.sort(y.numpy().ravel()), [-1.0, 1.0], atol=1e-4)


def test_batchnorm_eval_uses_running_stats():
    x = np.random.default_rng(6).normal(size=(2, 1, 2, 2))
    m, v, sc, sh, eps = np.array([0.3]), np.array([2.0]), np.array([1.5]), np.array([-0.2]), 1e-5
    with Record():
        y, rm, rv = batchnorm(x, sc, sh, "eval", m, v)
    want = (x - 0.3) / np.sqrt(2.0 + eps) * 1.5 - 0.2
    assert np.allclose(y.numpy(), want, rtol=1e-12)
    assert np.array_equal(rm, m) and np.array_equal(rv, v)


def test_batchnorm_updates_running_stats_only_in_training():
    x = np.random.default_rng(7).normal(size=(4, 1, 2, 2)) + 2.0
    with Record():
        _, rm, rv = batchnorm(x, np.ones(1), np.zeros(1), "train", np.zeros(1), np.ones(1), momentum=0.1)
    assert rm[0] == pytest.approx(0.1 * x.mean(), rel=1e-12)
    assert rv[0] == pytest.approx(0.9 + 0.1 * x.var(), rel=1e-12)


def test_batchnorm_degenerate_batch_rejected():
    with Record():
        with pytest.raises(NNError):
            batchnorm(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), "train",
                      np.zeros(2), np.ones(2))


def test_batchnorm_gradient_matches_fd():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 2, 2, 2))
    coeff = rng.normal(size=(3, 2, 2, 2))

    def f(t):
        y, _, _ = batchnorm(t.reshape((3, 2, 2, 2)), Tensor(np.ones(2)),
                            Tensor(np.zeros(2)), "train", np.zeros(2), np.ones(2))
        return (y * Tensor(coeff)).sum()

    assert finite_difference_check(f, x.reshape(-1), 1e-6) < 1e-4


def test_batchnorm_eval_is_affine():
    # eval mode: y(ax) - y(0) scales linearly in the input
    sc, sh = np.array([2.0]), np.array([1.0])
    m, v = np.array([0.5]), np.array([4.0])
    x = np.random.default_rng(9).normal(size=(1, 1, 2, 2))
    with Record():
        y1, _, _ = batchnorm(x, sc, sh, "eval", m, v)
        y2, _, _ = batchnorm(2 * x, sc, sh, "eval", m, v)
        y0, _, _ = batchnorm(0 * x, sc, sh, "eval", m, v)
    lhs = y2.numpy() - y0.numpy()
    rhs = 2 * (y1.numpy() - y0.numpy())
    assert np.allclose(lhs, rhs, rtol=1e-12)


# -- losses --------------------------------------------------------------------

def test_xent_uniform_logits():
    feats = np.zeros((4, 3))
    w = np.zeros((3, 5))
    b = np.zeros(5)
    with Record():
        loss, probs = linear_softmax_xent(feats, w, b, np.array([0, 1, 2, 3]))
    assert loss.item() == pytest.approx(np.log(5), rel=1e-12)
    assert np.allclose(probs.numpy().sum(axis=1), 1.0, atol=1e-12)


def test_xent_saturated_logit():
    feats = np.eye(2)
    w = np.zeros((2, 5))
    w[0, 0] = 50.0
    w[1, 1] = 50.0
    with Record():
        loss, _ = linear_softmax_xent(feats, w, np.zeros(5), np.array([0, 1]))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_xent_invalid_label():
    with Record():
        with pytest.raises(NNError, match="label"):
            linear_softmax_xent(np.zeros((1, 2)), np.zeros((2, 3)), np.zeros(3),
                                np.array([3]))


def test_xent_gradient_matches_fd():
    rng = np.random.default_rng(10)
    feats = rng.normal(size=(3, 4))
    labels = np.array([0, 2, 1])

    def f(wt):
        loss, _ = linear_softmax_xent(Tensor(feats), wt.reshape((4, 3)),
                                      Tensor(np.zeros(3)), labels)
        return loss

    assert finite_difference_check(f, rng.normal(size=12), 1e-6) < 1e-4


def test_mse_cases():
    with Record():
        assert mse_loss(np.ones(4), np.ones(4)).item() == 0.0
        assert mse_loss(np.zeros(2), np.ones(2)).item() == 1.0
        with pytest.raises(ShapeError):
            mse_loss(np.zeros(2), np.zeros(3))


def test_mse_gradient_closed_form():
    pred = np.array([1.0, 3.0, -2.0])
    target = np.array([0.0, 1.0, 1.0])
    with Record() as rec:
        p = rec.leaf(pred)
        (g,) = grad(mse_loss(p, Tensor(target)), [p])
    assert np.allclose(g.numpy(), 2 * (pred - target) / 3, rtol=1e-12)


# -- optimizers ------------------------------------------------------------------

def test_sgd_step_hand_values():
    with Record():
        out = sgd_step(Tensor(np.array(1.0)), Tensor(np.array(2.0)), 0.1)
        assert out.item() == pytest.approx(0.8)
        same = sgd_step(Tensor(np.array([1.0, -1.0])), Tensor(np.zeros(2)), 0.5)
        assert np.array_equal(same.numpy(), [1.0, -1.0])


def test_sgd_step_differentiable_chain():
    # L = (theta - w)^2, alpha = 0.25 -> d theta'/d w = 0.5
    with Record() as rec:
        theta, w = rec.leaf(0.0), rec.leaf(1.0)
        loss = (theta - w) * (theta - w)
        (g,) = grad(loss, [theta])
        theta_p = sgd_step(theta, g, 0.25)
        assert theta_p.item() == pytest.approx(0.5)
        (dw,) = grad(theta_p, [w])
        assert dw.item() == pytest.approx(0.5)


def test_adam_first_step_magnitude():
    state = AdamState(lr=0.001)
    state, p = adam_step(state, np.array([1.0]), np.array([5.0]))
    assert p[0] == pytest.approx(1.0 - 0.001, abs=1e-8)
    state2 = AdamState(lr=0.001)
    state2, p2 = adam_step(state2, np.array([1.0]), np.array([-5.0]))
    assert p2[0] == pytest.approx(1.0 + 0.001, abs=1e-8)


def test_adam_zero_gradient_keeps_params():
    state = AdamState(lr=0.01)
    p = np.array([0.7])
    for _ in range(5):
        state, p = adam_step(state, p, np.zeros(1))
    assert p[0] == 0.7


def test_adam_deterministic():
    runs = []
    for _ in range(2):
        opt = Adam(lr=0.01)
        params = {"a": np.array([1.0, 2.0])}
        for step in range(10):
            grads = {"a": np.array([0.5, -0.25]) * (step + 1)}
            params = opt.update(params, grads)
        runs.append(params["a"].copy())
    assert np.array_equal(runs[0], runs[1])


# -- models & checkpoints ---------------------------------------------------------

def test_classifier_forward_shapes_and_pool_reduction():
    model = ConvPoolClassifier(image_size=28, filters=3, way=5, temperature=0.2)
    theta = model.init_theta(seed=0)
    meta = model.init_meta(seed=1)
    assert meta["w_tilde"].shape == (14, 2, 14, 2)  # 28x28 pools to 14x14
    x = np.random.default_rng(2).uniform(size=(1, 2, 28, 28, 1))
    with Record() as rec:
        th = {k: rec.leaf(v[None]) for k, v in theta.items()}
        mt = {k: rec.leaf(v[None]) for k, v in meta.items()}
        logits, stats = model.forward(rec.leaf(x), th, mt, "meta-training")
        probs = np.exp(nn.log_softmax(logits).numpy())
    assert logits.shape == (1, 2, 5)
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    assert stats is not None


def test_classifier_baseline_pooling_kinds():
    for kind in ("max", "avg"):
        model = ConvPoolClassifier(image_size=8, filters=2, way=3,
                                   temperature=0.2, pooling_kind=kind)
        theta = model.init_theta(seed=0)
        x = np.random.default_rng(3).uniform(size=(1, 2, 8, 8, 1))
        with Record() as rec:
            th = {k: rec.leaf(v[None]) for k, v in theta.items()}
            logits, _ = model.forward(rec.leaf(x), th, None, "evaluation")
        assert logits.shape == (1, 2, 3)


def test_theta_init_deterministic():
    model = ConvPoolClassifier(image_size=8, filters=2, way=3, temperature=0.2)
    a, b = model.init_theta(seed=9), model.init_theta(seed=9)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.zeros(4)}
    save_checkpoint(str(tmp_path / "ck"), arrays, {"seed": 7})
    back, manifest = load_checkpoint(str(tmp_path / "ck"))
    assert manifest["seed"] == 7
    assert all(np.array_equal(arrays[k], back[k]) for k in arrays)


def test_one_hot():
    oh = one_hot(np.array([0, 2]), 3)
    assert np.array_equal(oh, [[1, 0, 0], [0, 0, 1]])
