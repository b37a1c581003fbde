import numpy as np
import pytest

from vcforge import autodiff as ad

from helpers import gradcheck


# --- forward semantics ---------------------------------------------------------

def test_conv1d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 9)).astype(np.float32)
    weight = np.zeros((4, 4, 3), dtype=np.float32)
    for c in range(4):
        weight[c, c, 1] = 1.0
    out = ad.conv1d(ad.Tensor(x), ad.Tensor(weight), ad.Tensor(np.zeros(4, dtype=np.float32)))
    assert np.allclose(out.data, x)


def test_conv1d_zero_input_gives_bias():
    bias = np.array([0.5, -1.5], dtype=np.float32)
    out = ad.conv1d(ad.Tensor(np.zeros((3, 6), dtype=np.float32)),
                    ad.Tensor(np.zeros((2, 3, 3), dtype=np.float32)),
                    ad.Tensor(bias))
    assert np.allclose(out.data, np.repeat(bias[:, None], 6, axis=1))


def test_conv1d_matches_triple_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 7))
    weight = rng.standard_normal((5, 4, 3))
    bias = rng.standard_normal(5)
    padded = np.pad(x, ((0, 0), (1, 1)))
    expected = np.zeros((5, 7))
    for o in range(5):
        for t in range(7):
            acc = bias[o]
            for c in range(4):
                for k in range(3):
                    acc += weight[o, c, k] * padded[c, t + k]
            expected[o, t] = acc
    out = ad.conv1d(ad.Tensor(x), ad.Tensor(weight), ad.Tensor(bias))
    assert np.abs(out.data - expected).max() < 1e-6


def test_conv1d_batched_matches_per_item():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 7)).astype(np.float32)
    weight = ad.Tensor(rng.standard_normal((5, 4, 3)).astype(np.float32))
    bias = ad.Tensor(rng.standard_normal(5).astype(np.float32))
    batched = ad.conv1d(ad.Tensor(x), weight, bias)
    for b in range(3):
        single = ad.conv1d(ad.Tensor(x[b]), weight, bias)
        assert np.allclose(batched.data[b], single.data, atol=1e-6)


def test_conv1d_preserves_length():
    for n_time in (1, 2, 5, 64):
        out = ad.conv1d(ad.Tensor(np.ones((2, n_time), dtype=np.float32)),
                        ad.Tensor(np.ones((3, 2, 3), dtype=np.float32)),
                        ad.Tensor(np.zeros(3, dtype=np.float32)))
        assert out.data.shape == (3, n_time)


def test_conv1d_shape_errors():
    with pytest.raises(ValueError):
        ad.conv1d(ad.Tensor(np.ones((2, 5))), ad.Tensor(np.ones((3, 2, 5))),
                  ad.Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        ad.conv1d(ad.Tensor(np.ones((4, 5))), ad.Tensor(np.ones((3, 2, 3))),
                  ad.Tensor(np.zeros(3)))


def test_instance_norm_constant_channel_is_zero():
    out = ad.instance_norm(ad.Tensor(np.full((2, 8), 5.0)))
    assert np.allclose(out.data, 0.0)


def test_instance_norm_already_standardized():
    out = ad.instance_norm(ad.Tensor(np.array([[1.0, -1.0]])), eps=1e-12)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_instance_norm_statistics():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 200)) * 3.0 + 1.0
    out = ad.instance_norm(ad.Tensor(x)).data
    assert np.abs(out.mean(axis=1)).max() < 1e-6
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-3


def test_relu_values():
    out = ad.relu(ad.Tensor(np.array([-1.0, 0.0, 2.5])))
    assert np.allclose(out.data, [0.0, 0.0, 2.5])


def test_l1_identical_is_zero():
    x = np.ones((3, 3))
    assert float(ad.l1_loss(ad.Tensor(x), ad.Tensor(x)).data) == 0.0


def test_l1_unit_gap():
    loss = ad.l1_loss(ad.Tensor(np.ones((4, 4))), ad.Tensor(np.zeros((4, 4))))
    assert float(loss.data) == 1.0


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        ad.l1_loss(ad.Tensor(np.ones((2, 2))), ad.Tensor(np.ones((2, 3))))


def test_cross_entropy_uniform_logits():
    loss = ad.cross_entropy(ad.Tensor(np.zeros(4)), 0)
    assert float(loss.data) == pytest.approx(np.log(4.0), abs=1e-9)


def test_cross_entropy_confident_correct():
    loss = ad.cross_entropy(ad.Tensor(np.array([10.0, -10.0])), 0)
    assert float(loss.data) == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-6)
    assert float(loss.data) < 1e-8


def test_cross_entropy_shift_invariant():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal(6)
    base = float(ad.cross_entropy(ad.Tensor(logits), 3).data)
    shifted = float(ad.cross_entropy(ad.Tensor(logits + 123.456), 3).data)
    assert shifted == pytest.approx(base, abs=1e-9)


def test_cross_entropy_non_negative():
    rng = np.random.default_rng(5)
    for _ in range(50):
        logits = rng.standard_normal(5) * rng.uniform(0.1, 10)
        label = int(rng.integers(0, 5))
        assert float(ad.cross_entropy(ad.Tensor(logits), label).data) >= 0.0


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(ad.Tensor(np.zeros(3)), 3)
    with pytest.raises(IndexError):
        ad.cross_entropy(ad.Tensor(np.zeros(3)), -1)


def test_sum_gradient_is_ones():
    x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.relu(x)
    with pytest.raises(ad.NotScalarError):
        ad.backward(y)


def test_backward_rejects_detached():
    with pytest.raises(ad.DetachedGraphError):
        ad.backward(ad.Tensor(np.array(1.0)))


def test_grad_accumulates_on_reuse():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.tensor_sum(x + x)
    ad.backward(loss)
    assert np.allclose(x.grad, 2.0)


def test_forward_deterministic():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 5)).astype(np.float32)
    w = rng.standard_normal((2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    one = ad.conv1d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    two = ad.conv1d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    assert np.array_equal(one, two)


def test_float32_paths_stay_float32():
    x = ad.Tensor(np.ones((2, 4), dtype=np.float32), requires_grad=True)
    out = ad.relu(ad.instance_norm(x))
    assert out.data.dtype == np.float32
    ad.backward(ad.tensor_sum(out))
    assert x.grad.dtype == np.float32


# --- gradient checks ------------------------------------------------------------

def test_gradcheck_each_operation_over_seeds():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 6))
        w = rng.standard_normal((4, 3, 3)) * 0.6
        b = rng.standard_normal(4) * 0.2
        target = rng.standard_normal((4, 6))
        gradcheck(lambda x, w, b: ad.tensor_sum(ad.conv1d(x, w, b)), [x, w, b])
        gradcheck(lambda x: ad.tensor_sum(ad.relu(ad.instance_norm(x))), [x])
        # keep residuals away from zero so |.| stays differentiable
        gradcheck(lambda p: ad.l1_loss(p, target + 3.0), [rng.standard_normal((4, 6))])
        logits = rng.standard_normal(5)
        label = int(rng.integers(0, 5))
        gradcheck(lambda l: ad.cross_entropy(l, label), [logits])
        gradcheck(lambda x: ad.mean(x, axis=1), [rng.standard_normal((1, 6))])


def test_gradcheck_relu_slopes_by_sign():
    x = np.array([-2.0, -0.5, 0.7, 3.0])
    t = ad.Tensor(x, requires_grad=True)
    ad.backward(ad.tensor_sum(ad.relu(t)))
    assert np.array_equal(t.grad, [0.0, 0.0, 1.0, 1.0])
    numeric = ad.finite_difference_gradient(
        lambda a: float(ad.tensor_sum(ad.relu(ad.Tensor(a))).data), x)
    assert np.allclose(t.grad, numeric, atol=1e-7)


def test_gradcheck_l1_is_sign_over_n():
    rng = np.random.default_rng(8)
    pred = rng.standard_normal((3, 4)) + 2.0
    target = np.zeros((3, 4))
    t = ad.Tensor(pred, requires_grad=True)
    ad.backward(ad.l1_loss(t, ad.Tensor(target)))
    assert np.allclose(t.grad, np.sign(pred) / pred.size)


def test_gradcheck_composed_pipeline():
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((4, 3, 3)) * 0.5
        b = rng.standard_normal(4) * 0.1
        target = rng.standard_normal((4, 5)) * 2.0

        def pipeline(x, w, b):
            return ad.l1_loss(ad.relu(ad.instance_norm(ad.conv1d(x, w, b))), target)

        gradcheck(pipeline, [x, w, b])


def test_gradcheck_cross_entropy_batched():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((4, 5))
    labels = [0, 2, 4, 1]
    gradcheck(lambda l: ad.cross_entropy(l, labels), [logits])


# --- adam -----------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = ad.Adam([p])
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_moves_against_gradient():
    p = ad.Tensor(np.zeros(3), requires_grad=True)
    opt = ad.Adam([p], lr=0.01)
    for _ in range(50):
        p.grad = np.array([1.0, -1.0, 2.0])
        opt.step()
    assert p.data[0] < 0 and p.data[1] > 0 and p.data[2] < 0


def test_adam_scalar_quadratic():
    p = ad.Tensor(np.array([0.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    for _ in range(500):
        p.grad = 2.0 * (p.data - 3.0)
        opt.step()
    assert abs(float(p.data[0]) - 3.0) < 1e-3


def test_adam_missing_gradient_raises():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    opt = ad.Adam([p])
    with pytest.raises(ad.MissingGradientError):
        opt.step()


def test_adam_clears_grads_after_step():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    opt = ad.Adam([p])
    p.grad = np.ones(2)
    opt.step()
    assert p.grad is None


def test_uniform_init_bounds_and_determinism():
    w1, b1 = ad.uniform_conv_init(8, 4, 3, np.random.default_rng(5))
    w2, b2 = ad.uniform_conv_init(8, 4, 3, np.random.default_rng(5))
    bound = np.sqrt(1.0 / 12.0)
    assert np.abs(w1.data).max() <= bound
    assert np.abs(b1.data).max() <= bound
    assert np.array_equal(w1.data, w2.data)
    assert np.array_equal(b1.data, b2.data)
    assert w1.data.dtype == np.float32
