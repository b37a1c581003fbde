"""Minimal reverse-mode differentiation engine on numpy arrays.

Provides exactly the operations the conversion networks need: 1-d
convolution, instance normalization, ReLU, the two losses, and Adam.
Gradients are accumulated through a tape of backward closures, one per
produced tensor, and replayed in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class NotScalarError(ValueError):
    """backward() was called on a tensor with more than one element."""


class DetachedGraphError(RuntimeError):
    """backward() was called on a tensor with no recorded history."""


class MissingGradientError(RuntimeError):
    """An optimizer step found a parameter whose grad was never populated."""


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional value array with an optional gradient slot.

    Operations record their inputs and a backward rule on the output, so
    that backward() can push gradients from a scalar loss to every
    reachable tensor with requires_grad set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        """Copy of this tensor's values with no recorded history."""
        return Tensor(self.data.copy())

    def _accumulate(self, delta):
        if self.grad is None:
            self.grad = np.array(delta, dtype=self.data.dtype)
        else:
            self.grad += delta

    def _accumulate_owned(self, delta):
        # Fast path for rules that hand over a freshly allocated array.
        if self.grad is None:
            self.grad = delta
        else:
            self.grad += delta

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul_scalar(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, scalar):
        return mul_scalar(self, scalar)

    def __rmul__(self, scalar):
        return mul_scalar(self, scalar)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def item(self):
        return float(self.data.reshape(-1)[0])


def _make(data, parents, backward_rule):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_rule
    return out


def add(a, b):
    """Elementwise sum; the second operand may be a python scalar."""
    if not isinstance(b, Tensor):
        b_val = float(b)
        out_data = a.data + np.asarray(b_val, dtype=a.data.dtype)

        def rule(grad, a=a):
            if a.requires_grad:
                a._accumulate(grad)

        return _make(out_data, (a,), rule)

    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch in add: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def rule(grad, a=a, b=b):
        if a.requires_grad:
            a._accumulate(grad)
        if b.requires_grad:
            b._accumulate(grad)

    return _make(out_data, (a, b), rule)


def mul_scalar(a, scalar):
    s = float(scalar)
    out_data = a.data * np.asarray(s, dtype=a.data.dtype)

    def rule(grad, a=a, s=s):
        if a.requires_grad:
            a._accumulate(grad * s)

    return _make(out_data, (a,), rule)


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def rule(grad, x=x):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(grad, x.data.shape).astype(x.data.dtype))

    return _make(out_data, (x,), rule)


def mean(x, axis=None):
    """Arithmetic mean over the given axis (or all elements)."""
    out_data = x.data.mean(axis=axis)
    count = x.data.size if axis is None else x.data.shape[axis]

    def rule(grad, x=x, axis=axis, count=count):
        if not x.requires_grad:
            return
        g = np.asarray(grad)
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accumulate((np.broadcast_to(g, x.data.shape) / count).astype(x.data.dtype))

    return _make(out_data, (x,), rule)


def relu(x):
    """Elementwise max(0, x)."""
    out_data = np.maximum(x.data, 0)

    def rule(grad, x=x):
        if x.requires_grad:
            x._accumulate_owned(grad * (x.data > 0))

    return _make(out_data, (x,), rule)


def _conv_cols(padded, n_time):
    # Stack the 3 shifted views: [..., C, 3, T]
    return np.stack([padded[..., k:k + n_time] for k in range(3)], axis=-2)


def conv1d(x, weight, bias):
    """1-d convolution, kernel 3, stride 1, zero padding 1 on each side.

    x is [C_in, T] or batched [B, C_in, T]; weight is [C_out, C_in, 3];
    bias is [C_out]. Output temporal length equals the input's.
    """
    c_out, c_in, k = weight.data.shape
    if k != 3:
        raise ValueError(f"kernel size must be 3, got {k}")
    batched = x.data.ndim == 3
    if x.data.shape[-2] != c_in:
        raise ValueError(
            f"input has {x.data.shape[-2]} channels, weight expects {c_in}")
    n_time = x.data.shape[-1]

    pad = [(0, 0)] * (x.data.ndim - 1) + [(1, 1)]
    padded = np.pad(x.data, pad)
    cols = _conv_cols(padded, n_time)  # [..., C_in, 3, T]
    if batched:
        n_batch = x.data.shape[0]
        col_mat = cols.transpose(1, 2, 0, 3).reshape(c_in * 3, n_batch * n_time)
    else:
        col_mat = cols.reshape(c_in * 3, n_time)
    w_mat = weight.data.reshape(c_out, c_in * 3)
    out_mat = w_mat @ col_mat + bias.data[:, None]
    if batched:
        out_data = out_mat.reshape(c_out, n_batch, n_time).transpose(1, 0, 2)
    else:
        out_data = out_mat.reshape(c_out, n_time)

    def rule(grad, x=x, weight=weight, bias=bias, col_mat=col_mat,
             w_mat=w_mat, batched=batched, n_time=n_time):
        c_out, c_in, _ = weight.data.shape
        if batched:
            g_mat = grad.transpose(1, 0, 2).reshape(c_out, -1)
        else:
            g_mat = grad.reshape(c_out, n_time)
        if bias.requires_grad:
            bias._accumulate_owned(g_mat.sum(axis=1))
        if weight.requires_grad:
            weight._accumulate_owned((g_mat @ col_mat.T).reshape(weight.data.shape))
        if x.requires_grad:
            d_cols = w_mat.T @ g_mat  # [C_in*3, (B*)T]
            if batched:
                n_batch = x.data.shape[0]
                d_cols = d_cols.reshape(c_in, 3, n_batch, n_time).transpose(2, 0, 1, 3)
            else:
                d_cols = d_cols.reshape(c_in, 3, n_time)
            d_padded = np.zeros(x.data.shape[:-1] + (n_time + 2,), dtype=x.data.dtype)
            for k in range(3):
                d_padded[..., k:k + n_time] += d_cols[..., k, :]
            x._accumulate(d_padded[..., 1:-1])

    return _make(out_data, (x, weight, bias), rule)


def instance_norm(x, eps=1e-5):
    """Per-channel standardization over time, biased variance, no affine.

    Each channel of each instance is shifted to zero mean and scaled by
    1/sqrt(var + eps), where the variance divides by the frame count.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = centered * inv

    def rule(grad, x=x, centered=centered, inv=inv):
        if not x.requires_grad:
            return
        g_mean = grad.mean(axis=-1, keepdims=True)
        g_proj = (grad * centered).mean(axis=-1, keepdims=True)
        x._accumulate_owned(inv * (grad - g_mean - centered * (inv * inv) * g_proj))

    return _make(out_data, (x,), rule)


def l1_loss(prediction, target):
    """Mean absolute difference over all elements, as a scalar tensor."""
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if prediction.data.shape != target.data.shape:
        raise ValueError(
            f"shape mismatch in l1_loss: {prediction.data.shape} vs {target.data.shape}")
    diff = prediction.data - target.data
    out_data = np.asarray(np.abs(diff).mean(), dtype=prediction.data.dtype)

    def rule(grad, prediction=prediction, target=target, diff=diff):
        scaled = np.sign(diff) * (grad / diff.size)
        if prediction.requires_grad:
            prediction._accumulate(scaled.astype(prediction.data.dtype))
        if target.requires_grad:
            target._accumulate(-scaled.astype(target.data.dtype))

    return _make(out_data, (prediction, target), rule)


def cross_entropy(logits, labels):
    """Mean negative log-softmax at the true class, max-stabilized.

    logits is [n_classes] with an int label, or [B, n_classes] with a
    sequence of labels; the batched form averages over the batch.
    """
    single = logits.data.ndim == 1
    mat = logits.data[None, :] if single else logits.data
    idx = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = mat.shape[1]
    if idx.shape[0] != mat.shape[0]:
        raise ValueError(f"{mat.shape[0]} logit rows but {idx.shape[0]} labels")
    if np.any(idx < 0) or np.any(idx >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes")

    shifted = mat - mat.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(mat.shape[0])
    out_data = np.asarray(-log_probs[rows, idx].mean(), dtype=logits.data.dtype)

    def rule(grad, logits=logits, log_probs=log_probs, idx=idx, rows=rows, single=single):
        if not logits.requires_grad:
            return
        soft = np.exp(log_probs)
        soft[rows, idx] -= 1.0
        soft *= grad / len(rows)
        logits._accumulate(soft[0] if single else soft.astype(logits.data.dtype))

    return _make(out_data, (logits,), rule)


def backward(loss):
    """Populate grad on every requires_grad tensor reachable from loss.

    Gradients accumulate (+=) into any grads already present, so callers
    normally zero them between steps via the optimizer.
    """
    if loss.data.size != 1:
        raise NotScalarError(f"loss has {loss.data.size} elements, expected 1")
    if not loss._parents:
        raise DetachedGraphError("loss has no recorded history to differentiate")

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


class Adam:
    """Adam optimizer with bias correction over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """Apply one update from the accumulated grads, then clear them."""
        for p in self.params:
            if p.grad is None:
                raise MissingGradientError("parameter has no gradient; run backward first")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def uniform_conv_init(c_out, c_in, kernel, rng, dtype=np.float32):
    """Weight and bias drawn uniformly from ±sqrt(1/(C_in·kernel))."""
    bound = float(np.sqrt(1.0 / (c_in * kernel)))
    weight = rng.uniform(-bound, bound, size=(c_out, c_in, kernel)).astype(dtype)
    bias = rng.uniform(-bound, bound, size=(c_out,)).astype(dtype)
    return Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True)


def finite_difference_gradient(fn, x, step=1e-5):
    """Central-difference gradient of a scalar function at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def gradcheck_max_error(analytic, numeric, floor=1e-7):
    """Worst relative disagreement between two gradient arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
