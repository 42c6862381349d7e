"""Dense tensor numerics with hand-derived gradients.

Tensors are plain numpy arrays in NCHW layout. Every op preserves the dtype
of its inputs: float64 is used for verification, float32 for training.
"""
import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError, InputError, TrainingError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size, k, stride, pad):
    """Output extent of a convolution along one spatial axis."""
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"stride must be >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"non-integer or empty conv output: (size {size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _check_conv_shapes(x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and filters, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input channels do not match filters: input {x.shape}, filters {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"filters must be square, got {w.shape}")


def conv2d_forward(x, w, stride=1, pad=0):
    """Cross-correlate ``x`` with ``w`` and also return the im2col buffer."""
    _check_conv_shapes(x, w)
    b, _, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    cols = kernels.im2col(x, k, stride, pad, ho, wo)
    out = np.matmul(w.reshape(cout, -1), cols)
    return out.reshape(b, cout, ho, wo), cols


def conv2d(x, w, stride=1, pad=0):
    """Bias-free 2-d cross-correlation.

    Args:
        x: input of shape (B, Cin, H, W).
        w: filters of shape (Cout, Cin, K, K).
        stride: spatial step.
        pad: zero padding on every border.

    Returns:
        Array of shape (B, Cout, H', W') with H' = (H + 2*pad - K) / stride + 1.
    """
    return conv2d_forward(x, w, stride, pad)[0]


def conv2d_grad(dout, x, w, stride=1, pad=0, cols=None):
    """Gradients of ``sum(dout * conv2d(x, w))`` with respect to ``x`` and ``w``.

    ``cols`` may be the buffer returned by :func:`conv2d_forward` to skip
    recomputing the unfold.
    """
    _check_conv_shapes(x, w)
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    if dout.shape != (b, cout, ho, wo):
        raise DimensionError(f"upstream gradient {dout.shape} does not match conv output {(b, cout, ho, wo)}")
    if cols is None:
        cols = kernels.im2col(x, k, stride, pad, ho, wo)
    d2 = dout.reshape(b, cout, ho * wo)
    dw = np.tensordot(d2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    dcols = np.matmul(w.reshape(cout, -1).T, d2)
    dx = kernels.col2im(dcols, cin, h, wd, k, stride, pad, ho, wo)
    return dx, dw


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, training=True,
               eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalization over (B, H, W).

    In training mode batch statistics are used and, when given,
    ``running_mean``/``running_var`` are updated in place with an exponential
    moving average (unbiased variance). In eval mode the running statistics
    are used and nothing is mutated.

    Returns:
        ``(y, cache)``; pass ``cache`` to :func:`batch_norm_grad`.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"batch_norm parameter mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    if eps <= 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count == 0:
        raise ConfigurationError("batch_norm over an empty batch or spatial extent")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if running_mean is not None:
            unbiased = var * (count / (count - 1)) if count > 1 else var
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise InputError("eval-mode batch_norm needs running statistics")
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), (xhat, gamma, inv_std, training)


def batch_norm_grad(dy, cache):
    """Return ``(dx, dgamma, dbeta)`` for :func:`batch_norm`."""
    xhat, gamma, inv_std, training = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    g = (gamma * inv_std)[None, :, None, None]
    if not training:
        return dy * g, dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = g * (dy - dbeta[None, :, None, None] / m - xhat * (dgamma[None, :, None, None] / m))
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


def relu(x):
    return np.maximum(x, 0)


def relu_grad(dout, x, zero_slope=0.0):
    """Gradient of ``max(0, x)``; ``zero_slope`` is the subgradient used at exactly 0.

    The network passes ``zero_slope=1``: a zeroized channel is exactly 0
    everywhere, and slope 0 there would leave it without any gradient.
    """
    if zero_slope == 0:
        return dout * (x > 0)
    if zero_slope == 1:
        return dout * (x >= 0)
    return dout * np.where(x > 0, 1.0, np.where(x == 0, zero_slope, 0.0)).astype(dout.dtype)


def avg_pool_global(x):
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool_global expects a 4-d input, got {x.shape}")
    return x.mean(axis=(2, 3))


def avg_pool_global_grad(dout, input_shape):
    b, c, h, w = input_shape
    if dout.shape != (b, c):
        raise DimensionError(f"pool gradient {dout.shape} does not match input {input_shape}")
    scale = np.asarray(1.0 / (h * w), dtype=dout.dtype)
    return np.broadcast_to((dout * scale)[:, :, None, None], input_shape).copy()


def linear(x, weight, bias):
    """Affine map ``x @ weight.T + bias`` with weight of shape (O, F)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"linear shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight.T + bias


def linear_grad(dout, x, weight):
    """Return ``(dx, dweight, dbias)``."""
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits`` (B, C) against integer ``labels``.

    Returns:
        ``(loss, grad_logits)`` where the gradient is (softmax - onehot) / B.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not agree")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad


def clip_grad_norm(grads, max_norm):
    """Rescale ``grads`` in place so their global l2-norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def sgd_step(params, grads, lr, momentum=0.9, weight_decay=1e-4, state=None):
    """One in-place SGD update with heavy-ball momentum and L2 weight decay.

    ``v <- momentum*v + grad + weight_decay*param``; ``param <- param - lr*v``.

    Args:
        params: mapping name -> array, updated in place.
        grads: mapping name -> gradient array (same keys as ``params``).
        state: mapping name -> velocity; created lazily and updated in place.

    Returns:
        The velocity state mapping.
    """
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
    if state is None:
        state = {}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    for name, p in params.items():
        g = grads[name]
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return state


def grad_check(fn, inputs, analytic, epsilon=1e-5):
    """Compare analytic gradients against central finite differences.

    Args:
        fn: callable taking ``*inputs`` and returning a scalar.
        inputs: list of float64 arrays; perturbed in place and restored.
        analytic: gradients of ``fn`` with respect to each input.
        epsilon: finite-difference step.

    Returns:
        The worst elementwise relative error
        ``|a - n| / max(|a|, |n|, 1e-8)`` over all inputs.
    """
    worst = 0.0
    for x, a in zip(inputs, analytic):
        if x.dtype != np.float64 or not x.flags.c_contiguous:
            raise InputError("grad_check requires contiguous float64 inputs")
        flat = x.reshape(-1)
        a_flat = np.asarray(a, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(fn(*inputs))
            flat[i] = orig - epsilon
            fm = float(fn(*inputs))
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
