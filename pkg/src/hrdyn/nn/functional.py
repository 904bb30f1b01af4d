"""Forward and backward kernels for the layers used by the HR estimator.

Everything works on float64 numpy arrays.  Each ``*_forward`` returns its
output together with whatever cache the matching ``*_backward`` needs.
Conventions: convolution is cross-correlation (no kernel flip), no implicit
padding; max-pooling drops the remainder and routes gradients to the first
maximum in each window; the MAE subgradient at zero is zero.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..exceptions import InputError, ShapeError


def _require(cond, message):
    if not cond:
        raise ShapeError(message)


# --------------------------------------------------------------------------
# linear


def linear_forward(x, W, b):
    """``x @ W.T + b`` for x (n, in), W (out, in), b (out,)."""
    x = np.asarray(x, dtype=np.float64)
    _require(x.ndim == 2 and W.ndim == 2 and x.shape[1] == W.shape[1],
             f"linear: input {x.shape} incompatible with weight {W.shape}")
    _require(b.shape == (W.shape[0],), f"linear: bias {b.shape} incompatible with weight {W.shape}")
    return x @ W.T + b


def linear_backward(dy, x, W):
    """Return ``(dx, dW, db)``."""
    return dy @ W, dy.T @ x, dy.sum(axis=0)


# --------------------------------------------------------------------------
# conv1d


def conv1d_output_length(length, kernel, stride=1):
    return (length - kernel) // stride + 1


def conv1d_forward(x, kernels, bias, stride=1):
    """Valid cross-correlation of x (n, c_in, len) with kernels (c_out, c_in, k).

    Returns ``(y, windows)`` where ``windows`` (n, L, c_in, k) holds the
    unfolded input reused by the backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    _require(x.ndim == 3 and kernels.ndim == 3 and x.shape[1] == kernels.shape[1],
             f"conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    _require(bias.shape == (kernels.shape[0],), f"conv1d: bias {bias.shape} vs kernels {kernels.shape}")
    _require(stride >= 1, f"conv1d: stride must be >= 1, got {stride}")
    k = kernels.shape[2]
    _require(x.shape[2] >= k, f"conv1d: input length {x.shape[2]} shorter than kernel {k}")
    # im2col: (n, L, c_in * k) rows against (c_in * k, c_out)
    windows = np.ascontiguousarray(
        sliding_window_view(x, k, axis=2)[:, :, ::stride, :].transpose(0, 2, 1, 3))
    n, l_out, c_in, _ = windows.shape
    y = windows.reshape(n, l_out, c_in * k) @ kernels.reshape(kernels.shape[0], c_in * k).T
    return y.transpose(0, 2, 1) + bias[None, :, None], windows


def conv1d_backward(dy, x_shape, windows, kernels, stride=1):
    """Return ``(dx, dkernels, dbias)``."""
    c_out, c_in, k = kernels.shape
    n, _, length = x_shape
    l_out = dy.shape[2]
    cols = windows.reshape(n * l_out, c_in * k)
    dkernels = (dy.transpose(1, 0, 2).reshape(c_out, n * l_out) @ cols).reshape(c_out, c_in, k)
    dbias = dy.sum(axis=(0, 2))
    # (n, L, c_out) @ (c_out, c_in * k) -> per-tap input gradients
    taps = (dy.transpose(0, 2, 1) @ kernels.reshape(c_out, c_in * k)).reshape(n, l_out, c_in, k)
    dx = np.zeros(x_shape)
    span = (l_out - 1) * stride + 1
    for j in range(k):
        dx[:, :, j:j + span:stride] += taps[:, :, :, j].transpose(0, 2, 1)
    return dx, dkernels, dbias


# --------------------------------------------------------------------------
# batch norm


def batchnorm1d_forward(x, gamma, beta, running_mean, running_var, train,
                        momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over axes (0, 2) of x (n, c, len).

    In training mode the batch (population) statistics normalize the input and
    the running buffers are updated in place, with the unbiased variance.
    """
    _require(x.ndim == 3 and gamma.shape == (x.shape[1],) and beta.shape == (x.shape[1],),
             f"batchnorm1d: input {x.shape} incompatible with gamma {gamma.shape}")
    if train:
        m = x.shape[0] * x.shape[2]
        if m < 2:
            raise InputError("batchnorm1d in train mode needs at least two values per channel")
        mean = x.sum(axis=(0, 2)) / m
        xc = x - mean[None, :, None]
        var = np.einsum("ncl,ncl->c", xc, xc) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, (xhat, inv_std, train)


def batchnorm1d_backward(dy, gamma, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    if not train:
        return dxhat * inv_std[None, :, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2]
    dx = (inv_std[None, :, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# pointwise and pooling


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def maxpool1d_forward(x, pool=2):
    """Non-overlapping max over the last axis; a trailing remainder is dropped.

    Returns ``(y, argmax)`` with ``argmax`` the first maximizing offset.
    """
    l_out = x.shape[-1] // pool
    _require(l_out >= 1, f"maxpool1d: input length {x.shape[-1]} shorter than pool {pool}")
    if pool == 2:
        even, odd = x[..., 0:2 * l_out:2], x[..., 1:2 * l_out:2]
        argmax = (odd > even).astype(np.intp)
        return np.maximum(even, odd), argmax
    blocks = x[..., :l_out * pool].reshape(x.shape[:-1] + (l_out, pool))
    argmax = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return y, argmax


def maxpool1d_backward(dy, x_shape, argmax, pool=2):
    l_out = dy.shape[-1]
    if pool == 2:
        dx = np.zeros(x_shape)
        second = argmax.astype(bool)
        dx[..., 0:2 * l_out:2] = np.where(second, 0.0, dy)
        dx[..., 1:2 * l_out:2] = np.where(second, dy, 0.0)
        return dx
    dblocks = np.zeros(dy.shape + (pool,))
    np.put_along_axis(dblocks, argmax[..., None], dy[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[..., :l_out * pool] = dblocks.reshape(dy.shape[:-1] + (l_out * pool,))
    return dx


# --------------------------------------------------------------------------
# LSTM


def lstm_forward(x_seq, W_ih, W_hh, b, h0, c0):
    """Run a single-layer LSTM over x_seq (n, len, in).

    Gate rows of ``W_ih`` (4H, in), ``W_hh`` (4H, H) and ``b`` (4H,) are
    ordered input, forget, cell candidate, output.  Returns
    ``(h_seq, h_last, c_last, cache)``.
    """
    x_seq = np.asarray(x_seq, dtype=np.float64)
    n, length, n_in = x_seq.shape
    H = W_hh.shape[1]
    _require(W_ih.shape == (4 * H, n_in), f"lstm: W_ih {W_ih.shape} vs input size {n_in}, hidden {H}")
    _require(W_hh.shape == (4 * H, H) and b.shape == (4 * H,),
             f"lstm: W_hh {W_hh.shape} / b {b.shape} inconsistent with hidden {H}")
    _require(h0.shape == (n, H) and c0.shape == (n, H),
             f"lstm: h0 {h0.shape} / c0 {c0.shape} must be ({n}, {H})")
    # time-major buffers keep each step's slice contiguous
    zx = np.ascontiguousarray((x_seq @ W_ih.T + b).transpose(1, 0, 2))
    gates = np.empty((length, n, 4 * H))
    c_seq = np.empty((length, n, H))
    h_seq = np.empty((length, n, H))
    W_hh_T = np.ascontiguousarray(W_hh.T)
    h, c = h0, c0
    for t in range(length):
        z = zx[t]
        z += h @ W_hh_T
        g = gates[t]
        expit(z, out=g)
        np.tanh(z[:, 2 * H:3 * H], out=g[:, 2 * H:3 * H])
        c = c_seq[t]
        np.multiply(g[:, H:2 * H], c0 if t == 0 else c_seq[t - 1], out=c)
        c += g[:, :H] * g[:, 2 * H:3 * H]
        h = h_seq[t]
        np.tanh(c, out=h)
        h *= g[:, 3 * H:]
    gates = gates.transpose(1, 0, 2)
    c_seq = c_seq.transpose(1, 0, 2)
    h_seq = h_seq.transpose(1, 0, 2)
    h, c = h.copy(), c.copy()
    cache = (x_seq, h0, c0, gates, c_seq, h_seq)
    return h_seq, h, c, cache


def lstm_backward(dh_seq, dh_last, dc_last, W_ih, W_hh, cache):
    """Backpropagation through time.

    ``dh_seq`` (or None) is the gradient on every emitted hidden state;
    ``dh_last``/``dc_last`` (or None) the gradient on the final state.
    Returns ``(dx_seq, dh0, dc0, dW_ih, dW_hh, db)``.
    """
    x_seq, h0, c0, gates, c_seq, h_seq = cache
    n, length, _ = x_seq.shape
    H = W_hh.shape[1]
    # caches are time-major views from the forward pass
    gates_t, c_t, h_t = gates.transpose(1, 0, 2), c_seq.transpose(1, 0, 2), h_seq.transpose(1, 0, 2)
    dh_seq_t = None if dh_seq is None else dh_seq.transpose(1, 0, 2)
    dz = np.empty((length, n, 4 * H))
    dh = np.zeros((n, H)) if dh_last is None else dh_last.copy()
    dc = np.zeros((n, H)) if dc_last is None else dc_last.copy()
    for t in range(length - 1, -1, -1):
        if dh_seq_t is not None:
            dh = dh + dh_seq_t[t]
        g = gates_t[t]
        i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        tanh_c = np.tanh(c_t[t])
        c_prev = c_t[t - 1] if t > 0 else c0
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        d = dz[t]
        d[:, :H] = dc * gg * i * (1.0 - i)
        d[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        d[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
        d[:, 3 * H:] = dh * tanh_c * o * (1.0 - o)
        dh = d @ W_hh
        dc = dc * f
    h_prev = np.concatenate([h0[None], h_t[:-1]], axis=0)
    dz2 = dz.reshape(length * n, 4 * H)
    x_t = x_seq.transpose(1, 0, 2).reshape(length * n, -1)
    dW_ih = dz2.T @ x_t
    dW_hh = dz2.T @ h_prev.reshape(length * n, H)
    db = dz2.sum(axis=0)
    dx_seq = (dz2 @ W_ih).reshape(length, n, -1).transpose(1, 0, 2)
    return dx_seq, dh, dc, dW_ih, dW_hh, db


# --------------------------------------------------------------------------
# loss


def mae_loss(pred, target):
    """Mean absolute error and its subgradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss: pred {pred.shape} vs target {target.shape}")
    if pred.shape[0] == 0:
        raise InputError("mae_loss: empty batch")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / pred.shape[0]
