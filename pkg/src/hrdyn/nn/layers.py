"""Stateful layers: parameters, gradient accumulators and forward caches."""

import numpy as np

from . import functional as F


def uniform_fan_in(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class.

    ``params`` and ``buffers`` map names to arrays; ``grads`` mirrors
    ``params``.  Optimizers update ``params`` in place, so the arrays must
    never be rebound after construction.
    """

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def _add_param(self, name, value):
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before a forward pass")
        return self._cache


class Linear(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self._add_param("weight", uniform_fan_in(rng, (n_out, n_in), n_in))
        self._add_param("bias", np.zeros(n_out))

    def forward(self, x, train=False):
        self._cache = x
        return F.linear_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, dy):
        x = self._need_cache()
        dx, dW, db = F.linear_backward(dy, x, self.params["weight"])
        self.grads["weight"] += dW
        self.grads["bias"] += db
        return dx


class Conv1d(Layer):
    def __init__(self, c_in, c_out, kernel, rng, stride=1):
        super().__init__()
        self.stride = stride
        self._add_param("weight", uniform_fan_in(rng, (c_out, c_in, kernel), c_in * kernel))
        self._add_param("bias", np.zeros(c_out))

    def forward(self, x, train=False):
        y, windows = F.conv1d_forward(x, self.params["weight"], self.params["bias"], self.stride)
        self._cache = (x.shape, windows)
        return y

    def backward(self, dy):
        x_shape, windows = self._need_cache()
        dx, dW, db = F.conv1d_backward(dy, x_shape, windows, self.params["weight"], self.stride)
        self.grads["weight"] += dW
        self.grads["bias"] += db
        return dx


class BatchNorm1d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self._add_param("gamma", np.ones(channels))
        self._add_param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, train=False):
        y, self._cache = F.batchnorm1d_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, self.momentum, self.eps)
        return y

    def backward(self, dy):
        dx, dg, db = F.batchnorm1d_backward(dy, self.params["gamma"], self._need_cache())
        self.grads["gamma"] += dg
        self.grads["beta"] += db
        return dx


class ReLU(Layer):
    def forward(self, x, train=False):
        self._cache = x
        return F.relu_forward(x)

    def backward(self, dy):
        return F.relu_backward(dy, self._need_cache())


class MaxPool1d(Layer):
    def __init__(self, pool=2):
        super().__init__()
        self.pool = pool

    def forward(self, x, train=False):
        y, argmax = F.maxpool1d_forward(x, self.pool)
        self._cache = (x.shape, argmax)
        return y

    def backward(self, dy):
        x_shape, argmax = self._need_cache()
        return F.maxpool1d_backward(dy, x_shape, argmax, self.pool)


class LSTM(Layer):
    """Single-layer LSTM with one bias vector per gate block."""

    def __init__(self, n_in, hidden, rng, forget_bias=1.0):
        super().__init__()
        self.hidden = hidden
        self._add_param("weight_ih", uniform_fan_in(rng, (4 * hidden, n_in), n_in))
        self._add_param("weight_hh", uniform_fan_in(rng, (4 * hidden, hidden), hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = forget_bias
        self._add_param("bias", bias)

    def forward(self, x_seq, h0=None, c0=None, train=False):
        n = x_seq.shape[0]
        h0 = np.zeros((n, self.hidden)) if h0 is None else h0
        c0 = np.zeros((n, self.hidden)) if c0 is None else c0
        h_seq, h, c, self._cache = F.lstm_forward(
            x_seq, self.params["weight_ih"], self.params["weight_hh"], self.params["bias"], h0, c0)
        return h_seq, h, c

    def backward(self, dh_seq=None, dh_last=None, dc_last=None):
        dx, dh0, dc0, dW_ih, dW_hh, db = F.lstm_backward(
            dh_seq, dh_last, dc_last, self.params["weight_ih"], self.params["weight_hh"],
            self._need_cache())
        self.grads["weight_ih"] += dW_ih
        self.grads["weight_hh"] += dW_hh
        self.grads["bias"] += db
        return dx, dh0, dc0
