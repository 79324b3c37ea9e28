"""Layers with explicit forward/backward passes.

Every module caches what it needs during ``forward`` and consumes it in
``backward``, which returns the gradient with respect to the module input and
accumulates parameter gradients into ``Parameter.grad``.  Gradients flow in
reverse through :class:`Sequential`, so a network is differentiated by
calling ``backward`` once on its output gradient.
"""
from __future__ import annotations

import numpy as np

from . import kernels

__all__ = [
    "Parameter",
    "Module",
    "Sequential",
    "Conv2d",
    "BatchNorm2d",
    "ReLU",
    "MaxPool2d",
    "AdaptiveAvgPool2d",
    "Flatten",
    "Linear",
    "Dropout",
    "softmax",
    "softmax_cross_entropy",
    "kaiming_uniform",
]


class Parameter:
    """A trainable array and its accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def kaiming_uniform(rng, shape, fan_in):
    # ReLU gain sqrt(2): bound = sqrt(2) * sqrt(3 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    training = True

    def forward(self, x, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, rng=None):
        return self.forward(x, rng)

    def children(self):
        return []

    def named_children(self):
        return [(str(i), child) for i, child in enumerate(self.children())]

    def named_parameters(self, prefix=""):
        for name, value in self.__dict__.items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode=True):
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, rng=None):
        for layer in self.layers:
            x = layer.forward(x, rng)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)


class Conv2d(Module):
    """2-D cross-correlation over (B, C, H, W) inputs."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, rng=None, bias=True):
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise ValueError("conv2d hyperparameters must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        )
        # a bias directly before batch norm is cancelled by the mean subtraction
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        # set on a network's first layer when the input gradient is not needed
        self.skip_input_grad = False
        self._cache = None

    def forward(self, x, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"conv2d expects (B, {self.in_channels}, H, W), got {x.shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        B, _, H, W = x.shape
        Ho = (H + 2 * p - k) // s + 1
        Wo = (W + 2 * p - k) // s + 1
        if Ho < 1 or Wo < 1:
            raise ValueError("conv2d input smaller than kernel")
        x = np.ascontiguousarray(x, dtype=np.float64)
        cols = kernels.im2col(x, k, k, s, p)
        out = np.matmul(self.weight.data.reshape(self.out_channels, -1), cols)
        if self.bias is not None:
            out += self.bias.data[None, :, None]
        self._cache = (x.shape, cols)
        return out.reshape(B, self.out_channels, Ho, Wo)

    def backward(self, dout):
        x_shape, cols = self._cache
        B = x_shape[0]
        F = self.out_channels
        k, s, p = self.kernel_size, self.stride, self.padding
        d3 = np.ascontiguousarray(dout, dtype=np.float64).reshape(B, F, -1)
        dw = np.zeros((F, cols.shape[1]))
        for b in range(B):
            dw += d3[b] @ cols[b].T
        self.weight.grad += dw.reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += d3.sum(axis=(0, 2))
        if self.skip_input_grad:
            return None
        dcols = np.matmul(self.weight.data.reshape(F, -1).T, d3)
        return kernels.col2im(dcols, x_shape, k, k, s, p)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_features))
        self.beta = Parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self._cache = None

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, x, rng=None):
        if x.ndim != 4 or x.shape[1] != self.num_features:
            raise ValueError(f"batchnorm2d expects (B, {self.num_features}, H, W), got {x.shape}")
        g = self.gamma.data[None, :, None, None]
        b = self.beta.data[None, :, None, None]
        if not self.training:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None]
            self._cache = ("eval", xhat, inv)
            return xhat * g + b
        if x.shape[0] < 2:
            raise ValueError("batchnorm2d in training mode needs a batch of at least 2")
        n = x.shape[0] * x.shape[2] * x.shape[3]
        x = np.ascontiguousarray(x, dtype=np.float64)
        out, xhat, mean, var, inv = kernels.batchnorm_forward_train(
            x, self.gamma.data, self.beta.data, self.eps
        )
        m = self.momentum
        self.running_mean *= 1.0 - m
        self.running_mean += m * mean
        self.running_var *= 1.0 - m
        self.running_var += m * var * n / (n - 1)
        self._cache = ("train", xhat, inv)
        return out

    def backward(self, dout):
        mode, xhat, inv = self._cache
        if mode == "eval":
            # running statistics are constants here
            self.gamma.grad += np.sum(dout * xhat, axis=(0, 2, 3))
            self.beta.grad += dout.sum(axis=(0, 2, 3))
            return dout * (self.gamma.data * inv)[None, :, None, None]
        dx, dgamma, dbeta = kernels.batchnorm_backward_train(
            np.ascontiguousarray(dout, dtype=np.float64), xhat, self.gamma.data, inv
        )
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class ReLU(Module):
    def forward(self, x, rng=None):
        x = np.ascontiguousarray(x, dtype=np.float64)
        self._out = kernels.relu_forward(x.reshape(x.shape[0], -1)).reshape(x.shape)
        return self._out

    def backward(self, dout):
        y = self._out
        d = np.ascontiguousarray(dout, dtype=np.float64).reshape(y.shape[0], -1)
        return kernels.relu_backward(d, y.reshape(y.shape[0], -1)).reshape(y.shape)


class MaxPool2d(Module):
    def __init__(self, kernel_size=2, stride=None):
        self.kernel_size = kernel_size
        self.stride = kernel_size if stride is None else stride
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("maxpool2d hyperparameters must be positive")

    def forward(self, x, rng=None):
        if x.shape[2] < self.kernel_size or x.shape[3] < self.kernel_size:
            raise ValueError("maxpool2d input smaller than kernel")
        x = np.ascontiguousarray(x, dtype=np.float64)
        out, arg = kernels.maxpool_forward(x, self.kernel_size, self.stride)
        self._cache = (x.shape, arg)
        return out

    def backward(self, dout):
        x_shape, arg = self._cache
        return kernels.maxpool_backward(
            np.ascontiguousarray(dout), arg, tuple(x_shape), self.kernel_size, self.stride
        )


def _adaptive_bins(n_in, n_out):
    return [((i * n_in) // n_out, -(-((i + 1) * n_in) // n_out)) for i in range(n_out)]


class AdaptiveAvgPool2d(Module):
    """Average pooling to a fixed output grid (bin edges as floor/ceil of i*H/out)."""

    def __init__(self, output_size=1):
        if isinstance(output_size, int):
            output_size = (output_size, output_size)
        if min(output_size) < 1:
            raise ValueError("output size must be positive")
        self.output_size = tuple(output_size)

    def forward(self, x, rng=None):
        B, C, H, W = x.shape
        oh, ow = self.output_size
        self._shape = x.shape
        if (oh, ow) == (1, 1):
            return x.mean(axis=(2, 3), keepdims=True)
        out = np.empty((B, C, oh, ow))
        for i, (h0, h1) in enumerate(_adaptive_bins(H, oh)):
            for j, (w0, w1) in enumerate(_adaptive_bins(W, ow)):
                out[:, :, i, j] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
        return out

    def backward(self, dout):
        B, C, H, W = self._shape
        oh, ow = self.output_size
        if (oh, ow) == (1, 1):
            return np.broadcast_to(dout / (H * W), self._shape).copy()
        dx = np.zeros(self._shape)
        for i, (h0, h1) in enumerate(_adaptive_bins(H, oh)):
            for j, (w0, w1) in enumerate(_adaptive_bins(W, ow)):
                area = (h1 - h0) * (w1 - w0)
                dx[:, :, h0:h1, w0:w1] += dout[:, :, i : i + 1, j : j + 1] / area
        return dx


class Flatten(Module):
    def forward(self, x, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None):
        if in_features < 1 or out_features < 1:
            raise ValueError("linear widths must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"linear expects (B, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.data


class Dropout(Module):
    """Inverted dropout; identity in eval mode.

    The random stream is supplied per call. Passing ``rng=None`` in training
    mode reuses the previous mask (used to freeze masks for gradient checks).
    """

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self._mask = None

    def forward(self, x, rng=None):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            if self._mask is None or self._mask.shape != x.shape:
                raise ValueError("dropout in training mode needs a random generator")
        else:
            keep = rng.random(x.shape) >= self.rate
            self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets, class_weights=None):
    """Weighted mean cross-entropy and its gradient with respect to ``logits``.

    With class weights the loss is ``sum(w[y] * nll) / sum(w[y])``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ValueError("targets must be one class index per row")
    if np.any(targets < 0) or np.any(targets >= k):
        raise ValueError(f"class index out of range for {k} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    nll = -logp[np.arange(n), targets]
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[targets]
    total = w.sum()
    loss = float(np.dot(w, nll) / total)
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad
