"""Differentiable layers with explicit forward/backward passes.

Every layer caches what it needs during a training-mode ``forward`` and
consumes it in ``backward``. Parameter gradients accumulate into
``Param.grad`` until ``zero_grad`` is called, so a batch can be fed in
pieces. Spatial layers work channels-last, ``(N, H, W, C)``.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


class BackwardBeforeForward(RuntimeError):
    pass


class Param:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


class Layer:
    kind = "layer"

    def __init__(self):
        self.training = True
        self._cache = None

    # parameters / buffers / sub-layers -------------------------------------

    def own_params(self) -> dict[str, Param]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def named_layers(self, prefix: str = "") -> Iterator[tuple[str, "Layer"]]:
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.named_layers(f"{prefix}{name}.")

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for lname, layer in self.named_layers(prefix):
            for pname, p in layer.own_params().items():
                yield (f"{lname}.{pname}" if lname else pname), p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for lname, layer in self.named_layers(prefix):
            for bname, b in layer.own_buffers().items():
                yield (f"{lname}.{bname}" if lname else bname), b

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad[...] = 0

    def train(self, mode: bool = True) -> "Layer":
        for _, layer in self.named_layers():
            layer.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def astype(self, dtype) -> "Layer":
        for _, layer in self.named_layers():
            for p in layer.own_params().values():
                p.data = p.data.astype(dtype)
                p.grad = np.zeros_like(p.data)
            for name, b in layer.own_buffers().items():
                layer.set_buffer(name, b.astype(dtype))
            layer._cache = None
        return self

    # computation ----------------------------------------------------------

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise BackwardBeforeForward(f"{self.kind}: backward called before a training forward")
        return self._cache


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Layer):
    """Cross-correlation via im2col on channels-last input.

    Weights keep the conventional ``(out, in, kh, kw)`` shape; ``padding``
    is zero padding on both sides.
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        if stride < 1 or kernel_size < 1 or padding < 0:
            raise ValueError("conv2d needs kernel >= 1, stride >= 1, padding >= 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.k, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Param(_kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Param(np.zeros(out_channels, dtype=np.float32)) if bias else None
        # first layers skip the input gradient; nothing upstream consumes it
        self.input_grad = True

    def own_params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.k, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def _wmat(self) -> np.ndarray:
        return self.weight.data.transpose(0, 2, 3, 1).reshape(self.out_channels, -1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeMismatch(f"conv2d expects (N, H, W, {self.in_channels}), got {x.shape}")
        n, h, w, c = x.shape
        ho, wo = self.output_hw(h, w)
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"conv2d kernel {self.k} too large for {h}x{w} input")
        cols = _im2col(x, self.k, self.stride, self.padding, ho, wo)
        out = cols @ self._wmat().T
        if self.bias is not None:
            out += self.bias.data
        if self.training:
            self._cache = (cols, x.shape)
        return out.reshape(n, ho, wo, self.out_channels)

    def backward(self, grad):
        cols, x_shape = self._cached()
        n, ho, wo, f = grad.shape
        k, s, p = self.k, self.stride, self.padding
        c = self.in_channels
        g = grad.reshape(n * ho * wo, f)
        self.weight.grad += (g.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
        if self.bias is not None:
            self.bias.grad += g.sum(axis=0)
        if not self.input_grad:
            return None
        h, w = x_shape[1:3]
        if s == 1 and k - 1 - p >= 0:
            # stride-1 input gradient is a full correlation with the flipped kernel
            wt = self.weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
            dcols = _im2col(grad, k, 1, k - 1 - p, h, w)
            return (dcols @ wt.T).reshape(n, h, w, c)
        dcols = (g @ self._wmat()).reshape(n, ho, wo, k, k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p : p + h, p : p + w, :] if p else dxp


def _pad_hw(x, p, value=0.0):
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=value) if p else x


def _im2col(x, k, s, p, ho, wo):
    """Patches as rows ordered (n, y, x); columns ordered (ky, kx, c)."""
    n, c = x.shape[0], x.shape[3]
    xp = _pad_hw(x, p)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : s * ho : s, : s * wo : s]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, kernel_size, stride=None, padding=0):
        super().__init__()
        stride = kernel_size if stride is None else stride
        if stride < 1 or kernel_size < 1 or padding < 0:
            raise ValueError("maxpool needs kernel >= 1, stride >= 1, padding >= 0")
        self.k, self.stride, self.padding = kernel_size, stride, padding

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeMismatch(f"maxpool expects (N, H, W, C), got {x.shape}")
        n, h, w, c = x.shape
        k, s, p = self.k, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        xp = _pad_hw(x, p, -np.inf)
        views = [xp[:, i : i + s * ho : s, j : j + s * wo : s, :] for i in range(k) for j in range(k)]
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        # index of the first window position attaining the maximum
        arg = np.full(out.shape, len(views) - 1, dtype=np.int8)
        for idx in range(len(views) - 2, -1, -1):
            arg = np.where(views[idx] == out, np.int8(idx), arg)
        if self.training:
            self._cache = (arg, xp.shape, x.shape)
        return out

    def backward(self, grad):
        arg, xp_shape, x_shape = self._cached()
        k, s, p = self.k, self.stride, self.padding
        ho, wo = grad.shape[1:3]
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += grad * (arg == i * k + j)
        return dxp[:, p : p + x_shape[1], p : p + x_shape[2], :] if p else dxp


class GlobalAvgPool(Layer):
    kind = "global_avgpool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeMismatch(f"global_avgpool expects (N, H, W, C), got {x.shape}")
        if self.training:
            self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        n, h, w, c = self._cached()
        return np.broadcast_to((grad / (h * w))[:, None, None, :], (n, h, w, c)).copy()


class BatchNorm2d(Layer):
    """Per-channel batch normalization over ``(N, H, W)`` of channels-last input."""

    kind = "batchnorm2d"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Param(np.ones(channels, dtype=np.float32))
        self.beta = Param(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def own_params(self):
        return {"weight": self.gamma, "bias": self.beta}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise ShapeMismatch(f"batchnorm2d expects (N, H, W, {self.channels}), got {x.shape}")
        if not self.training:
            scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
            return (x - self.running_mean) * scale + self.beta.data
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mean = x.mean(axis=(0, 1, 2))
        xc = x - mean
        var = (xc * xc).mean(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        mom = self.momentum
        unbiased = var * (m / max(m - 1, 1))
        self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(self.running_var.dtype)
        self._cache = (xhat, inv)
        return xhat * self.gamma.data + self.beta.data

    def backward(self, grad):
        xhat, inv = self._cached()
        self.gamma.grad += (grad * xhat).sum(axis=(0, 1, 2))
        self.beta.grad += grad.sum(axis=(0, 1, 2))
        dxhat = grad * self.gamma.data
        mean_d = dxhat.mean(axis=(0, 1, 2))
        mean_dx = (dxhat * xhat).mean(axis=(0, 1, 2))
        return (dxhat - mean_d - xhat * mean_dx) * inv


class ChannelsLast(Layer):
    """``(N, C, H, W)`` images to the ``(N, H, W, C)`` layout the spatial layers use."""

    kind = "channels_last"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeMismatch(f"expected (N, C, H, W) images, got {x.shape}")
        self._cache = True
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))

    def backward(self, grad):
        self._cached()
        return None if grad is None else grad.transpose(0, 3, 1, 2)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Param(_kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Param(np.zeros(out_features, dtype=np.float32)) if bias else None

    def own_params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"linear expects (N, {self.in_features}), got {x.shape}")
        if self.training:
            self._cache = x
        out = x @ self.weight.data.T
        if self.bias is not None:
            out = out + self.bias.data
        return out

    def backward(self, grad):
        x = self._cached()
        self.weight.grad += grad.T @ x
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.data


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        out = np.maximum(x, 0)
        if self.training:
            self._cache = out > 0
        return out

    def backward(self, grad):
        return grad * self._cached()


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        if self.training:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cached())


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""

    kind = "dropout"

    def __init__(self, rate=0.5, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.reuse_mask = False  # gradient checks need a fixed mask
        self._mask = None

    def forward(self, x):
        if not self.training:
            return x
        if self.rate == 0.0:
            self._cache = 1.0
            return x
        if not (self.reuse_mask and self._mask is not None and self._mask.shape == x.shape):
            keep = self.rng.random(x.shape) >= self.rate
            self._mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        self._cache = self._mask
        return x * self._mask

    def backward(self, grad):
        return grad * self._cached()


class LSTM(Layer):
    """Single-layer LSTM returning the final hidden state.

    Input is ``(N, T)`` for a scalar series or ``(N, T, D)``. Gates are
    stacked in the order input, forget, cell, output. Sigmoid gates are
    evaluated as ``0.5 * tanh(z / 2) + 0.5`` so one ``tanh`` covers all four.
    """

    kind = "lstm"

    def __init__(self, input_size=1, hidden_size=32, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size, self.hidden_size = input_size, hidden_size
        bound = 1.0 / np.sqrt(hidden_size)
        h4 = 4 * hidden_size
        self.w_ih = Param(rng.uniform(-bound, bound, (h4, input_size)).astype(np.float32))
        self.w_hh = Param(rng.uniform(-bound, bound, (h4, hidden_size)).astype(np.float32))
        self.bias = Param(rng.uniform(-bound, bound, h4).astype(np.float32))

    def own_params(self):
        return {"weight_ih": self.w_ih, "weight_hh": self.w_hh, "bias": self.bias}

    def _gate_consts(self, dtype):
        hs = self.hidden_size
        scale = np.full(4 * hs, 0.5, dtype=dtype)
        scale[2 * hs : 3 * hs] = 1.0
        shift = np.full(4 * hs, 0.5, dtype=dtype)
        shift[2 * hs : 3 * hs] = 0.0
        return scale, shift

    def forward(self, x):
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeMismatch(f"lstm expects (N, T, {self.input_size}), got {x.shape}")
        n, t_len, _ = x.shape
        hs = self.hidden_size
        xw = np.ascontiguousarray((x @ self.w_ih.data.T + self.bias.data).transpose(1, 0, 2))  # (T, N, 4H)
        whh_t = np.ascontiguousarray(self.w_hh.data.T)
        scale, shift = self._gate_consts(xw.dtype)
        gates = np.empty_like(xw)
        h = np.zeros((n, hs), dtype=xw.dtype)
        c = np.zeros((n, hs), dtype=xw.dtype)
        keep = self.training
        if keep:
            hs_all = np.empty((t_len + 1, n, hs), dtype=xw.dtype)
            cs_all = np.empty((t_len + 1, n, hs), dtype=xw.dtype)
            tc_all = np.empty((t_len, n, hs), dtype=xw.dtype)
            hs_all[0], cs_all[0] = h, c
        z = np.empty((n, 4 * hs), dtype=xw.dtype)
        for t in range(t_len):
            np.matmul(h, whh_t, out=z)
            z += xw[t]
            z *= scale
            a = gates[t]
            np.tanh(z, out=a)
            a *= scale
            a += shift
            c = a[:, hs : 2 * hs] * c + a[:, :hs] * a[:, 2 * hs : 3 * hs]
            tc = np.tanh(c)
            h = a[:, 3 * hs :] * tc
            if keep:
                hs_all[t + 1], cs_all[t + 1], tc_all[t] = h, c, tc
        if keep:
            self._cache = (x, gates, hs_all, cs_all, tc_all)
        return h

    def backward(self, grad):
        x, gates, hs_all, cs_all, tc_all = self._cached()
        t_len = gates.shape[0]
        hs = self.hidden_size
        w_hh = self.w_hh.data
        dz_all = np.empty_like(gates)
        dh = grad
        dc = np.zeros_like(grad)
        # gate derivative factors: s(1-s) for sigmoid gates, 1-g^2 for the cell gate
        dgate = gates * (1.0 - gates)
        dgate[:, :, 2 * hs : 3 * hs] = 1.0 - gates[:, :, 2 * hs : 3 * hs] ** 2
        for t in range(t_len - 1, -1, -1):
            a = gates[t]
            tc = tc_all[t]
            dc = dc + dh * a[:, 3 * hs :] * (1.0 - tc * tc)
            dz = dz_all[t]
            dz[:, :hs] = dc * a[:, 2 * hs : 3 * hs]
            dz[:, hs : 2 * hs] = dc * cs_all[t]
            dz[:, 2 * hs : 3 * hs] = dc * a[:, :hs]
            dz[:, 3 * hs :] = dh * tc
            dz *= dgate[t]
            dc = dc * a[:, hs : 2 * hs]
            dh = dz @ w_hh
        n = dz_all.shape[1]
        flat = dz_all.reshape(t_len * n, -1)
        self.w_hh.grad += flat.T @ hs_all[:-1].reshape(t_len * n, hs)
        xt = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(t_len * n, -1)
        self.w_ih.grad += flat.T @ xt
        self.bias.grad += flat.sum(axis=0)
        return (flat @ self.w_ih.data).reshape(t_len, n, -1).transpose(1, 0, 2)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers: Layer, names: list[str] | None = None):
        super().__init__()
        self.layers = list(layers)
        self.names = names or [str(i) for i in range(len(self.layers))]

    def children(self):
        return list(zip(self.names, self.layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            if grad is None:
                break
            grad = layer.backward(grad)
        return grad


class SoftmaxCrossEntropy(Layer):
    """Mean cross-entropy over the batch, fused with the softmax."""

    kind = "softmax_ce"

    def forward(self, logits, labels=None):
        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        probs = ez / ez.sum(axis=1, keepdims=True)
        if labels is None:
            return probs
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (logits.shape[0],):
            raise ShapeMismatch(f"labels shape {labels.shape} does not match logits {logits.shape}")
        logp = z - np.log(ez.sum(axis=1, keepdims=True))
        loss = -logp[np.arange(len(labels)), labels].mean()
        self._cache = (probs, labels)
        return float(loss)

    def backward(self, grad=1.0):
        probs, labels = self._cached()
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return d * (grad / len(labels))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def forward(layer: Layer, x, mode: str = "train"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    layer.train(mode == "train")
    return layer.forward(x)


def backward(layer: Layer, upstream):
    return layer.backward(upstream)
