"""Layer vocabulary: forward passes and exact reverse-mode gradients.

Tensors are plain numpy arrays in NCHW layout, float32 in production (tests
may cast layers to float64). Each layer caches what its backward pass needs
when forward is called with cache=True; backward without a cache raises.
There is no autodiff graph — the model wires these calls explicitly.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, StaleStateError


class Param:
    """A trainable tensor with its gradient accumulator."""

    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = False):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay  # include in the L2 penalty (conv kernels only)

    def zero_grad(self):
        self.grad[...] = 0


class Layer:
    def params(self) -> list[Param]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        """Non-trainable state that still belongs in a checkpoint."""
        return []

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def cast(self, dtype):
        """In-place dtype change, for float64 gradient oracles."""
        for p in self.params():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        return self

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StaleStateError(f"{type(self).__name__}.backward needs a cached forward")
        return cache


class Conv2d(Layer):
    """Dilated cross-correlation, stride 1, same-padding by default.

    Effective receptive field per axis is dilation*(k-1)+1.
    """

    def __init__(self, c_in, c_out, k=3, dilation=1, padding=None, rng=None, dtype=np.float32):
        self.c_in, self.c_out, self.k, self.dilation = c_in, c_out, k, dilation
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        rng = rng or np.random.default_rng(0)
        limit = 1.0 / np.sqrt(c_in * k * k)
        kernel = rng.uniform(-limit, limit, size=(c_out, c_in, k, k)).astype(dtype)
        self.kernel = Param("kernel", kernel, decay=True)
        self.bias = Param("bias", np.zeros(c_out, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.kernel, self.bias]

    def _correlate(self, x, weight, bias=None):
        n, c, h, w = x.shape
        if c != self.c_in:
            raise DimensionError(f"conv expects {self.c_in} channels, got {c}")
        p, d, k = self.padding, self.dilation, self.k
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho = xp.shape[2] - d * (k - 1)
        wo = xp.shape[3] - d * (k - 1)
        if ho <= 0 or wo <= 0:
            raise DimensionError(f"kernel does not fit input of spatial size {h}x{w}")
        if k == 1:
            y = np.matmul(weight.reshape(self.c_out, c), xp.reshape(n, c, ho * wo))
        else:
            # im2col: one fat matmul beats k*k skinny ones on these shapes
            cols = np.empty((n, c, k * k, ho * wo), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    xs = xp[:, :, i * d : i * d + ho, j * d : j * d + wo]
                    cols[:, :, i * k + j] = xs.reshape(n, c, ho * wo)
            y = np.matmul(weight.reshape(self.c_out, c * k * k), cols.reshape(n, c * k * k, ho * wo))
        y = y.reshape(n, self.c_out, ho, wo)
        if bias is not None:
            y += bias[None, :, None, None]
        return y, xp

    def forward(self, x, cache=False):
        y, xp = self._correlate(x, self.kernel.value.astype(x.dtype), self.bias.value.astype(x.dtype))
        self._cache = (xp, x.shape, y.shape) if cache else None
        return y

    def backward(self, gy):
        xp, x_shape, y_shape = self._take_cache()
        if gy.shape != y_shape:
            raise DimensionError(f"gradient shape {gy.shape} != forward output {y_shape}")
        n, _, ho, wo = gy.shape
        p, d, k = self.padding, self.dilation, self.k
        weight = self.kernel.value
        gy_flat = gy.reshape(n, self.c_out, ho * wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                xs = xp[:, :, i * d : i * d + ho, j * d : j * d + wo]
                self.kernel.grad[:, :, i, j] += np.tensordot(gy, xs, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, i * d : i * d + ho, j * d : j * d + wo] += np.matmul(
                    weight[:, :, i, j].T.astype(gy.dtype), gy_flat
                ).reshape(n, self.c_in, ho, wo)
        self.bias.grad += gy.sum(axis=(0, 2, 3))
        h, w = x_shape[2], x_shape[3]
        return gxp[:, :, p : p + h, p : p + w] if p else gxp

    def macs(self, h_out, w_out):
        return self.k * self.k * self.c_in * self.c_out * h_out * w_out


class BatchNorm2d(Layer):
    """Per-channel normalization with running statistics for eval mode."""

    def __init__(self, c, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.c, self.eps, self.momentum = c, eps, momentum
        self.gamma = Param("gamma", np.ones(c, dtype=dtype))
        self.beta = Param("beta", np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def cast(self, dtype):
        super().cast(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def forward(self, x, train=False, cache=False):
        if x.shape[1] != self.c:
            raise DimensionError(f"batch norm expects {self.c} channels, got {x.shape[1]}")
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]
        self._cache = (xhat, inv_std, train) if cache else None
        return y

    def backward(self, gy):
        xhat, inv_std, train = self._take_cache()
        gamma = self.gamma.value
        self.gamma.grad += (gy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += gy.sum(axis=(0, 2, 3))
        gxhat = gy * gamma[None, :, None, None]
        if not train:
            return gxhat * inv_std[None, :, None, None]
        n, _, h, w = gy.shape
        m = n * h * w
        sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv_std[None, :, None, None] / m) * (m * gxhat - sum_g - xhat * sum_gx)


class LeakyReLU(Layer):
    def __init__(self, slope=0.01):
        if not 0.0 <= slope <= 1.0:
            raise ValueError("leaky slope must lie in [0, 1]")
        self.slope = slope
        self._cache = None

    def forward(self, x, cache=False):
        pos = x >= 0
        self._cache = pos if cache else None
        return np.where(pos, x, self.slope * x)

    def backward(self, gy):
        pos = self._take_cache()
        return np.where(pos, gy, self.slope * gy)


class AvgPool2x2(Layer):
    """2x2 mean pooling with stride 2; odd extents are replication-padded."""

    def __init__(self):
        self._cache = None

    @staticmethod
    def _pad_odd(x):
        n, c, h, w = x.shape
        ph, pw = h % 2, w % 2
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
        return x, (h, w)

    def forward(self, x, cache=False):
        xp, in_hw = self._pad_odd(x)
        n, c, h, w = xp.shape
        y = xp.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        self._cache = in_hw if cache else None
        return y

    def backward(self, gy):
        h, w = self._take_cache()
        gxp = np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=gy.dtype)
        # replication-pad adjoint: fold padded row/column back onto the edge
        if gxp.shape[2] > h:
            gxp[:, :, h - 1, :] += gxp[:, :, h, :]
        if gxp.shape[3] > w:
            gxp[:, :, :, w - 1] += gxp[:, :, :, w]
        return gxp[:, :, :h, :w]


class PixelShuffle(Layer):
    """Rearrange (N, C*r^2, H, W) into (N, C, H*r, W*r); parameter-free."""

    def __init__(self, r=2):
        self.r = r
        self._cache = None

    def forward(self, x, cache=False):
        n, c, h, w = x.shape
        r = self.r
        if c % (r * r) != 0:
            raise DimensionError(f"{c} channels not divisible by r^2={r * r}")
        co = c // (r * r)
        y = x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)
        self._cache = x.shape if cache else None
        return np.ascontiguousarray(y)

    def backward(self, gy):
        in_shape = self._take_cache()
        return space_to_depth(gy, self.r).reshape(in_shape)


def space_to_depth(x, r):
    """Inverse pixel shuffle: (N, C, H*r, W*r) -> (N, C*r^2, H, W)."""
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise DimensionError(f"spatial size {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    y = x.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)
    return np.ascontiguousarray(y)


class ChannelDropout(Layer):
    """Spatial dropout: whole channels are zeroed, survivors scaled by 1/(1-p).

    Identity when inactive, so eval-mode inference needs no rescaling.
    """

    def __init__(self, p=0.2):
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.p = p
        self._cache = None

    def forward(self, x, active=False, rng=None, rate=None, mask=None, cache=False):
        p = self.p if rate is None else rate
        if not active or p == 0.0:
            self._cache = 1.0 if cache else None
            return x
        if mask is None:
            if rng is None:
                raise ValueError("active dropout needs an rng or an explicit mask")
            mask = rng.random((x.shape[0], x.shape[1])) >= p
        scale = (mask.astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype))[:, :, None, None]
        self._cache = scale if cache else None
        self.last_mask = mask
        return x * scale

    def backward(self, gy):
        scale = self._take_cache()
        return gy if scale is None or np.isscalar(scale) else gy * scale


class Softmax(Layer):
    """Channel-axis softmax, stabilized by max subtraction."""

    def __init__(self):
        self._cache = None

    def forward(self, x, cache=False):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        self._cache = y if cache else None
        return y

    def backward(self, gy):
        y = self._take_cache()
        return y * (gy - (gy * y).sum(axis=1, keepdims=True))
