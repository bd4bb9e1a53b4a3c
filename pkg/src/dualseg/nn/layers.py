"""Network layers with explicit manual backprop.

Layers keep their parameters and accumulated gradients but no activation
state: forward returns (output, cache) and backward takes that cache, so the
same layer object can appear in two live passes (the shared stages see both
branch inputs within one iteration).  Parameter gradients accumulate across
backward calls until the optimizer consumes them.
"""

from __future__ import annotations

import numpy as np

from ..kernels import conv2d_backward, conv2d_forward, linear_resize_matrix

_resize_matrix_memo: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    key = (n_out, n_in)
    if key not in _resize_matrix_memo:
        _resize_matrix_memo[key] = linear_resize_matrix(n_out, n_in)
    return _resize_matrix_memo[key]


class Conv2d:
    def __init__(self, cin: int, cout: int, ksize: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, init_std: float | None = None):
        self.stride = stride
        self.dilation = dilation
        self.pad = dilation * (ksize - 1) // 2
        std = init_std if init_std is not None else np.sqrt(2.0 / (cin * ksize * ksize))
        self.w = rng.normal(0.0, std, size=(cout, cin, ksize, ksize))
        self.b = np.zeros(cout, dtype=np.float64)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x: np.ndarray, train: bool) -> tuple[np.ndarray, np.ndarray]:
        y, xp = conv2d_forward(x, self.w, self.b, self.stride, self.dilation, self.pad)
        return y, xp

    def backward(self, g: np.ndarray, xp: np.ndarray) -> np.ndarray:
        gx, gw, gb = conv2d_backward(g, xp, self.w, self.stride, self.dilation, self.pad)
        self.gw += gw
        self.gb += gb
        return gx

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def grads(self) -> dict[str, np.ndarray]:
        return {"w": self.gw, "b": self.gb}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


class BatchNorm2d:
    """Per-channel normalization over the spatial extent of one image.

    Training passes normalize by the current input's statistics and fold
    them into the running estimates (momentum blend); inference uses the
    running estimates only, so eval outputs never depend on batch content.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels, dtype=np.float64)
        self.beta = np.zeros(channels, dtype=np.float64)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def forward(self, x: np.ndarray, train: bool):
        if train:
            mean = x.mean(axis=(1, 2))
            var = x.var(axis=(1, 2))
            self.running_mean[...] = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1.0 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None, None]) * inv[:, None, None]
        y = self.gamma[:, None, None] * xhat + self.beta[:, None, None]
        cache = (xhat, inv) if train else None
        return y, cache

    def backward(self, g: np.ndarray, cache) -> np.ndarray:
        if cache is None:
            raise RuntimeError("BatchNorm2d.backward requires a training-mode cache")
        xhat, inv = cache
        n = g.shape[1] * g.shape[2]
        dbeta = g.sum(axis=(1, 2))
        dgamma = (g * xhat).sum(axis=(1, 2))
        self.gbeta += dbeta
        self.ggamma += dgamma
        scale = (self.gamma * inv)[:, None, None] / n
        return scale * (n * g - dbeta[:, None, None] - xhat * dgamma[:, None, None])

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self) -> dict[str, np.ndarray]:
        return {"gamma": self.ggamma, "beta": self.gbeta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class StageBlock:
    """Conv + BatchNorm + ReLU, the unit of weight sharing."""

    def __init__(self, cin: int, cout: int, ksize: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1):
        self.conv = Conv2d(cin, cout, ksize, rng, stride=stride, dilation=dilation)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: np.ndarray, train: bool):
        z, c_conv = self.conv.forward(x, train)
        h, c_bn = self.bn.forward(z, train)
        y = np.maximum(h, 0.0)
        return y, (c_conv, c_bn, h > 0.0)

    def backward(self, g: np.ndarray, cache) -> np.ndarray:
        c_conv, c_bn, active = cache
        g = g * active
        g = self.bn.backward(g, c_bn)
        return self.conv.backward(g, c_conv)

    def params(self) -> dict[str, np.ndarray]:
        out = {f"conv.{k}": v for k, v in self.conv.params().items()}
        out.update({f"bn.{k}": v for k, v in self.bn.params().items()})
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {f"conv.{k}": v for k, v in self.conv.grads().items()}
        out.update({f"bn.{k}": v for k, v in self.bn.grads().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"bn.{k}": v for k, v in self.bn.buffers().items()}


class SegmentationHead:
    """1x1 conv to a single logit map, bilinear upsampling to the input
    extent, then a sigmoid squashing into (0, 1)."""

    def __init__(self, cin: int, rng: np.random.Generator, init_std: float = 0.01):
        self.conv = Conv2d(cin, 1, 1, rng, init_std=init_std)

    def forward(self, x: np.ndarray, out_hw: tuple[int, int], train: bool):
        z, c_conv = self.conv.forward(x, train)
        mr = _resize_matrix(out_hw[0], z.shape[1])
        mc = _resize_matrix(out_hw[1], z.shape[2])
        logits = mr @ z[0] @ mc.T
        prob = 1.0 / (1.0 + np.exp(-logits))
        return prob, (c_conv, mr, mc, prob)

    def backward(self, g_prob: np.ndarray, cache) -> np.ndarray:
        c_conv, mr, mc, prob = cache
        g_logits = g_prob * prob * (1.0 - prob)
        g_z = (mr.T @ g_logits @ mc)[None]
        return self.conv.backward(g_z, c_conv)

    def params(self) -> dict[str, np.ndarray]:
        return {f"conv.{k}": v for k, v in self.conv.params().items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"conv.{k}": v for k, v in self.conv.grads().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}
