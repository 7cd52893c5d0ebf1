"""Differentiable building blocks for the segmentation network.

Each operation is a small stateful layer: ``forward`` caches whatever the
backward pass needs, ``backward`` consumes the cache and returns the input
gradient (parameter gradients land on ``*_grad`` attributes). All arrays are
(batch, channel, height, width) numpy arrays; dtype (float32 or float64) is
preserved end to end.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np


class Conv2d:
    """Stride-1 cross-correlation with same-size zero padding.

    ``weight`` has shape (out_channels, in_channels, k, k) with odd k;
    ``bias`` has shape (out_channels,). The arrays are owned by the caller
    and updated in place by the optimizer.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        co, ci, kh, kw = weight.shape
        if kh != kw or kh % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
        if bias.shape != (co,):
            raise ValueError(f"bias shape {bias.shape} does not match {co} output channels")
        self.weight = weight
        self.bias = bias
        self.weight_grad: Optional[np.ndarray] = None
        self.bias_grad: Optional[np.ndarray] = None
        self._ctx = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        co, ci, k, _ = self.weight.shape
        if x.ndim != 4 or x.shape[1] != ci:
            raise ValueError(
                f"conv input shape {x.shape} incompatible with weight "
                f"({co},{ci},{k},{k}): expected (n,{ci},h,w)"
            )
        n, _, h, w = x.shape
        p = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        acc = np.empty((n, h, w, co), dtype=x.dtype)
        acc[:] = self.bias
        for i in range(k):
            for j in range(k):
                acc += np.tensordot(
                    xp[:, :, i : i + h, j : j + w], self.weight[:, :, i, j], axes=([1], [1])
                )
        self._ctx = (xp, x.shape)
        return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xp, x_shape = self._ctx
        self._ctx = None
        n, ci, h, w = x_shape
        k = self.weight.shape[2]
        p = (k - 1) // 2
        self.bias_grad = dy.sum(axis=(0, 2, 3))
        dw = np.empty_like(self.weight)
        # channels-last scratch keeps the per-offset accumulation contiguous
        dxp = np.zeros((n, xp.shape[2], xp.shape[3], ci), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dw[:, :, i, j] = np.tensordot(
                    dy, xp[:, :, i : i + h, j : j + w], axes=([0, 2, 3], [0, 2, 3])
                )
                dxp[:, i : i + h, j : j + w, :] += np.tensordot(
                    dy, self.weight[:, :, i, j], axes=([1], [0])
                )
        self.weight_grad = dw
        return np.ascontiguousarray(dxp[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2))


class BatchNorm2d:
    """Per-channel normalization over (batch, height, width).

    Train mode normalizes with batch statistics and folds them into the
    running estimates with the configured momentum; infer mode uses the
    running estimates only. Backward differentiates through the batch
    statistics, so it is exact for the train-mode forward as well.
    """

    def __init__(
        self,
        gamma: np.ndarray,
        beta: np.ndarray,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
        eps: float = 1e-5,
        momentum: float = 0.1,
    ):
        if gamma.shape != beta.shape or gamma.ndim != 1:
            raise ValueError("gamma and beta must be 1-D with equal length")
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.eps = eps
        self.momentum = momentum
        self.gamma_grad: Optional[np.ndarray] = None
        self.beta_grad: Optional[np.ndarray] = None
        self._ctx = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        c = self.gamma.shape[0]
        if x.ndim != 4 or x.shape[1] != c:
            raise ValueError(f"batch_norm input shape {x.shape} does not carry {c} channels")
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if self.running_mean is not None:
                m = self.momentum
                self.running_mean *= 1 - m
                self.running_mean += m * mean.astype(self.running_mean.dtype)
                self.running_var *= 1 - m
                self.running_var += m * var.astype(self.running_var.dtype)
        else:
            if self.running_mean is None or self.running_var is None:
                raise ValueError("batch_norm infer mode requires populated running statistics")
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._ctx = (xhat, inv, train)
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv, train = self._ctx
        self._ctx = None
        self.gamma_grad = (dy * xhat).sum(axis=(0, 2, 3))
        self.beta_grad = dy.sum(axis=(0, 2, 3))
        g = self.gamma[None, :, None, None]
        if not train:
            return dy * g * inv[None, :, None, None]
        n, _, h, w = dy.shape
        m = n * h * w
        dxhat = dy * g
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)


class ReLU:
    """Elementwise max(0, x); subgradient 0 at exactly 0."""

    def __init__(self):
        self._ctx = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        self._ctx = mask
        return np.where(mask, x, np.asarray(0, dtype=x.dtype))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        mask = self._ctx
        self._ctx = None
        return np.where(mask, dy, np.asarray(0, dtype=dy.dtype))


class MaxPool2x2:
    """Disjoint 2x2 max pooling; ties resolved to the lowest flat index.

    ``forward`` returns the pooled tensor plus the per-window argmax index
    (0..3, row-major within the window), which the matching unpool consumes.
    """

    def __init__(self):
        self._ctx = None

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max_pool_2x2 needs even spatial dims, got {h}x{w}")
        windows = (
            x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4)
        )
        idx = windows.argmax(axis=-1).astype(np.uint8)
        out = np.take_along_axis(windows, idx[..., None].astype(np.intp), axis=-1)[..., 0]
        self._ctx = (idx, (h, w))
        return out, idx

    def backward(self, dy: np.ndarray) -> np.ndarray:
        idx, (h, w) = self._ctx
        self._ctx = None
        n, c, h2, w2 = dy.shape
        dwin = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
        return (
            dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        )


class MaxUnpool2x2:
    """Scatter pooled values back to their recorded argmax positions."""

    def __init__(self):
        self._ctx = None

    def forward(self, x: np.ndarray, indices: np.ndarray) -> np.ndarray:
        if x.shape != indices.shape:
            raise ValueError(
                f"unpool input shape {x.shape} does not match indices shape {indices.shape}"
            )
        if indices.size and indices.max() > 3:
            raise ValueError("pool indices must address positions inside a 2x2 window")
        n, c, h2, w2 = x.shape
        win = np.zeros((n, c, h2, w2, 4), dtype=x.dtype)
        np.put_along_axis(win, indices[..., None].astype(np.intp), x[..., None], axis=-1)
        self._ctx = indices
        return (
            win.reshape(n, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, 2 * h2, 2 * w2)
        )

    def backward(self, dy: np.ndarray) -> np.ndarray:
        indices = self._ctx
        self._ctx = None
        n, c, h, w = dy.shape
        dwin = (
            dy.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4)
        )
        return np.take_along_axis(dwin, indices[..., None].astype(np.intp), axis=-1)[..., 0]


class ConcatChannels:
    """Channel concatenation of two tensors with equal batch/spatial dims."""

    def __init__(self):
        self._ctx = None

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ValueError(f"concat operands disagree outside channels: {a.shape} vs {b.shape}")
        self._ctx = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ca = self._ctx
        self._ctx = None
        return dy[:, :ca].copy(), dy[:, ca:].copy()


class SoftmaxChannels:
    """Per-pixel softmax across the channel axis, max-shifted for stability."""

    def __init__(self):
        self._ctx = None

    def forward(self, z: np.ndarray) -> np.ndarray:
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
        self._ctx = y
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        y = self._ctx
        self._ctx = None
        return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-5,
    mode: str = "central",
    coords: Optional[Iterable[Tuple[int, ...]]] = None,
) -> float:
    """Compare an analytic gradient against central finite differences.

    Perturbs ``point`` in place one coordinate at a time (restoring it
    afterwards) and returns the max over coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|). ``coords`` limits
    the check to a subset of coordinates; default is all of them.
    """
    if mode != "central":
        raise ValueError(f"unsupported mode {mode!r}")
    if step <= 0:
        raise ValueError("step must be positive")
    if analytic.shape != point.shape:
        raise ValueError("analytic gradient shape must match the point")
    if not np.all(np.isfinite(analytic)):
        raise ValueError("analytic gradient contains non-finite entries")
    if coords is None:
        coords = np.ndindex(*point.shape)
    worst = 0.0
    for idx in coords:
        orig = point[idx]
        point[idx] = orig + step
        fp = float(f(point))
        point[idx] = orig - step
        fm = float(f(point))
        point[idx] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if err > worst:
            worst = err
    return worst


def sample_coords(
    shape: Sequence[int], max_coords: int, rng: np.random.Generator
) -> list[Tuple[int, ...]]:
    """Pick up to ``max_coords`` distinct coordinates of ``shape``, seeded."""
    total = int(np.prod(shape))
    if total <= max_coords:
        return list(np.ndindex(*shape))
    flat = rng.choice(total, size=max_coords, replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in sorted(flat)]
