"""QuickTumorNet: a dense encoder/decoder segmentation network.

Four encoder stages (dense block + 2x2 max pool) feed a bottleneck
convolution at 1/16 resolution; four decoder stages mirror them with max
unpooling on the saved pool indices and channel concatenation of the
same-resolution encoder output. A 1x1 classifier plus per-pixel softmax
produces one probability per class per pixel.

Each dense block runs

    norm -> ReLU -> kxk conv (-> base) -> concat with block input
         -> norm -> ReLU -> kxk conv (-> base) -> concat
         -> 1x1 conv (-> base)

so the two inner convolutions see channel widths C and C+base, and the
fusing 1x1 convolution sees C+2*base, where C is the block input width.
The bottleneck convolution carries no bias: it feeds straight into a
normalization layer, which cancels any per-channel constant, so a bias
there could never receive a meaningful gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .kernels import (
    BatchNorm2d,
    ConcatChannels,
    Conv2d,
    MaxPool2x2,
    MaxUnpool2x2,
    ReLU,
    SoftmaxChannels,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; ``depth`` is fixed at 4."""

    in_channels: int = 1
    num_classes: int = 4
    base_channels: int = 64
    depth: int = 4
    dense_kernel: int = 5
    input_size: tuple[int, int] = (256, 256)

    def validate(self) -> None:
        if self.depth != 4:
            raise ValueError(f"depth is fixed at 4, got {self.depth}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("in_channels and base_channels must be positive")
        if self.dense_kernel < 1 or self.dense_kernel % 2 == 0:
            raise ValueError(f"dense_kernel must be odd and positive, got {self.dense_kernel}")
        h, w = self.input_size
        div = 2**self.depth
        if h % div or w % div:
            raise ValueError(f"input_size {h}x{w} must be divisible by {div}")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "dense_kernel": self.dense_kernel,
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        cfg = cls(
            in_channels=int(data["in_channels"]),
            num_classes=int(data["num_classes"]),
            base_channels=int(data["base_channels"]),
            depth=int(data["depth"]),
            dense_kernel=int(data["dense_kernel"]),
            input_size=tuple(int(v) for v in data["input_size"]),
        )
        cfg.validate()
        return cfg


def _dense_block_widths(in_ch: int, base: int) -> tuple[int, int, int]:
    """Channel widths seen by conv1, conv2, and the fusing 1x1 conv."""
    return in_ch, in_ch + base, in_ch + 2 * base


def parameter_spec(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Fixed name -> (shape, kind) table; kind is weight|bias|scale|shift|stat.

    The name order here is also the initialization draw order, so two builds
    with the same seed always produce identical tensors.
    """
    base = config.base_channels
    k = config.dense_kernel
    spec: dict[str, tuple[tuple[int, ...], str]] = {}

    def norm(prefix: str, ch: int) -> None:
        spec[f"{prefix}.gamma"] = ((ch,), "scale")
        spec[f"{prefix}.beta"] = ((ch,), "shift")
        spec[f"{prefix}.running_mean"] = ((ch,), "stat")
        spec[f"{prefix}.running_var"] = ((ch,), "stat")

    def conv(prefix: str, out_ch: int, in_ch: int, size: int, bias: bool = True) -> None:
        spec[f"{prefix}.weight"] = ((out_ch, in_ch, size, size), "weight")
        if bias:
            spec[f"{prefix}.bias"] = ((out_ch,), "bias")

    def dense(prefix: str, in_ch: int) -> None:
        c1, c2, c3 = _dense_block_widths(in_ch, base)
        norm(f"{prefix}.norm1", c1)
        conv(f"{prefix}.conv1", base, c1, k)
        norm(f"{prefix}.norm2", c2)
        conv(f"{prefix}.conv2", base, c2, k)
        conv(f"{prefix}.conv3", base, c3, 1)

    dense("enc1", config.in_channels)
    for i in range(2, 5):
        dense(f"enc{i}", base)
    conv("bottleneck.conv", base, base, k, bias=False)
    norm("bottleneck.norm", base)
    for i in range(4, 0, -1):
        dense(f"dec{i}", 2 * base)
    conv("classifier.conv", config.num_classes, base, 1)
    return spec


def parameter_count(config: ModelConfig) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return sum(
        int(np.prod(shape))
        for shape, kind in parameter_spec(config).values()
        if kind != "stat"
    )


class _DenseBlock:
    def __init__(self, params: dict[str, np.ndarray], prefix: str):
        p = prefix
        self.norm1 = BatchNorm2d(
            params[f"{p}.norm1.gamma"],
            params[f"{p}.norm1.beta"],
            params[f"{p}.norm1.running_mean"],
            params[f"{p}.norm1.running_var"],
            eps=BN_EPS,
            momentum=BN_MOMENTUM,
        )
        self.relu1 = ReLU()
        self.conv1 = Conv2d(params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"])
        self.cat1 = ConcatChannels()
        self.norm2 = BatchNorm2d(
            params[f"{p}.norm2.gamma"],
            params[f"{p}.norm2.beta"],
            params[f"{p}.norm2.running_mean"],
            params[f"{p}.norm2.running_var"],
            eps=BN_EPS,
            momentum=BN_MOMENTUM,
        )
        self.relu2 = ReLU()
        self.conv2 = Conv2d(params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"])
        self.cat2 = ConcatChannels()
        self.conv3 = Conv2d(params[f"{p}.conv3.weight"], params[f"{p}.conv3.bias"])
        self.prefix = prefix

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        t1 = self.conv1.forward(self.relu1.forward(self.norm1.forward(x, train)))
        c1 = self.cat1.forward(x, t1)
        t2 = self.conv2.forward(self.relu2.forward(self.norm2.forward(c1, train)))
        c2 = self.cat2.forward(c1, t2)
        return self.conv3.forward(c2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dc1_direct, dt2 = self.cat2.backward(self.conv3.backward(dy))
        dc1 = dc1_direct + self.norm2.backward(
            self.relu2.backward(self.conv2.backward(dt2))
        )
        dx_direct, dt1 = self.cat1.backward(dc1)
        return dx_direct + self.norm1.backward(self.relu1.backward(self.conv1.backward(dt1)))

    def gradients(self) -> dict[str, np.ndarray]:
        p = self.prefix
        return {
            f"{p}.norm1.gamma": self.norm1.gamma_grad,
            f"{p}.norm1.beta": self.norm1.beta_grad,
            f"{p}.conv1.weight": self.conv1.weight_grad,
            f"{p}.conv1.bias": self.conv1.bias_grad,
            f"{p}.norm2.gamma": self.norm2.gamma_grad,
            f"{p}.norm2.beta": self.norm2.beta_grad,
            f"{p}.conv2.weight": self.conv2.weight_grad,
            f"{p}.conv2.bias": self.conv2.bias_grad,
            f"{p}.conv3.weight": self.conv3.weight_grad,
            f"{p}.conv3.bias": self.conv3.bias_grad,
        }


class QuickTumorNet:
    """Wires parameter tensors into the full forward/backward dataflow.

    Layer objects share the arrays held in ``self.params``, so in-place
    optimizer updates are visible without any copying.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        config.validate()
        expected = parameter_spec(config)
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, (shape, _) in expected.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        self.config = config
        self.params = params
        self._wire()

    def _wire(self) -> None:
        p = self.params
        self.encoders = [_DenseBlock(p, f"enc{i}") for i in range(1, 5)]
        self.pools = [MaxPool2x2() for _ in range(4)]
        self.bottleneck_conv = Conv2d(
            p["bottleneck.conv.weight"],
            np.zeros(self.config.base_channels, dtype=p["bottleneck.conv.weight"].dtype),
        )
        self.bottleneck_norm = BatchNorm2d(
            p["bottleneck.norm.gamma"],
            p["bottleneck.norm.beta"],
            p["bottleneck.norm.running_mean"],
            p["bottleneck.norm.running_var"],
            eps=BN_EPS,
            momentum=BN_MOMENTUM,
        )
        self.unpools = [MaxUnpool2x2() for _ in range(4)]
        self.skip_cats = [ConcatChannels() for _ in range(4)]
        self.decoders = [_DenseBlock(p, f"dec{i}") for i in range(4, 0, -1)]
        self.classifier = Conv2d(p["classifier.conv.weight"], p["classifier.conv.bias"])
        self.softmax = SoftmaxChannels()

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "QuickTumorNet":
        """He-scaled normal weights, zero biases, identity normalization."""
        config.validate()
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, (shape, kind) in parameter_spec(config).items():
            if kind == "weight":
                fan_in = int(np.prod(shape[1:]))
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            elif kind in ("bias", "shift"):
                params[name] = np.zeros(shape)
            elif kind == "scale":
                params[name] = np.ones(shape)
            elif kind == "stat":
                stat = np.zeros(shape) if name.endswith("mean") else np.ones(shape)
                params[name] = stat
        return cls(config, params)

    def astype(self, dtype) -> "QuickTumorNet":
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self._wire()
        return self

    def trainable_names(self) -> list[str]:
        return [n for n, (_, kind) in parameter_spec(self.config).items() if kind != "stat"]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"input shape {x.shape} must be (n, {self.config.in_channels}, h, w)"
            )
        div = 2**self.config.depth
        n, _, h, w = x.shape
        if h % div or w % div:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {div}")

        skips = []
        indices = []
        t = x
        for enc, pool in zip(self.encoders, self.pools):
            e = enc.forward(t, train)
            skips.append(e)
            t, idx = pool.forward(e)
            indices.append(idx)

        t = self.bottleneck_norm.forward(self.bottleneck_conv.forward(t), train)

        for unpool, cat, dec, skip, idx in zip(
            self.unpools, self.skip_cats, self.decoders, reversed(skips), reversed(indices)
        ):
            t = dec.forward(cat.forward(unpool.forward(t, idx), skip), train)

        return self.softmax.forward(self.classifier.forward(t))

    def backward(self, dprobs: np.ndarray) -> dict[str, np.ndarray]:
        """Propagate the loss gradient; returns gradients for trainable names."""
        t = self.classifier.backward(self.softmax.backward(dprobs))

        dskips = []  # filled in enc1..enc4 order (decoders unwind from dec1)
        for unpool, cat, dec in zip(
            reversed(self.unpools), reversed(self.skip_cats), reversed(self.decoders)
        ):
            dup, dskip = cat.backward(dec.backward(t))
            dskips.append(dskip)
            t = unpool.backward(dup)

        t = self.bottleneck_conv.backward(self.bottleneck_norm.backward(t))

        for enc, pool, dskip in zip(
            reversed(self.encoders), reversed(self.pools), reversed(dskips)
        ):
            t = enc.backward(pool.backward(t) + dskip)

        grads: dict[str, np.ndarray] = {}
        for block in self.encoders + self.decoders:
            grads.update(block.gradients())
        grads["bottleneck.conv.weight"] = self.bottleneck_conv.weight_grad
        grads["bottleneck.norm.gamma"] = self.bottleneck_norm.gamma_grad
        grads["bottleneck.norm.beta"] = self.bottleneck_norm.beta_grad
        grads["classifier.conv.weight"] = self.classifier.weight_grad
        grads["classifier.conv.bias"] = self.classifier.bias_grad
        return grads

    def save(self, path, seed: int | None = None, extra: dict | None = None) -> None:
        config = {"model": self.config.to_dict(), "seed": seed, "extra": extra or {}}
        checkpoint.save_checkpoint(path, config, self.params)

    @classmethod
    def load(cls, path) -> "QuickTumorNet":
        config, tensors = checkpoint.load_checkpoint(path)
        model_cfg = ModelConfig.from_dict(config["model"])
        params = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
        return cls(model_cfg, params)


def build_model(config: ModelConfig, seed: int) -> QuickTumorNet:
    return QuickTumorNet.build(config, seed)


def save_weights(model: QuickTumorNet, path, seed: int | None = None) -> None:
    model.save(path, seed=seed)


def load_weights(path) -> QuickTumorNet:
    return QuickTumorNet.load(path)
