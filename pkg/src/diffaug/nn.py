"""Small convolutional generator/discriminator, Adam, and a generator EMA.

Architectures are deliberately tiny (4x4 seed, nearest-upsample + 3x3 conv
blocks up; stride-2 3x3 conv blocks down to 4x4) so full runs fit on a CPU.
Weights init to normal(0, 0.02), biases to zero.
"""

from __future__ import annotations

import json
import math
from typing import Optional

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

_f32 = np.float32


class NanGradientError(FloatingPointError):
    """Raised when an optimizer step sees a non-finite gradient."""


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.name = name
        self.w = Tensor(rng.normal(0.0, 0.02, (n_in, n_out)).astype(_f32), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=_f32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.w), self.b)

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class Conv2d:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str, stride: int = 1):
        self.name = name
        self.stride = stride
        self.w = Tensor(rng.normal(0.0, 0.02, (c_out, c_in, 3, 3)).astype(_f32), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=_f32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.w, stride=self.stride, padding=1)
        bias = ops.expand(ops.reshape(self.b, (1, self.b.shape[0], 1, 1)), out.shape)
        return ops.add(out, bias)

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


def _check_resolution(resolution: int) -> int:
    if resolution not in (16, 32):
        raise ValueError(f"resolution must be 16 or 32, got {resolution}")
    return int(math.log2(resolution // 4))


class Generator:
    """latent -> dense 4x4 seed -> (upsample, conv, lrelu) blocks -> tanh image."""

    def __init__(self, latent_dim: int = 64, base_channels: int = 32, resolution: int = 16,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        n_up = _check_resolution(resolution)
        self.latent_dim = latent_dim
        self.base_channels = base_channels
        self.resolution = resolution
        self.seed_channels = base_channels * (2 ** n_up)
        self.project = Dense(latent_dim, self.seed_channels * 16, rng, "g.project")
        self.blocks = []
        c = self.seed_channels
        for i in range(n_up):
            blk = Conv2d(c, c // 2, rng, f"g.block{i}.conv")
            self.blocks.append(blk)
            c //= 2
        self.to_rgb = Conv2d(c, 3, rng, "g.to_rgb")

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError("generator_forward", z.shape, (-1, self.latent_dim))
        h = ops.leaky_relu(self.project(z), 0.2)
        h = ops.reshape(h, (z.shape[0], self.seed_channels, 4, 4))
        for blk in self.blocks:
            h = ops.leaky_relu(blk(ops.upsample_nearest2x(h)), 0.2)
        return ops.tanh(self.to_rgb(h))

    def params(self):
        out = list(self.project.params())
        for blk in self.blocks:
            out.extend(blk.params())
        out.extend(self.to_rgb.params())
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.params())

    def clone(self) -> "Generator":
        g = Generator(self.latent_dim, self.base_channels, self.resolution)
        for (_, dst), (_, src) in zip(g.params(), self.params()):
            dst.data = src.data.copy()
        return g


class Discriminator:
    """stride-2 conv blocks with leaky_relu(0.2) down to 4x4, dense to one logit.

    Channels run at CHANNEL_MULT x the generator's width: the limited-data
    regime this code studies needs a discriminator with enough capacity to
    memorize a small train split, and both nets still scale together through
    base_channels.
    """

    CHANNEL_MULT = 2

    def __init__(self, base_channels: int = 32, resolution: int = 16,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        n_down = _check_resolution(resolution)
        self.base_channels = base_channels
        self.resolution = resolution
        self.blocks = []
        c_in = 3
        c = base_channels * self.CHANNEL_MULT
        for i in range(n_down):
            self.blocks.append(Conv2d(c_in, c, rng, f"d.block{i}.conv", stride=2))
            c_in = c
            c *= 2
        self.head = Dense(c_in * 16, 1, rng, "d.head")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.resolution or x.shape[3] != self.resolution:
            raise ShapeError("discriminator_forward", x.shape, (-1, 3, self.resolution, self.resolution))
        h = x
        for blk in self.blocks:
            h = ops.leaky_relu(blk(h), 0.2)
        h = ops.reshape(h, (x.shape[0], h.shape[1] * 16))
        return self.head(h)

    def params(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.params())
        out.extend(self.head.params())
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.params())


def zero_grads(net) -> None:
    for _, p in net.params():
        p.grad = None


class Adam:
    """Bias-corrected Adam over a fixed parameter list, updating in place."""

    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.0, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.names = [n for n, _ in params]
        self.params = [p for _, p in params]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        for n, g in zip(self.names, grads):
            if g is not None and not np.all(np.isfinite(g)):
                raise NanGradientError(f"non-finite gradient for {n}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


class EmaShadow:
    """Exponential moving average of generator weights.

    decay = 0.5 ** (batch_size / half_life_images): the shadow decays by half
    every half_life_images training images.
    """

    def __init__(self, generator: Generator, half_life_images: int):
        if half_life_images <= 0:
            raise ValueError("half_life_images must be positive")
        self.half_life_images = int(half_life_images)
        self.shadow = [p.data.copy() for _, p in generator.params()]

    def decay_for(self, batch_size: int) -> float:
        return 0.5 ** (batch_size / self.half_life_images)

    def update(self, generator: Generator, batch_size: int) -> None:
        d = _f32(self.decay_for(batch_size))
        for s, (_, p) in zip(self.shadow, generator.params()):
            s *= d
            s += (1.0 - d) * p.data

    def load_into(self, generator: Generator) -> None:
        for s, (_, p) in zip(self.shadow, generator.params()):
            p.data = s.copy()

    def ema_generator(self, generator: Generator) -> Generator:
        g = generator.clone()
        self.load_into(g)
        return g


CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    """Versioned npz dump: float arrays plus a JSON metadata blob.

    Round-trips bit-exactly (arrays stored raw, no compression).
    """
    header = dict(meta)
    header["checkpoint_version"] = CHECKPOINT_VERSION
    np.savez(path, __meta__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path):
    try:
        with np.load(path) as z:
            files = dict(z)
    except Exception as e:
        raise ValueError(f"corrupt or unreadable checkpoint {path}: {e}") from e
    raw = files.pop("__meta__", None)
    if raw is None:
        raise ValueError(f"corrupt checkpoint {path}: missing metadata")
    meta = json.loads(raw.tobytes().decode())
    version = meta.pop("checkpoint_version", None)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return files, meta
