"""Differentiable image augmentations with recorded randomness.

Three families, applied per image with fresh draws each call:

* translation — integer shift within [-R/8, R/8] per axis, zero padded;
* cutout — a half-image-size square zeroed, the square may overhang the
  borders (clipped), offsets drawn from [-side/2, R - side/2);
* color — brightness (x + b, b in [-0.5, 0.5]), saturation ((x - m) * s + m
  with m the per-pixel channel mean, s in [0, 2]), contrast ((x - mu) * c + mu
  with mu the per-image mean over channels and pixels, c in [0.5, 1.5]).

Outputs are not clamped: clamping would kill gradients exactly where the
augmentation bites. Every realized draw is returned as an
:class:`AugmentationSample` so it can be replayed bit-exactly on another
batch. Each application relabels its output node "aug.<kind>" so training
code can assert structurally which loss graphs contain augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor, relabel

_f32 = np.float32

COLOR_KINDS = ("brightness", "saturation", "contrast")
PRIMITIVE_KINDS = ("translation", "cutout") + COLOR_KINDS
POLICY_TOKENS = ("color", "translation", "cutout")


class PolicyError(ValueError):
    pass


class AugmentRangeError(ValueError):
    pass


@dataclass
class AugmentationSample:
    """Realized random parameters of one augmentation application."""

    kind: str
    params: Dict[str, np.ndarray]


def parse_policy(text: str) -> List[str]:
    """Comma-separated policy tokens -> ordered primitive kinds.

    "color" expands to brightness, saturation, contrast in that order; the
    empty string is the identity policy.
    """
    text = text.strip()
    if not text:
        return []
    kinds: List[str] = []
    for token in text.split(","):
        token = token.strip().lower()
        if token == "color":
            kinds.extend(COLOR_KINDS)
        elif token in ("translation", "cutout"):
            kinds.append(token)
        else:
            raise PolicyError(f"unknown policy token {token!r} (expected one of {POLICY_TOKENS})")
    return kinds


def _image_geometry(x: Tensor) -> Tuple[int, int]:
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise PolicyError(f"augmentations expect square NCHW batches, got {x.shape}")
    return x.shape[0], x.shape[2]


def max_shift(resolution: int) -> int:
    return resolution // 8


def cutout_side(resolution: int) -> int:
    return resolution // 2


def draw_sample(kind: str, batch: int, resolution: int, rng: np.random.Generator) -> AugmentationSample:
    """Fresh independent per-image parameters for one augmentation kind."""
    if kind == "translation":
        m = max_shift(resolution)
        return AugmentationSample(kind, {
            "shift_x": rng.integers(-m, m + 1, size=batch),
            "shift_y": rng.integers(-m, m + 1, size=batch),
        })
    if kind == "cutout":
        side = cutout_side(resolution)
        lo, hi = -(side // 2), resolution - side // 2
        return AugmentationSample(kind, {
            "mask_top": rng.integers(lo, hi, size=batch),
            "mask_left": rng.integers(lo, hi, size=batch),
        })
    if kind == "brightness":
        return AugmentationSample(kind, {"factor": rng.uniform(-0.5, 0.5, size=batch).astype(_f32)})
    if kind == "contrast":
        return AugmentationSample(kind, {"factor": rng.uniform(0.5, 1.5, size=batch).astype(_f32)})
    if kind == "saturation":
        return AugmentationSample(kind, {"factor": rng.uniform(0.0, 2.0, size=batch).astype(_f32)})
    raise PolicyError(f"unknown augmentation kind {kind!r}")


def _per_image_const(factor: np.ndarray, shape) -> Tensor:
    return Tensor(np.ascontiguousarray(
        np.broadcast_to(factor.astype(_f32).reshape(-1, 1, 1, 1), shape)))


def translate(x: Tensor, sample: AugmentationSample) -> Tensor:
    x = as_tensor(x)
    _, r = _image_geometry(x)
    sx = np.asarray(sample.params["shift_x"], dtype=np.int64)
    sy = np.asarray(sample.params["shift_y"], dtype=np.int64)
    m = max_shift(r)
    if np.any(np.abs(sx) > m) or np.any(np.abs(sy) > m):
        raise AugmentRangeError(f"translation shift out of range [-{m}, {m}]")
    if np.all(sx == 0) and np.all(sy == 0):
        return x
    return relabel(ops.shift2d(x, sx, sy), "aug.translation")


def cutout(x: Tensor, sample: AugmentationSample) -> Tensor:
    x = as_tensor(x)
    b, r = _image_geometry(x)
    side = cutout_side(r)
    top = np.asarray(sample.params["mask_top"], dtype=np.int64)
    left = np.asarray(sample.params["mask_left"], dtype=np.int64)
    if np.any(top < -side) or np.any(top > r) or np.any(left < -side) or np.any(left > r):
        raise AugmentRangeError(f"cutout offsets out of range [-{side}, {r}]")
    mask = np.ones(x.shape, dtype=_f32)
    touched = False
    for i in range(b):
        y0, y1 = max(0, int(top[i])), min(r, int(top[i]) + side)
        x0, x1 = max(0, int(left[i])), min(r, int(left[i]) + side)
        if y1 > y0 and x1 > x0:
            mask[i, :, y0:y1, x0:x1] = 0.0
            touched = True
    if not touched:
        return x
    return relabel(ops.mul(x, Tensor(mask)), "aug.cutout")


def brightness(x: Tensor, sample: AugmentationSample) -> Tensor:
    x = as_tensor(x)
    _image_geometry(x)
    f = np.asarray(sample.params["factor"], dtype=_f32)
    if np.any(f < -0.5) or np.any(f > 0.5):
        raise AugmentRangeError("brightness factor out of range [-0.5, 0.5]")
    if np.all(f == 0.0):
        return x
    return relabel(ops.add(x, _per_image_const(f, x.shape)), "aug.brightness")


def contrast(x: Tensor, sample: AugmentationSample) -> Tensor:
    x = as_tensor(x)
    _image_geometry(x)
    f = np.asarray(sample.params["factor"], dtype=_f32)
    if np.any(f < 0.5) or np.any(f > 1.5):
        raise AugmentRangeError("contrast factor out of range [0.5, 1.5]")
    if np.all(f == 1.0):
        return x
    mu = ops.expand(ops.reduce_mean(x, axes=(1, 2, 3), keepdims=True), x.shape)
    out = ops.add(ops.mul(ops.sub(x, mu), _per_image_const(f, x.shape)), mu)
    return relabel(out, "aug.contrast")


def saturation(x: Tensor, sample: AugmentationSample) -> Tensor:
    x = as_tensor(x)
    _image_geometry(x)
    f = np.asarray(sample.params["factor"], dtype=_f32)
    if np.any(f < 0.0) or np.any(f > 2.0):
        raise AugmentRangeError("saturation factor out of range [0, 2]")
    if np.all(f == 1.0):
        return x
    mean_rgb = ops.expand(ops.reduce_mean(x, axes=(1,), keepdims=True), x.shape)
    out = ops.add(ops.mul(ops.sub(x, mean_rgb), _per_image_const(f, x.shape)), mean_rgb)
    return relabel(out, "aug.saturation")


_APPLY = {
    "translation": translate,
    "cutout": cutout,
    "brightness": brightness,
    "contrast": contrast,
    "saturation": saturation,
}


def apply_samples(x: Tensor, samples: Sequence[AugmentationSample]) -> Tensor:
    """Replay recorded samples, in order, on a batch of the same size."""
    out = as_tensor(x)
    for s in samples:
        out = _APPLY[s.kind](out, s)
    return out


def apply_policy(x: Tensor, policy: Sequence[str], rng: np.random.Generator):
    """Apply a policy with fresh per-image draws; returns (output, samples).

    The returned samples replay bit-exactly via :func:`apply_samples`. Draws
    are independent per invocation: every appearance of the augmentation in a
    loss gets its own randomness unless the caller explicitly replays.
    """
    x = as_tensor(x)
    if not policy:
        return x, []
    b, r = _image_geometry(x)
    samples = [draw_sample(kind, b, r, rng) for kind in policy]
    return apply_samples(x, samples), samples
