"""Desk-scale measurement stand-ins: proxy-FID, accuracy streams, artifacts.

proxy-FID is the Frechet distance between Gaussians fit to features of a
fixed, seed-frozen, never-trained random conv net. Random features are good
enough for *relative* comparisons at this scale, and keeping the extractor
untrained keeps the metric dependency-free; its seed belongs in the
experiment record.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import augment, nn, ops
from .rng import stream
from .tensor import Tensor, no_grad

NEAR_ZERO = 0.05


class MetricError(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    step: int
    proxy_fid: float
    acc_train_real: float
    acc_val_real: float
    acc_fake: float
    acc_T_real: float
    acc_T_fake: float
    acc_raw_fake: float
    loss_d: float
    loss_g: float


CSV_HEADER = "step,proxy_fid,acc_train_real,acc_val_real,acc_fake,acc_T_real,acc_T_fake,acc_raw_fake,loss_d,loss_g"


def record_to_csv_row(rec: MetricsRecord) -> str:
    vals = [getattr(rec, f.name) for f in fields(MetricsRecord)]
    out = [str(int(vals[0]))]
    out += [f"{float(v):.8g}" for v in vals[1:]]
    return ",".join(out)


class FeatureExtractor:
    """Frozen random conv net: 3 stride-2 conv blocks, global mean pool, 64-d."""

    FEATURE_DIM = 64

    def __init__(self, seed: int, resolution: int):
        rng = stream(seed, "extractor")
        self.seed = seed
        self.resolution = resolution
        self.convs = [
            nn.Conv2d(3, 32, rng, "fx.c0", stride=2),
            nn.Conv2d(32, 64, rng, "fx.c1", stride=2),
            nn.Conv2d(64, 64, rng, "fx.c2", stride=2),
        ]
        # variance-preserving draw: random features must not vanish layer by layer
        for conv in self.convs:
            fan_in = conv.w.shape[1] * 9
            conv.w.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), conv.w.shape).astype(np.float32)

    def features(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        if images.ndim != 4 or images.shape[2] != self.resolution:
            raise MetricError(f"extractor expects (N,3,{self.resolution},{self.resolution}), got {images.shape}")
        out = []
        with no_grad():
            for i in range(0, len(images), chunk):
                h = Tensor(images[i : i + chunk])
                for conv in self.convs:
                    h = ops.leaky_relu(conv(h), 0.2)
                out.append(ops.reduce_mean(h, axes=(2, 3)).data)
        return np.concatenate(out).astype(np.float64)


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def _frechet(mu1, s1, mu2, s2) -> float:
    s1h = _sqrtm_psd(s1)
    cross = s1h @ s2 @ s1h
    cross = (cross + cross.T) / 2.0
    w = np.clip(np.linalg.eigvalsh(cross), 0.0, None)
    tr_sqrt = float(np.sum(np.sqrt(w)))
    d2 = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def proxy_fid(real_images: np.ndarray, gen_images: np.ndarray,
              extractor: FeatureExtractor) -> float:
    """Frechet distance between Gaussian fits of extractor features."""
    if len(real_images) < 64 or len(gen_images) < 64:
        raise MetricError(
            f"proxy_fid needs >= 64 images per side, got {len(real_images)} and {len(gen_images)}")
    f1 = extractor.features(real_images)
    f2 = extractor.features(gen_images)
    mu1, mu2 = f1.mean(axis=0), f2.mean(axis=0)
    s1 = np.cov(f1, rowvar=False)
    s2 = np.cov(f2, rowvar=False)
    try:
        return _frechet(mu1, s1, mu2, s2)
    except np.linalg.LinAlgError:
        eye = np.eye(s1.shape[0]) * 1e-6
        try:
            return _frechet(mu1, s1 + eye, mu2, s2 + eye)
        except np.linalg.LinAlgError as e:
            raise MetricError(f"covariance square root failed twice: {e}") from e


def _logits(d_net, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), chunk):
            out.append(d_net(Tensor(images[i : i + chunk])).data.reshape(-1))
    return np.concatenate(out)


def _aug_np(images: np.ndarray, policy, rng) -> np.ndarray:
    with no_grad():
        out, _ = augment.apply_policy(Tensor(images), policy, rng)
    return out.data


def real_accuracy(d_net, images: np.ndarray) -> float:
    """Fraction classified real (logit strictly > 0; a 0 logit is wrong)."""
    return float(np.mean(_logits(d_net, images) > 0.0))


def fake_accuracy(d_net, images: np.ndarray) -> float:
    """Fraction classified fake (logit strictly < 0; a 0 logit is wrong)."""
    return float(np.mean(_logits(d_net, images) < 0.0))


def d_accuracies(d_net, train_reals: np.ndarray, val_reals: np.ndarray,
                 fakes: np.ndarray, policy: Sequence[str],
                 rng: np.random.Generator) -> dict:
    """Sign-of-logit accuracies of the discriminator.

    Returns the raw streams (train/val reals, fakes) plus the three
    augmentation-view streams: accuracy on T(train reals), on T(fakes), and
    on raw fakes.
    """
    if len(val_reals) == 0:
        raise MetricError("empty validation split")
    return {
        "acc_train_real": real_accuracy(d_net, train_reals),
        "acc_val_real": real_accuracy(d_net, val_reals),
        "acc_fake": fake_accuracy(d_net, fakes),
        "acc_T_real": real_accuracy(d_net, _aug_np(train_reals, policy, rng)),
        "acc_T_fake": fake_accuracy(d_net, _aug_np(fakes, policy, rng)),
        "acc_raw_fake": fake_accuracy(d_net, fakes),
    }


def _cutout_artifact(images: np.ndarray) -> float:
    """Mean over images of the worst near-zero fraction in any half-size window."""
    n, c, r, _ = images.shape
    side = r // 2
    nz = (np.abs(images) < NEAR_ZERO).sum(axis=1).astype(np.float64)  # (N, R, R)
    # summed-area table per image
    sat = np.zeros((n, r + 1, r + 1))
    sat[:, 1:, 1:] = nz.cumsum(axis=1).cumsum(axis=2)
    best = np.zeros(n)
    denom = float(c * side * side)
    for i in range(r - side + 1):
        for j in range(r - side + 1):
            window = (sat[:, i + side, j + side] - sat[:, i, j + side]
                      - sat[:, i + side, j] + sat[:, i, j])
            best = np.maximum(best, window / denom)
    return float(best.mean())


def _translation_artifact(images: np.ndarray) -> float:
    """Worst (over band widths) mean near-zero fraction in border bands."""
    n, c, r, _ = images.shape
    max_w = max(1, r // 8)
    nz = np.abs(images) < NEAR_ZERO
    best = 0.0
    for w in range(1, max_w + 1):
        band = np.ones((r, r), dtype=bool)
        band[w : r - w, w : r - w] = False
        frac = float(nz[:, :, band].mean())
        best = max(best, frac)
    return best


def artifact_score(images: np.ndarray, policy: Sequence[str]) -> float:
    """How strongly generated images carry augmentation artifacts.

    Cutout: largest near-zero (|v| < 0.05) pixel fraction inside any
    half-image-size square. Translation: near-zero fraction in border bands up
    to R/8 wide. Returns the max over the detectors the policy enables.
    """
    kinds = set(policy)
    scores = []
    if "cutout" in kinds:
        scores.append(_cutout_artifact(images))
    if "translation" in kinds:
        scores.append(_translation_artifact(images))
    if not scores:
        raise MetricError("artifact_score needs a policy containing cutout and/or translation")
    return max(scores)
