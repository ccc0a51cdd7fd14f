"""Losses, the four training strategies, gradient penalty, training loop.

The strategies differ only in where the augmentation enters:

* baseline            — D sees x and G(z); G sees D(G(z)).
* augment_reals_only  — D sees T(x) and G(z); G sees D(G(z)).
* augment_d_only      — D sees T(x) and T(G(z)); G still sees D(G(z)).
* diffaugment         — D sees T(x) and T(G(z)); G sees D(T(G(z))) with
                        gradients flowing through T back to the generator.

Each appearance of T draws fresh randomness (the losses are expectations over
the augmentation); `shared_draw` optionally replays the D-step real draw onto
the fakes. Fakes for D steps come from fresh latents under no_grad, so the
discriminator loss carries no generator dependence at all.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import augment, nn, ops
from .rng import get_state, stream
from .tensor import Tensor, grad, no_grad


class Strategy(str, enum.Enum):
    BASELINE = "baseline"
    AUGMENT_REALS_ONLY = "augment_reals_only"
    AUGMENT_D_ONLY = "augment_d_only"
    DIFFAUGMENT = "diffaugment"


class LossKind(str, enum.Enum):
    NON_SATURATING = "non_saturating"
    HINGE = "hinge"


_AUGMENTS_REALS = {Strategy.AUGMENT_REALS_ONLY, Strategy.AUGMENT_D_ONLY, Strategy.DIFFAUGMENT}
_AUGMENTS_FAKES_FOR_D = {Strategy.AUGMENT_D_ONLY, Strategy.DIFFAUGMENT}


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; carries a diagnostic snapshot."""

    def __init__(self, step: int, losses: dict, rng_states: dict, detail: str = ""):
        self.step = step
        self.losses = losses
        self.rng_states = rng_states
        super().__init__(f"training diverged at step {step}: {detail or losses}")


def f_d(t: Tensor, kind: LossKind) -> Tensor:
    """Discriminator loss transform applied to the signed logit argument."""
    if kind == LossKind.NON_SATURATING:
        return ops.softplus(t)
    return ops.maximum(ops.add(t, 1.0), 0.0)


def f_g(t: Tensor, kind: LossKind) -> Tensor:
    if kind == LossKind.NON_SATURATING:
        return ops.softplus(t)
    return t


@dataclass
class TrainConfig:
    strategy: Strategy = Strategy.DIFFAUGMENT
    loss_kind: LossKind = LossKind.NON_SATURATING
    policy: str = "color,translation,cutout"
    shared_draw: bool = False
    d_steps_per_g: int = 1
    batch_size: int = 32
    total_steps: int = 1000
    r1_gamma: float = 0.1
    r1_on_augmented: bool = True
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.999
    ema_half_life_images: int = 0  # 0 = auto: 10 * batch_size * eval_every
    seed: int = 0
    eval_every: int = 500
    resolution: int = 16
    latent_dim: int = 64
    base_channels: int = 32

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.loss_kind = LossKind(self.loss_kind)
        if self.r1_gamma < 0:
            raise ValueError("r1_gamma must be >= 0")
        if self.d_steps_per_g < 1:
            raise ValueError("d_steps_per_g must be >= 1")

    def policy_kinds(self) -> List[str]:
        return augment.parse_policy(self.policy)

    def ema_half_life(self) -> int:
        # Auto: ~1/16 of the images the run will see, floored so short runs
        # still average a little. A fixed multiple of eval cadence leaves the
        # shadow frozen at init for desk-scale step counts.
        if self.ema_half_life_images > 0:
            return self.ema_half_life_images
        total_images = self.batch_size * max(self.total_steps, 1)
        return max(8 * self.batch_size, total_images // 16)


@dataclass
class TrainState:
    generator: nn.Generator
    discriminator: nn.Discriminator
    opt_g: nn.Adam
    opt_d: nn.Adam
    ema: nn.EmaShadow
    rngs: Dict[str, np.random.Generator]
    step: int = 0


def init_train_state(config: TrainConfig) -> TrainState:
    rngs = {name: stream(config.seed, name) for name in ("weights", "latent", "augment", "data", "eval")}
    g = nn.Generator(config.latent_dim, config.base_channels, config.resolution, rngs["weights"])
    d = nn.Discriminator(config.base_channels, config.resolution, rngs["weights"])
    opt_g = nn.Adam(g.params(), config.lr, config.beta1, config.beta2)
    opt_d = nn.Adam(d.params(), config.lr, config.beta1, config.beta2)
    ema = nn.EmaShadow(g, config.ema_half_life())
    return TrainState(g, d, opt_g, opt_d, ema, rngs)


def sample_latents(rng: np.random.Generator, batch: int, latent_dim: int) -> Tensor:
    return Tensor(rng.standard_normal((batch, latent_dim)).astype(np.float32))


def d_step_losses(d_net, reals: Tensor, fakes: Tensor, strategy: Strategy,
                  loss_kind: LossKind, policy: Sequence[str], rng: np.random.Generator,
                  shared_draw: bool = False, gamma: float = 0.0,
                  r1_on_augmented: bool = True):
    """Discriminator loss and R1 penalty off one shared real forward.

    The penalty gradient is taken at T(x) when r1_on_augmented, else at x
    through T; either way it reuses the same D(T(x)) evaluation the loss term
    uses. Returns (loss, penalty); penalty is a zero tensor when gamma == 0.
    """
    x = Tensor(reals.data, requires_grad=True) if gamma > 0.0 else reals
    real_in = x
    fake_in = fakes
    if strategy in _AUGMENTS_REALS:
        real_in, samples = augment.apply_policy(x, policy, rng)
        if strategy in _AUGMENTS_FAKES_FOR_D:
            if shared_draw:
                fake_in = augment.apply_samples(fakes, samples)
            else:
                fake_in, _ = augment.apply_policy(fakes, policy, rng)
    real_logits = d_net(real_in)
    loss_real = ops.reduce_mean(f_d(ops.neg(real_logits), loss_kind))
    loss_fake = ops.reduce_mean(f_d(d_net(fake_in), loss_kind))
    loss = ops.add(loss_real, loss_fake)
    if gamma == 0.0:
        return loss, ops.zeros(())
    target = real_in if r1_on_augmented else x
    (g,) = grad(ops.reduce_sum(real_logits), [target], create_graph=True)
    per_image = ops.reduce_sum(ops.square(g), axes=tuple(range(1, g.ndim)))
    penalty = ops.mul(ops.reduce_mean(per_image), gamma / 2.0)
    return loss, penalty


def d_loss(d_net, reals: Tensor, fakes: Tensor, strategy: Strategy, loss_kind: LossKind,
           policy: Sequence[str], rng: np.random.Generator,
           shared_draw: bool = False) -> Tensor:
    """Discriminator objective; fakes must already be detached from G."""
    loss, _ = d_step_losses(d_net, reals, fakes, strategy, loss_kind, policy, rng,
                            shared_draw, gamma=0.0)
    return loss


def g_loss(d_net, g_net, z: Tensor, strategy: Strategy, loss_kind: LossKind,
           policy: Sequence[str], rng: np.random.Generator) -> Tensor:
    """Generator objective; only diffaugment routes gradients through T."""
    x = g_net(z)
    if strategy == Strategy.DIFFAUGMENT:
        x, _ = augment.apply_policy(x, policy, rng)
    return ops.reduce_mean(f_g(ops.neg(d_net(x)), loss_kind))


def r1_penalty(d_net, reals: Tensor, policy: Sequence[str], gamma: float,
               r1_on_augmented: bool, rng: np.random.Generator,
               strategy: Strategy = Strategy.DIFFAUGMENT) -> Tensor:
    """(gamma/2) * E ||grad D at the real point||^2, differentiable w.r.t. D.

    With r1_on_augmented the gradient is taken at T(x); otherwise w.r.t. x
    through T. Strategies that never augment reals are penalized at x.
    """
    if gamma == 0.0:
        return ops.zeros(())
    x = Tensor(reals.data, requires_grad=True)
    if strategy in _AUGMENTS_REALS:
        aug_x, _ = augment.apply_policy(x, policy, rng)
    else:
        aug_x = x
    logits = d_net(aug_x)
    target = aug_x if r1_on_augmented else x
    (g,) = grad(ops.reduce_sum(logits), [target], create_graph=True)
    per_image = ops.reduce_sum(ops.square(g), axes=tuple(range(1, g.ndim)))
    return ops.mul(ops.reduce_mean(per_image), gamma / 2.0)


def _finite(x: float) -> bool:
    return bool(np.isfinite(x))


def train_step(state: TrainState, config: TrainConfig, data_iter) -> dict:
    """One alternating update: d_steps_per_g discriminator steps, one
    generator step, then the EMA blend. Returns the last losses."""
    policy = config.policy_kinds()
    strategy = config.strategy
    rng_aug = state.rngs["augment"]
    rng_lat = state.rngs["latent"]
    loss_d_val = 0.0
    loss_g_val = 0.0

    try:
        for _ in range(config.d_steps_per_g):
            reals = next(data_iter)
            with no_grad():
                z = sample_latents(rng_lat, config.batch_size, config.latent_dim)
                fakes = state.generator(z)
            nn.zero_grads(state.discriminator)
            loss, pen = d_step_losses(state.discriminator, reals, fakes, strategy,
                                      config.loss_kind, policy, rng_aug,
                                      config.shared_draw, config.r1_gamma,
                                      config.r1_on_augmented)
            if config.r1_gamma > 0.0:
                loss = ops.add(loss, pen)
            loss_d_val = loss.item()
            if not _finite(loss_d_val):
                raise nn.NanGradientError("discriminator loss is non-finite")
            loss.backward()
            state.opt_d.step()

        z = sample_latents(rng_lat, config.batch_size, config.latent_dim)
        nn.zero_grads(state.generator)
        nn.zero_grads(state.discriminator)
        loss = g_loss(state.discriminator, state.generator, z, strategy,
                      config.loss_kind, policy, rng_aug)
        loss_g_val = loss.item()
        if not _finite(loss_g_val):
            raise nn.NanGradientError("generator loss is non-finite")
        loss.backward()
        state.opt_g.step()
    except nn.NanGradientError as e:
        raise TrainingDiverged(
            state.step,
            {"loss_d": loss_d_val, "loss_g": loss_g_val},
            {name: get_state(r) for name, r in state.rngs.items()},
            str(e),
        ) from e

    state.ema.update(state.generator, config.batch_size)
    state.step += 1
    return {"loss_d": loss_d_val, "loss_g": loss_g_val}
