"""Loss values, strategy wiring, gradient flow structure, R1, train loop."""

import numpy as np
import pytest

from diffaug import Tensor, backward, grad, graph_ops, no_grad, ops
from diffaug import augment, data, gan, nn
from diffaug.gan import (
    LossKind,
    Strategy,
    TrainConfig,
    TrainingDiverged,
    d_loss,
    d_step_losses,
    f_d,
    f_g,
    g_loss,
    init_train_state,
    r1_penalty,
    sample_latents,
    train_step,
)

from oracles import check_grad_fn, numeric_grad, rel_err


LOG2 = float(np.log(2.0))
FULL_POLICY = augment.parse_policy("color,translation,cutout")


class _ConstantD:
    """Stands in for a discriminator with a fixed logit."""

    def __init__(self, value=0.0):
        self.value = value

    def __call__(self, x):
        flat = ops.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        zero = ops.mul(ops.reduce_mean(flat, axes=(1,), keepdims=True), 0.0)
        return ops.add(zero, self.value)


def tiny_config(**kw):
    defaults = dict(strategy=Strategy.DIFFAUGMENT, loss_kind=LossKind.NON_SATURATING,
                    policy="color,translation,cutout", batch_size=4, total_steps=8,
                    base_channels=8, latent_dim=16, seed=0, eval_every=4,
                    r1_gamma=0.1)
    defaults.update(kw)
    return TrainConfig(**defaults)


def tiny_dataset(seed=0, n=100):
    return data.make_synthetic(data.SyntheticSpec(n, 16, seed))


class TestLossValues:
    def test_hinge_zero_logits(self):
        rng = np.random.default_rng(0)
        reals = Tensor(rng.uniform(-1, 1, (4, 3, 16, 16)).astype(np.float32))
        fakes = Tensor(rng.uniform(-1, 1, (4, 3, 16, 16)).astype(np.float32))
        loss = d_loss(_ConstantD(0.0), reals, fakes, Strategy.BASELINE,
                      LossKind.HINGE, [], rng)
        assert loss.item() == pytest.approx(2.0)

    def test_non_saturating_zero_logits(self):
        rng = np.random.default_rng(1)
        reals = Tensor(rng.uniform(-1, 1, (4, 3, 16, 16)).astype(np.float32))
        fakes = Tensor(rng.uniform(-1, 1, (4, 3, 16, 16)).astype(np.float32))
        loss = d_loss(_ConstantD(0.0), reals, fakes, Strategy.BASELINE,
                      LossKind.NON_SATURATING, [], rng)
        assert loss.item() == pytest.approx(2.0 * LOG2, rel=1e-5)

    def test_g_loss_hinge_zero_d(self):
        g = nn.Generator(16, 8, 16, np.random.default_rng(0))
        z = Tensor(np.zeros((2, 16), dtype=np.float32))
        loss = g_loss(_ConstantD(0.0), g, z, Strategy.BASELINE, LossKind.HINGE,
                      [], np.random.default_rng(1))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_g_loss_non_saturating_zero_d(self):
        g = nn.Generator(16, 8, 16, np.random.default_rng(0))
        z = Tensor(np.zeros((2, 16), dtype=np.float32))
        loss = g_loss(_ConstantD(0.0), g, z, Strategy.BASELINE,
                      LossKind.NON_SATURATING, [], np.random.default_rng(1))
        assert loss.item() == pytest.approx(LOG2, rel=1e-5)

    def test_f_transforms(self):
        t = Tensor(np.array([-2.0, 0.0, 2.0], dtype=np.float32))
        np.testing.assert_allclose(f_d(t, LossKind.HINGE).data, [0.0, 1.0, 3.0])
        np.testing.assert_allclose(f_g(t, LossKind.HINGE).data, t.data)
        np.testing.assert_allclose(
            f_d(t, LossKind.NON_SATURATING).data,
            np.log1p(np.exp([-2.0, 0.0, 2.0])), rtol=1e-5)


class TestStrategyWiring:
    def test_g_graph_has_no_aug_nodes_except_diffaugment(self):
        d = nn.Discriminator(8, 16, np.random.default_rng(1))
        g = nn.Generator(16, 8, 16, np.random.default_rng(2))
        z = Tensor(np.random.default_rng(3).standard_normal((2, 16)).astype(np.float32))
        for strat in (Strategy.BASELINE, Strategy.AUGMENT_REALS_ONLY, Strategy.AUGMENT_D_ONLY):
            loss = g_loss(d, g, z, strat, LossKind.NON_SATURATING, FULL_POLICY,
                          np.random.default_rng(4))
            assert not any(op.startswith("aug.") for op in graph_ops(loss)), strat

        loss = g_loss(d, g, z, Strategy.DIFFAUGMENT, LossKind.NON_SATURATING,
                      FULL_POLICY, np.random.default_rng(4))
        assert any(op.startswith("aug.") for op in graph_ops(loss))

    def test_d_step_detached_from_generator(self):
        cfg = tiny_config()
        state = init_train_state(cfg)
        ds = tiny_dataset()
        it = data.batch_iter(ds, cfg.batch_size, True, state.rngs["data"])
        reals = next(it)
        with no_grad():
            z = sample_latents(state.rngs["latent"], cfg.batch_size, cfg.latent_dim)
            fakes = state.generator(z)
        nn.zero_grads(state.generator)
        nn.zero_grads(state.discriminator)
        loss, pen = d_step_losses(state.discriminator, reals, fakes, cfg.strategy,
                                  cfg.loss_kind, FULL_POLICY, state.rngs["augment"],
                                  gamma=cfg.r1_gamma)
        backward(ops.add(loss, pen))
        for n, p in state.generator.params():
            assert p.grad is None, f"generator param {n} received gradient on D step"
        assert any(p.grad is not None and np.any(p.grad != 0)
                   for _, p in state.discriminator.params())

    def test_diffaugment_g_gradient_matches_fd(self):
        # end-to-end dL_G/dtheta_G through the augmentation chain
        d = nn.Discriminator(4, 16, np.random.default_rng(5))
        g = nn.Generator(16, 4, 16, np.random.default_rng(6))
        z = np.random.default_rng(7).standard_normal((2, 16)).astype(np.float32)
        policy = FULL_POLICY

        names = [n for n, _ in g.params()]
        params = [p for _, p in g.params()]
        loss = g_loss(d, g, Tensor(z), Strategy.DIFFAUGMENT, LossKind.NON_SATURATING,
                      policy, np.random.default_rng(8))
        grads = grad(loss, params)
        rng = np.random.default_rng(9)
        worst = 0.0
        for name, p, an in zip(names, params, grads):
            coords = rng.choice(p.size, size=min(6, p.size), replace=False)

            def f(v, p=p):
                orig = p.data.copy()
                p.data = v
                out = g_loss(d, g, Tensor(z), Strategy.DIFFAUGMENT,
                             LossKind.NON_SATURATING, policy,
                             np.random.default_rng(8)).item()
                p.data = orig
                return out

            num = numeric_grad(f, p.data, coords=coords)
            mask = ~np.isnan(num)
            worst = max(worst, rel_err(an.data[mask], num[mask]))
        assert worst < 2e-3, worst


class TestR1:
    def test_gamma_zero_is_zero(self):
        d = nn.Discriminator(8, 16, np.random.default_rng(0))
        reals = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 3, 16, 16)).astype(np.float32))
        pen = r1_penalty(d, reals, [], 0.0, True, np.random.default_rng(2))
        assert pen.item() == 0.0

    def test_linear_discriminator_exact_value(self):
        # for D(x) = <w, x> + b the penalty is (gamma/2) * ||w||^2 exactly
        rng = np.random.default_rng(3)
        w = rng.standard_normal((3 * 16 * 16, 1)).astype(np.float32)

        class LinearD:
            def __call__(self, x):
                flat = ops.reshape(x, (x.shape[0], 3 * 16 * 16))
                return ops.matmul(flat, Tensor(w, requires_grad=True))

        reals = Tensor(rng.uniform(-1, 1, (4, 3, 16, 16)).astype(np.float32))
        gamma = 0.7
        pen = r1_penalty(LinearD(), reals, [], gamma, True, np.random.default_rng(4),
                         strategy=Strategy.BASELINE)
        expected = gamma / 2.0 * float(np.sum(w.astype(np.float64) ** 2))
        assert pen.item() == pytest.approx(expected, rel=1e-4)

    def test_conv_d_penalty_matches_fd_norm(self):
        # penalty value vs finite-difference estimate of ||grad D||^2
        d = nn.Discriminator(4, 16, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        x = rng.uniform(-0.8, 0.8, (1, 3, 16, 16)).astype(np.float32)
        pen = r1_penalty(d, Tensor(x), [], 2.0, True, np.random.default_rng(7),
                         strategy=Strategy.BASELINE)

        def f(v):
            return d(Tensor(v)).item()

        num = numeric_grad(f, x)
        assert pen.item() == pytest.approx(float(np.sum(num ** 2)), rel=1e-2)

    def test_penalty_gradient_reaches_weights(self):
        d = nn.Discriminator(4, 16, np.random.default_rng(8))
        reals = Tensor(np.random.default_rng(9).uniform(-1, 1, (2, 3, 16, 16)).astype(np.float32))
        pen = r1_penalty(d, reals, FULL_POLICY, 0.5, True, np.random.default_rng(10))
        nn.zero_grads(d)
        backward(pen)
        conv_grads = [p.grad for n, p in d.params() if n.endswith(".w")]
        assert any(g is not None and np.any(g != 0) for g in conv_grads)

    def test_r1_through_augmentation_to_x(self):
        # r1_on_augmented=False differentiates through T back to x
        d = nn.Discriminator(4, 16, np.random.default_rng(11))
        reals = Tensor(np.random.default_rng(12).uniform(-1, 1, (2, 3, 16, 16)).astype(np.float32))
        pen_aug = r1_penalty(d, reals, FULL_POLICY, 1.0, True, np.random.default_rng(13))
        pen_x = r1_penalty(d, reals, FULL_POLICY, 1.0, False, np.random.default_rng(13))
        assert np.isfinite(pen_aug.item()) and np.isfinite(pen_x.item())
        assert pen_aug.item() != pytest.approx(pen_x.item())


class TestTrainStep:
    def test_lr_zero_leaves_params_unchanged(self):
        cfg = tiny_config(lr=0.0)
        state = init_train_state(cfg)
        ds = tiny_dataset()
        it = data.batch_iter(ds, cfg.batch_size, True, state.rngs["data"])
        before = {n: p.data.copy() for n, p in state.generator.params()}
        before.update({n: p.data.copy() for n, p in state.discriminator.params()})
        losses = train_step(state, cfg, it)
        assert np.isfinite(losses["loss_d"]) and np.isfinite(losses["loss_g"])
        for n, p in list(state.generator.params()) + list(state.discriminator.params()):
            np.testing.assert_array_equal(p.data, before[n])

    def test_two_runs_identical_seed_bit_exact_traces(self):
        def trace():
            cfg = tiny_config(total_steps=6)
            state = init_train_state(cfg)
            ds = tiny_dataset()
            it = data.batch_iter(ds, cfg.batch_size, True, state.rngs["data"])
            return [train_step(state, cfg, it) for _ in range(6)]

        t1, t2 = trace(), trace()
        assert t1 == t2

    def test_step_counter_and_ema_updates(self):
        cfg = tiny_config()
        state = init_train_state(cfg)
        ds = tiny_dataset()
        it = data.batch_iter(ds, cfg.batch_size, True, state.rngs["data"])
        shadow_before = [s.copy() for s in state.ema.shadow]
        train_step(state, cfg, it)
        assert state.step == 1
        moved = any(not np.array_equal(a, b)
                    for a, b in zip(shadow_before, state.ema.shadow))
        assert moved

    def test_d_steps_per_g(self):
        cfg = tiny_config(d_steps_per_g=3)
        state = init_train_state(cfg)
        ds = tiny_dataset()
        it = data.batch_iter(ds, cfg.batch_size, True, state.rngs["data"])
        train_step(state, cfg, it)
        assert state.opt_d.t == 3
        assert state.opt_g.t == 1

    def test_nan_halts_with_diagnostics(self):
        cfg = tiny_config()
        state = init_train_state(cfg)
        ds = tiny_dataset()
        it = data.batch_iter(ds, cfg.batch_size, True, state.rngs["data"])
        # poison a generator weight so the G forward goes non-finite
        state.generator.project.w.data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged) as ei:
            train_step(state, cfg, it)
        assert ei.value.step == 0
        assert "latent" in ei.value.rng_states


class TestStrategyEquivalence:
    def test_empty_policy_strategies_bit_identical(self):
        traces = {}
        for strat in Strategy:
            cfg = tiny_config(strategy=strat, policy="", total_steps=5)
            state = init_train_state(cfg)
            ds = tiny_dataset()
            it = data.batch_iter(ds, cfg.batch_size, True, state.rngs["data"])
            traces[strat] = [train_step(state, cfg, it) for _ in range(5)]
        ref = traces[Strategy.BASELINE]
        for strat, tr in traces.items():
            assert tr == ref, f"{strat} diverged from baseline under empty policy"
