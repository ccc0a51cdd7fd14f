"""Config parsing, runner outputs, determinism, interpolation, CLI plumbing."""

import json
from pathlib import Path

import numpy as np
import pytest

from diffaug import cli, gan, runner
from diffaug.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    default_config_text,
    from_text,
    to_text,
)
from diffaug.gan import LossKind, Strategy


TINY = """
# tiny smoke config
strategy = diffaugment
loss_kind = non_saturating
policy = color,translation,cutout
batch_size = 8
total_steps = 2
eval_every = 2
base_channels = 8
latent_dim = 16
seed = 3
synthetic_n = 80
fraction = 1.0
eval_samples = 64
"""


def tiny_cfg(tmp_path, **overrides):
    cfg = from_text(TINY)
    cfg.out_dir = str(tmp_path / "out")
    for k, v in overrides.items():
        if hasattr(cfg.train, k):
            setattr(cfg.train, k, v)
        else:
            setattr(cfg, k, v)
    return cfg


class TestConfig:
    def test_round_trip(self):
        cfg = from_text(TINY)
        text = to_text(cfg)
        cfg2 = from_text(text)
        assert to_text(cfg2) == text
        assert cfg2.train.strategy == Strategy.DIFFAUGMENT
        assert cfg2.train.batch_size == 8
        assert cfg2.synthetic_n == 80

    def test_default_template_parses_and_validates(self):
        cfg = from_text(default_config_text())
        cfg.validate()

    def test_unknown_key_rejected_by_name(self):
        with pytest.raises(ConfigError, match="mystery_knob"):
            from_text("mystery_knob = 3")

    def test_typed_values_enforced(self):
        with pytest.raises(ConfigError, match="batch_size"):
            from_text("batch_size = lots")
        with pytest.raises(ConfigError, match="strategy"):
            from_text("strategy = maximal_effort")
        with pytest.raises(ConfigError, match="flip_reals"):
            from_text("flip_reals = sometimes")

    def test_overrides(self):
        cfg = from_text(TINY)
        apply_overrides(cfg, ["seed=9", "r1_gamma=0.5", "policy=cutout"])
        assert cfg.train.seed == 9
        assert cfg.train.r1_gamma == 0.5
        assert cfg.train.policy == "cutout"
        with pytest.raises(ConfigError):
            apply_overrides(cfg, ["no_equals_sign"])

    def test_validation_catches_bad_values(self):
        cfg = from_text(TINY)
        cfg.fraction = 0.0
        with pytest.raises(ConfigError, match="fraction"):
            cfg.validate()
        cfg = from_text(TINY)
        cfg.eval_samples = 32
        with pytest.raises(ConfigError, match="eval_samples"):
            cfg.validate()
        cfg = from_text(TINY)
        cfg.sweep_axis = "lr"
        with pytest.raises(ConfigError, match="sweep_axis"):
            cfg.validate()


class TestRunExperiment:
    def test_zero_steps_emits_step0_only(self, tmp_path):
        cfg = tiny_cfg(tmp_path, total_steps=0)
        result = runner.run_experiment(cfg)
        assert result.final_step == 0 and not result.halted
        lines = Path(result.csv_path).read_text().strip().splitlines()
        assert len(lines) == 2  # header + step 0
        assert lines[1].startswith("0,")

    def test_output_layout(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        result = runner.run_experiment(cfg)
        out = Path(result.out_dir)
        assert (out / "metrics.csv").is_file()
        assert (out / "summary.txt").is_file()
        assert (out / "config.txt").is_file()
        assert (out / "grids" / "step_00000000.png").is_file()
        assert (out / "grids" / "step_00000002.png").is_file()
        assert (out / "ckpt" / "step_00000002.npz").is_file()

    def test_summary_best_matches_csv_minimum(self, tmp_path):
        cfg = tiny_cfg(tmp_path, total_steps=4)
        result = runner.run_experiment(cfg)
        rows = Path(result.csv_path).read_text().strip().splitlines()[1:]
        fids = [float(r.split(",")[1]) for r in rows]
        summary = dict(line.split(" = ") for line in
                       Path(result.out_dir, "summary.txt").read_text().strip().splitlines())
        assert float(summary["best_proxy_fid"]) == pytest.approx(min(fids), rel=1e-6)
        assert result.best_proxy_fid == pytest.approx(min(fids), rel=1e-6)

    def test_same_config_byte_identical_outputs(self, tmp_path):
        cfg1 = tiny_cfg(tmp_path / "a")
        cfg2 = tiny_cfg(tmp_path / "b")
        r1 = runner.run_experiment(cfg1)
        r2 = runner.run_experiment(cfg2)
        assert Path(r1.csv_path).read_bytes() == Path(r2.csv_path).read_bytes()
        grid = "grids/step_00000002.png"
        assert (Path(r1.out_dir) / grid).read_bytes() == (Path(r2.out_dir) / grid).read_bytes()
        assert (Path(r1.out_dir) / "summary.txt").read_text() == (
            Path(r2.out_dir) / "summary.txt").read_text()

    def test_checkpoint_state_round_trip(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        result = runner.run_experiment(cfg)
        ckpt = Path(result.out_dir) / "ckpt" / "step_00000002.npz"
        state, cfg2 = runner.load_state(ckpt)
        assert state.step == 2
        arrays = runner.checkpoint_arrays(state)
        import numpy as np
        from diffaug import nn as dnn

        raw, meta = dnn.load_checkpoint(ckpt)
        for k, v in raw.items():
            assert np.array_equal(arrays[k], v), k

    def test_divergence_writes_diagnostics(self, tmp_path, monkeypatch):
        cfg = tiny_cfg(tmp_path, total_steps=5)

        def boom(state, config, data_iter):
            raise gan.TrainingDiverged(state.step, {"loss_d": float("nan")},
                                       {"latent": {"state": 1}}, "test")

        monkeypatch.setattr(gan, "train_step", boom)
        result = runner.run_experiment(cfg)
        assert result.halted
        dump = json.loads(Path(result.out_dir, "diverged.txt").read_text())
        assert dump["step"] == 0
        summary = Path(result.out_dir, "summary.txt").read_text()
        assert "halted = true" in summary


class TestSweep:
    def test_single_value_axis_matches_plain_run(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "sweep", total_steps=2)
        cfg.sweep_axis = "base_channels"
        cfg.sweep_values = "8"
        res = runner.run_sweep(cfg)
        assert len(res.rows) == 1

        plain = tiny_cfg(tmp_path / "plain", total_steps=2)
        plain_res = runner.run_experiment(plain)
        assert res.rows[0]["best_proxy_fid"] == pytest.approx(plain_res.best_proxy_fid, rel=1e-6)

        csv = Path(res.csv_path).read_text().splitlines()
        assert csv[0] == "axis_value,best_proxy_fid,best_step"
        assert len(csv) == 2

    def test_r1_gamma_axis(self, tmp_path):
        cfg = tiny_cfg(tmp_path, total_steps=1, eval_every=1)
        cfg.sweep_axis = "r1_gamma"
        cfg.sweep_values = "0,0.1"
        res = runner.run_sweep(cfg)
        assert len(res.rows) == 2
        assert (Path(res.out_dir) / "runs" / "r1_gamma=0" / "metrics.csv").is_file()


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("interp")
    cfg = tiny_cfg(tmp)
    runner.run_experiment(cfg)
    return str(Path(cfg.out_dir) / "ckpt" / "step_00000002.npz")


class TestInterpolate:
    def test_steps_two_gives_endpoints(self, ckpt, tmp_path):
        from PIL import Image

        paths = runner.interpolate(ckpt, n_pairs=1, steps=2, seed=0, out_dir=tmp_path)
        img = np.asarray(Image.open(paths[0]))
        assert img.shape == (16, 32, 3)

    def test_equal_endpoints_identical_frames(self, ckpt, tmp_path):
        state, cfg = runner.load_state(ckpt)
        g = state.ema.ema_generator(state.generator)
        z = np.zeros((3, cfg.train.latent_dim), dtype=np.float32)
        frames = runner.generate(g, z)
        assert np.array_equal(frames[0], frames[1])

    def test_smoothness_ordering(self, ckpt, tmp_path):
        # adjacent frames differ less than the endpoints do
        state, cfg = runner.load_state(ckpt)
        g = state.ema.ema_generator(state.generator)
        rng = np.random.default_rng(5)
        z0 = rng.standard_normal(cfg.train.latent_dim).astype(np.float32)
        z1 = rng.standard_normal(cfg.train.latent_dim).astype(np.float32)
        alphas = np.linspace(0, 1, 8, dtype=np.float32)
        zs = np.stack([(1 - a) * z0 + a * z1 for a in alphas])
        frames = runner.generate(g, zs)
        adj = [np.abs(frames[i + 1] - frames[i]).mean() for i in range(7)]
        end = np.abs(frames[-1] - frames[0]).mean()
        assert max(adj) < end

    def test_corrupt_checkpoint_rejected(self, tmp_path):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"junk")
        with pytest.raises(ValueError):
            runner.interpolate(str(bad), 1, 2, 0, tmp_path)


class TestCliEntry:
    def test_run_subcommand(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY + f"\nout_dir = {tmp_path / 'out'}\n")
        rc = cli.main(["run", "--config", str(cfg_path), "--override", "total_steps=0"])
        assert rc == 0
        assert "best proxy-FID" in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text("strategy = nonsense\n")
        assert cli.main(["run", "--config", str(cfg_path)]) == 2
        assert cli.main(["run", "--config", str(tmp_path / "missing.txt")]) == 2

    def test_bad_override_exit_code(self, tmp_path):
        cfg_path = tmp_path / "cfg.txt"
        cfg_path.write_text(TINY)
        rc = cli.main(["run", "--config", str(cfg_path), "--override", "fraction=5"])
        assert rc == 2

    def test_config_template_prints_parseable(self, capsys):
        assert cli.main(["config-template"]) == 0
        text = capsys.readouterr().out
        from_text(text).validate()

    def test_interpolate_subcommand(self, tmp_path, capsys):
        cfg = tiny_cfg(tmp_path)
        runner.run_experiment(cfg)
        ckpt = str(Path(cfg.out_dir) / "ckpt" / "step_00000002.npz")
        rc = cli.main(["interpolate", "--checkpoint", ckpt, "--pairs", "1",
                       "--steps", "3", "--seed", "1", "--out", str(tmp_path / "strips")])
        assert rc == 0
        out = capsys.readouterr().out.strip()
        assert out.endswith(".png") and Path(out).is_file()
