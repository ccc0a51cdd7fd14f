"""Experiment execution: training with periodic evaluation and artifacts.

A run writes, under its output directory:

    metrics.csv            one row per evaluation point
    grids/step_%08d.png    8x8 sample grid from the EMA generator
    ckpt/step_%08d.npz     full training state (bit-exact round trip)
    summary.txt            best proxy-FID, its step, run provenance
    diverged.txt           only on NaN halt: step, losses, rng states

All randomness fans out from the single master seed, so one config determines
every output byte on a given platform.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import data, gan, metrics, nn
from .config import ConfigError, ExperimentConfig, to_text
from .rng import get_state
from .tensor import Tensor, no_grad


@dataclass
class RunResult:
    out_dir: str
    best_proxy_fid: float
    best_step: int
    final_step: int
    halted: bool
    csv_path: str


@dataclass
class SweepResult:
    out_dir: str
    csv_path: str
    rows: List[dict]


def build_dataset(cfg: ExperimentConfig) -> data.Dataset:
    if cfg.data_source == "synthetic":
        spec = data.SyntheticSpec(cfg.synthetic_n, cfg.train.resolution, cfg.train.seed)
        ds = data.make_synthetic(spec)
    else:
        ds = data.load_folder(cfg.data_path, cfg.train.resolution, split_seed=cfg.train.seed)
    if cfg.fraction < 1.0:
        ds = data.subsample(ds, cfg.fraction, cfg.train.seed)
    return ds


def _to_uint8(images: np.ndarray) -> np.ndarray:
    arr = np.clip((images + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8)


def write_grid(path, images: np.ndarray, cols: int = 8) -> None:
    """Tile (N,3,R,R) images row-major into one lossless PNG."""
    from PIL import Image

    n, _, r, _ = images.shape
    rows = math.ceil(n / cols)
    canvas = np.zeros((rows * r, cols * r, 3), dtype=np.uint8)
    tiles = _to_uint8(images).transpose(0, 2, 3, 1)
    for i in range(n):
        y, x = divmod(i, cols)
        canvas[y * r : (y + 1) * r, x * r : (x + 1) * r] = tiles[i]
    Image.fromarray(canvas).save(path, format="PNG")


def generate(g_net: nn.Generator, z: np.ndarray, chunk: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(z), chunk):
            out.append(g_net(Tensor(z[i : i + chunk])).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_arrays(state: gan.TrainState) -> dict:
    arrays = {}
    for name, p in state.generator.params():
        arrays[name] = p.data
    for name, p in state.discriminator.params():
        arrays[name] = p.data
    for i, (m, v) in enumerate(zip(state.opt_g.m, state.opt_g.v)):
        arrays[f"opt_g.m.{i}"] = m
        arrays[f"opt_g.v.{i}"] = v
    for i, (m, v) in enumerate(zip(state.opt_d.m, state.opt_d.v)):
        arrays[f"opt_d.m.{i}"] = m
        arrays[f"opt_d.v.{i}"] = v
    for i, s in enumerate(state.ema.shadow):
        arrays[f"ema.{i}"] = s
    return arrays


def save_state(path, state: gan.TrainState, cfg: ExperimentConfig) -> None:
    meta = {
        "step": state.step,
        "opt_g_t": state.opt_g.t,
        "opt_d_t": state.opt_d.t,
        "rng": {name: get_state(r) for name, r in state.rngs.items()},
        "config": to_text(cfg),
    }
    nn.save_checkpoint(path, checkpoint_arrays(state), meta)


def load_state(path):
    """Rebuild (state, cfg) from a checkpoint file."""
    from .config import from_text
    from .rng import set_state

    arrays, meta = nn.load_checkpoint(path)
    cfg = from_text(meta["config"])
    state = gan.init_train_state(cfg.train)
    for name, p in state.generator.params():
        p.data = arrays[name].copy()
    for name, p in state.discriminator.params():
        p.data = arrays[name].copy()
    for i in range(len(state.opt_g.m)):
        state.opt_g.m[i] = arrays[f"opt_g.m.{i}"].copy()
        state.opt_g.v[i] = arrays[f"opt_g.v.{i}"].copy()
    for i in range(len(state.opt_d.m)):
        state.opt_d.m[i] = arrays[f"opt_d.m.{i}"].copy()
        state.opt_d.v[i] = arrays[f"opt_d.v.{i}"].copy()
    for i in range(len(state.ema.shadow)):
        state.ema.shadow[i] = arrays[f"ema.{i}"].copy()
    state.step = int(meta["step"])
    state.opt_g.t = int(meta["opt_g_t"])
    state.opt_d.t = int(meta["opt_d_t"])
    for name, st in meta["rng"].items():
        set_state(state.rngs[name], st)
    return state, cfg


# ---------------------------------------------------------------------------
# evaluation


class _Evaluator:
    def __init__(self, cfg: ExperimentConfig, ds: data.Dataset, state: gan.TrainState):
        self.cfg = cfg
        self.ds = ds
        self.extractor = metrics.FeatureExtractor(cfg.train.seed, cfg.train.resolution)
        rng = state.rngs["eval"]
        self.z_fid = rng.standard_normal((cfg.eval_samples, cfg.train.latent_dim)).astype(np.float32)
        self.z_grid = rng.standard_normal((64, cfg.train.latent_dim)).astype(np.float32)
        val = ds.val_images()
        self.reference = val if len(val) >= 64 else ds.images
        train = ds.train_images()
        self.train_eval = train[: min(256, len(train))]
        self.val_eval = val

    def evaluate(self, state: gan.TrainState, losses: dict) -> metrics.MetricsRecord:
        cfg = self.cfg
        policy = cfg.train.policy_kinds()
        ema_g = state.ema.ema_generator(state.generator)
        ema_fakes = generate(ema_g, self.z_fid)
        fid = metrics.proxy_fid(self.reference, ema_fakes, self.extractor)

        rng = state.rngs["eval"]
        z_live = rng.standard_normal((cfg.eval_samples, cfg.train.latent_dim)).astype(np.float32)
        live_fakes = generate(state.generator, z_live)
        accs = metrics.d_accuracies(state.discriminator, self.train_eval, self.val_eval,
                                    live_fakes, policy, rng)
        acc_fake_ema = metrics.fake_accuracy(state.discriminator, ema_fakes)
        return metrics.MetricsRecord(
            step=state.step,
            proxy_fid=fid,
            acc_train_real=accs["acc_train_real"],
            acc_val_real=accs["acc_val_real"],
            acc_fake=acc_fake_ema,
            acc_T_real=accs["acc_T_real"],
            acc_T_fake=accs["acc_T_fake"],
            acc_raw_fake=accs["acc_raw_fake"],
            loss_d=losses.get("loss_d", 0.0),
            loss_g=losses.get("loss_g", 0.0),
        )

    def grid_images(self, state: gan.TrainState) -> np.ndarray:
        ema_g = state.ema.ema_generator(state.generator)
        return generate(ema_g, self.z_grid)


# ---------------------------------------------------------------------------
# the run


def run_experiment(cfg: ExperimentConfig,
                   progress_cb: Optional[Callable[[int, int], None]] = None) -> RunResult:
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grids").mkdir(exist_ok=True)
    (out / "ckpt").mkdir(exist_ok=True)
    (out / "config.txt").write_text(to_text(cfg))

    ds = build_dataset(cfg)
    t = cfg.train
    if len(ds.val_images()) == 0:
        raise ConfigError("validation split is empty; increase dataset size")
    state = gan.init_train_state(t)
    evaluator = _Evaluator(cfg, ds, state)
    data_iter = data.batch_iter(ds, t.batch_size, cfg.flip_reals, state.rngs["data"])

    csv_path = out / "metrics.csv"
    records: List[metrics.MetricsRecord] = []
    halted = False

    def do_eval(losses: dict) -> None:
        rec = evaluator.evaluate(state, losses)
        records.append(rec)
        write_grid(out / "grids" / f"step_{state.step:08d}.png", evaluator.grid_images(state))
        save_state(out / "ckpt" / f"step_{state.step:08d}.npz", state, cfg)

    losses = {"loss_d": 0.0, "loss_g": 0.0}
    do_eval(losses)
    try:
        while state.step < t.total_steps:
            losses = gan.train_step(state, t, data_iter)
            if state.step % t.eval_every == 0 or state.step == t.total_steps:
                do_eval(losses)
            if progress_cb is not None:
                progress_cb(state.step, t.total_steps)
    except gan.TrainingDiverged as e:
        halted = True
        dump = {
            "step": e.step,
            "losses": e.losses,
            "rng_states": e.rng_states,
        }
        (out / "diverged.txt").write_text(json.dumps(dump, indent=2, default=str) + "\n")

    with open(csv_path, "w", newline="\n") as f:
        f.write(metrics.CSV_HEADER + "\n")
        for rec in records:
            f.write(metrics.record_to_csv_row(rec) + "\n")

    best = min(records, key=lambda r: r.proxy_fid)
    summary = {
        "best_proxy_fid": f"{best.proxy_fid:.8g}",
        "best_step": str(best.step),
        "final_step": str(state.step),
        "halted": "true" if halted else "false",
        "extractor_seed": str(evaluator.extractor.seed),
        "generator_params": str(state.generator.param_count()),
        "discriminator_params": str(state.discriminator.param_count()),
    }
    (out / "summary.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in summary.items()))
    return RunResult(str(out), best.proxy_fid, best.step, state.step, halted, str(csv_path))


def run_sweep(cfg: ExperimentConfig,
              progress_cb: Optional[Callable[[int, int], None]] = None) -> SweepResult:
    cfg.validate()
    if not cfg.sweep_axis:
        raise ConfigError("sweep requires sweep_axis")
    values = cfg.sweep_value_list()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        sub = dataclasses.replace(cfg)
        sub.train = dataclasses.replace(cfg.train)
        if cfg.sweep_axis == "base_channels":
            sub.train.base_channels = int(v)
            label = f"base_channels={int(v)}"
        else:
            sub.train.r1_gamma = float(v)
            label = f"r1_gamma={v:g}"
        sub.out_dir = str(out / "runs" / label)
        sub.sweep_axis = ""
        sub.sweep_values = ""
        result = run_experiment(sub, progress_cb)
        rows.append({"axis_value": v, "best_proxy_fid": result.best_proxy_fid,
                     "best_step": result.best_step})
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="\n") as f:
        f.write("axis_value,best_proxy_fid,best_step\n")
        for r in rows:
            f.write(f"{r['axis_value']:g},{r['best_proxy_fid']:.8g},{r['best_step']}\n")
    return SweepResult(str(out), str(csv_path), rows)


# ---------------------------------------------------------------------------
# sampling from checkpoints


def _ema_generator_from(path):
    state, cfg = load_state(path)
    g = state.ema.ema_generator(state.generator)
    return g, cfg


def sample_from_checkpoint(path, n: int, seed: int) -> np.ndarray:
    g, cfg = _ema_generator_from(path)
    z = np.random.default_rng(seed).standard_normal((n, cfg.train.latent_dim)).astype(np.float32)
    return generate(g, z)


def interpolate(checkpoint_path, n_pairs: int, steps: int, seed: int, out_dir) -> List[str]:
    """Latent-space interpolation strips from the EMA generator.

    Each strip is `steps` frames between a pair of latents, horizontally
    concatenated; steps=2 gives just the endpoints.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    g, cfg = _ema_generator_from(checkpoint_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    from PIL import Image

    for k in range(n_pairs):
        z0 = rng.standard_normal(cfg.train.latent_dim).astype(np.float32)
        z1 = rng.standard_normal(cfg.train.latent_dim).astype(np.float32)
        alphas = np.linspace(0.0, 1.0, steps, dtype=np.float32)
        zs = np.stack([(1 - a) * z0 + a * z1 for a in alphas])
        frames = generate(g, zs)
        strip = np.concatenate(_to_uint8(frames).transpose(0, 2, 3, 1), axis=1)
        path = out / f"interp_{k:03d}.png"
        Image.fromarray(strip).save(path, format="PNG")
        paths.append(str(path))
    return paths
