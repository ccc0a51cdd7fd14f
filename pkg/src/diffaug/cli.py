"""Command line entry points: run, sweep, interpolate, serve.

The CLI is a thin shell over :mod:`diffaug.runner`; the `serve` subcommand
starts the FastAPI service that wraps the same runner for long-running and
multi-client use.

Exit codes: 0 success, 2 configuration/usage error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, apply_overrides, default_config_text, from_file


def _add_config_args(p):
    p.add_argument("--config", required=True, help="path to a key = value config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def _load_config(args):
    cfg = from_file(args.config)
    apply_overrides(cfg, args.override)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    from .runner import run_experiment

    cfg = _load_config(args)
    result = run_experiment(cfg)
    print(f"best proxy-FID {result.best_proxy_fid:.6g} at step {result.best_step} "
          f"(outputs in {result.out_dir})")
    if result.halted:
        print("training diverged; diagnostics written to diverged.txt", file=sys.stderr)
        return 3
    return 0


def cmd_sweep(args) -> int:
    from .runner import run_sweep

    cfg = _load_config(args)
    result = run_sweep(cfg)
    for row in result.rows:
        print(f"{row['axis_value']:g}: best proxy-FID {row['best_proxy_fid']:.6g} "
              f"at step {row['best_step']}")
    print(f"consolidated results in {result.csv_path}")
    return 0


def cmd_interpolate(args) -> int:
    from .runner import interpolate

    paths = interpolate(args.checkpoint, args.pairs, args.steps, args.seed, args.out)
    for p in paths:
        print(p)
    return 0


def cmd_config_template(args) -> int:
    print(default_config_text(), end="")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    app = create_app(workspace=args.workspace)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffaug",
                                     description="GAN training with differentiable augmentations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one experiment from a config file")
    _add_config_args(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="one run per sweep_values entry, shared seed")
    _add_config_args(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("interpolate", help="latent interpolation strips from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("config-template", help="print a default config file")
    p.set_defaults(fn=cmd_config_template)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--workspace", default="runs/service")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
