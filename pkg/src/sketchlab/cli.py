"""Command-line entry point for every experiment and the retrieval service."""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .runner import export_metrics, run

COMMANDS = ["gen-data", "train-embed", "train-otf", "train-subset",
            "train-semisup", "pretrain-ssl", "linear-eval", "fscil", "oracle",
            "augment", "eval", "serve", "export"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketchlab",
        description="Sketch-based fine-grained retrieval laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML/JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", default=None)
        p.add_argument("--dry-run", action="store_true",
                       help="validate the config without training")

    for name in ("gen-data", "train-embed", "train-otf", "train-subset",
                 "eval"):
        common(sub.add_parser(name))

    p = sub.add_parser("train-semisup")
    common(p)
    p.add_argument("--labelled-frac", type=float, default=None)

    p = sub.add_parser("pretrain-ssl")
    common(p)
    p.add_argument("--task", choices=["vectorization", "rasterization"],
                   default=None)

    p = sub.add_parser("linear-eval")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--frac", type=float, default=None)

    p = sub.add_parser("fscil")
    common(p)
    p.add_argument("--shots", type=int, choices=[1, 5], default=None)
    p.add_argument("--ways", type=int, choices=[5, 10], default=None)
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("oracle")
    common(p)
    p.add_argument("--max-k", type=int, default=None)

    p = sub.add_parser("augment")
    common(p)
    p.add_argument("--n", type=int, default=None)

    p = sub.add_parser("serve")
    p.add_argument("--config", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--model-dir", default=None)

    p = sub.add_parser("export")
    p.add_argument("run_dir")
    return parser


_FLAG_TO_KEY = {
    "labelled_frac": "labelled_frac", "task": "task", "checkpoint": "checkpoint",
    "frac": "frac", "shots": "shots", "ways": "ways", "episodes": "episodes",
    "max_k": "max_k", "n": "n", "seed": "seed", "output_dir": "output_dir",
    "port": "port", "model_dir": "model_dir",
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        if command == "export":
            csv_path, json_path = export_metrics(args.run_dir)
            print(f"exported {csv_path} and {json_path}")
            return 0
        overrides = {}
        for flag, key in _FLAG_TO_KEY.items():
            value = getattr(args, flag, None)
            if value is not None:
                overrides[key] = value
        cfg = load_config(command, args.config, overrides)
        if command == "serve":
            from .service import serve_forever
            serve_forever(cfg["model_dir"], port=cfg["port"], topk=cfg["topk"],
                          rdp_epsilon=cfg["rdp_epsilon"])
            return 0
        out = run(command, cfg, dry_run=getattr(args, "dry_run", False))
        print(f"run directory: {out}")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
