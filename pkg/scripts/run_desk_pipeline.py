"""End-to-end desk-scale run: dataset, training, detection, evaluation.

Produces a self-contained experiment tree under --out and prints the final
report. With default settings this takes a few minutes on a laptop CPU.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from temdet.cli import (ConfigError, cmd_detect, cmd_evaluate,
                        cmd_make_dataset, cmd_train)
from temdet.config import desk_config, load_config


def parse_args(argv):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="experiment root directory")
    ap.add_argument("--config", help="YAML config (default: desk preset)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--epochs", type=int, help="override training epochs")
    ap.add_argument("--limit", type=int,
                    help="cap the number of images run through detect")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    cfg = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    if args.epochs is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
    out = Path(args.out)

    try:
        data_dir = cmd_make_dataset(cfg, out, run_name="dataset")
        train_dir = cmd_train(cfg, data_dir, out, run_name="train")
        detect_dir = cmd_detect(cfg, train_dir / "checkpoint_best.pt",
                                data_dir / "val", out, run_name="detect",
                                limit=args.limit)
        cmd_evaluate(cfg, detect_dir / "predictions.txt",
                     data_dir / "val" / "gt.json", out, run_name="evaluate")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
