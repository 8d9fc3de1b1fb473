"""Ablation sweeps against a trained checkpoint.

Two sweeps are available: template-count (inference wall clock and retained
detections as the local template stack shrinks or grows) and perturbation
(validation loss as the training-time template orientation jitter varies).
"""

import argparse
import sys
from pathlib import Path

from temdet.cli import ConfigError, cmd_ablate
from temdet.config import desk_config, load_config


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--dataset", required=True,
                    help="dataset root holding train/ and val/ splits")
    ap.add_argument("--config", help="YAML config (default: desk preset)")
    ap.add_argument("--sweep", choices=("templates", "perturbation", "all"),
                    default="templates")
    ap.add_argument("--limit", type=int,
                    help="cap images per measurement for a quick pass")
    args = ap.parse_args(argv)

    cfg = load_config(args.config) if args.config else desk_config()
    try:
        run_dir = cmd_ablate(cfg, args.checkpoint, Path(args.dataset),
                             Path(args.out), sweep=args.sweep,
                             limit=args.limit)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    print((run_dir / "ablation.txt").read_text())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
