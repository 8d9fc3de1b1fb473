"""Overfit sanity run: memorize a handful of scenes, then detect on them.

A healthy pipeline drives the training loss well below half its starting
value and recovers the object in most of its own training images. Useful
after any change to the loss, the assignment, or the heads.
"""

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from temdet.augment import AugmentConfig
from temdet.boxes import iou
from temdet.config import desk_config
from temdet.inference import build_template_bank, detect, precompute
from temdet.meshes import make_cuboid
from temdet.model import load_checkpoint
from temdet.rendering import FlatRasterizer
from temdet.scenes import generate_scene
from temdet.training import train


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--iters", type=int, default=1200)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)

    cfg = desk_config()
    cfg = dataclasses.replace(
        cfg,
        train=dataclasses.replace(cfg.train, batch_size=4, epochs=1,
                                  iters_per_epoch=args.iters, seed=args.seed,
                                  val_batches=1),
        data=dataclasses.replace(cfg.data, objects=("box",),
                                 tabletop_ratio=1.0,
                                 augment=AugmentConfig.none()),
    )
    models = {"box": make_cuboid("box", (0.06, 0.09, 0.05))}
    rng = np.random.default_rng(123)
    scenes = [generate_scene(list(models.values()), rng, "tabletop",
                             cfg.data.scene) for _ in range(args.scenes)]

    t0 = time.time()
    summary = train(cfg, models, {"tabletop": scenes, "composite": []},
                    scenes[:2], Path(args.out))
    rows = [json.loads(line) for line in
            Path(summary["metrics"]).read_text().splitlines()]
    totals = [r["total"] for r in rows if r["kind"] == "train"]
    print(f"loss {totals[0]:.1f} -> {np.mean(totals[-20:]):.2f} "
          f"over {len(totals)} iters ({time.time() - t0:.0f}s)")

    model, _ = load_checkpoint(summary["last_checkpoint"])
    bank = build_template_bank(FlatRasterizer(), models["box"],
                               n_inplane=cfg.infer.n_inplane,
                               rng=np.random.default_rng([args.seed, 17]))
    bank = precompute(bank, model, cfg.infer.template_batch)
    hits = 0
    for i, scene in enumerate(scenes):
        dets = detect(scene.image, bank, model, cfg.infer)
        top = dets[0] if dets else None
        overlap = iou(top.bbox, scene.objects[0].bbox) if top else 0.0
        hits += overlap > 0.5
        print(f"scene {i:2d}: top score "
              f"{top.score if top else 0.0:.3f}  iou {overlap:.2f}")
    print(f"hit rate {hits}/{len(scenes)}")
    return 0 if hits >= 0.8 * len(scenes) else 1


if __name__ == "__main__":
    raise SystemExit(main())
