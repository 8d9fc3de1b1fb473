"""Command-line pipeline: datasets, training, detection, evaluation, sweeps.

Each command resolves one :class:`RunConfig`, then works inside a run
directory named ``<timestamp>-<confighash>`` where it stores the resolved
config and seed before producing artifacts, so every output can be traced to
the exact settings behind it. Exit codes: 0 success, 1 configuration error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np

from temdet.boxes import read_detections, write_detections
from temdet.config import (
    RunConfig,
    config_hash,
    desk_config,
    full_config,
    load_config,
    save_config,
)
from temdet.evaluation import (
    bbox2d_metric,
    map_protocol,
    per_object_report,
    pooled_nms,
    precision_recall_points,
    read_gt_manifest,
    records_from_predictions,
    write_gt_manifest,
    write_report,
)
from temdet.inference import build_template_bank, detect, precompute
from temdet.meshes import ObjectModel, make_cuboid, make_cylinder, make_sphere
from temdet.model import load_checkpoint
from temdet.rendering import FlatRasterizer, make_framed_template, save_template
from temdet.scenes import (
    generate_scene,
    load_scene,
    read_manifest,
    save_scene,
    write_manifest,
)
from temdet.training import train
from temdet.viewsphere import global_template_poses, local_template_poses_test


class ConfigError(Exception):
    """Bad settings or unresolvable paths; maps to exit code 1."""


MODEL_BUILDERS = {
    "box": lambda: make_cuboid("box", (0.06, 0.09, 0.05)),
    "cylinder": lambda: make_cylinder("cylinder", 0.035, 0.11),
    "sphere": lambda: make_sphere("sphere", 0.04),
}

TEMPLATE_COUNT_SWEEP = (80, 160, 320)
PERTURBATION_SWEEP = (0.0, 10.0, 20.0, 30.0, 40.0, 180.0)


def default_models(names) -> dict[str, ObjectModel]:
    models = {}
    for name in names:
        if name not in MODEL_BUILDERS:
            raise ConfigError(
                f"unknown object {name!r}; available: {sorted(MODEL_BUILDERS)}")
        models[name] = MODEL_BUILDERS[name]()
    return models


def resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = load_config(path)
        except Exception as err:
            raise ConfigError(f"could not parse {path}: {err}") from err
    else:
        cfg = desk_config() if args.preset == "desk" else full_config()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def make_run_dir(root, cfg: RunConfig, run_name: str | None = None) -> Path:
    root = Path(root)
    name = run_name or (
        f"{datetime.now().strftime('%Y%m%d-%H%M%S')}-{config_hash(cfg)}")
    run_dir = root / name
    counter = 1
    while run_dir.exists() and run_name is None:
        run_dir = root / f"{name}.{counter}"
        counter += 1
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def log_run(run_dir: Path, cfg: RunConfig, command: str, log=print) -> None:
    save_config(cfg, run_dir / "config.yaml")
    (run_dir / "run.json").write_text(json.dumps({
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.train.seed,
        "started": datetime.now().isoformat(timespec="seconds"),
    }, indent=1))
    log(f"[temdet] {command}: seed={cfg.train.seed} "
        f"config={config_hash(cfg)} dir={run_dir}")


def load_split(split_dir) -> list[tuple[str, object]]:
    split_dir = Path(split_dir)
    if not split_dir.exists():
        raise ConfigError(f"dataset split not found: {split_dir}")
    return [(name, load_scene(split_dir / name))
            for name in read_manifest(split_dir)]


def split_styles(named_scenes) -> dict[str, list]:
    styles: dict[str, list] = {"tabletop": [], "composite": []}
    for _, scene in named_scenes:
        styles[scene.style].append(scene)
    return styles


def scenes_gt(named_scenes) -> dict[str, dict[str, list]]:
    return {
        name: {obj.object_id: [obj.bbox] for obj in scene.objects}
        for name, scene in named_scenes
    }


def cmd_make_dataset(cfg: RunConfig, out_root, run_name=None, log=print) -> Path:
    models = default_models(cfg.data.objects)
    run_dir = make_run_dir(out_root, cfg, run_name)
    log_run(run_dir, cfg, "make-dataset", log)
    rng = np.random.default_rng([cfg.train.seed, 2])
    mlist = list(models.values())
    for split, count in (("train", cfg.data.n_train_scenes),
                         ("val", cfg.data.n_val_scenes)):
        styles = ["tabletop" if rng.uniform() < cfg.data.tabletop_ratio
                  else "composite" for _ in range(count)]
        if split == "train" and count >= 2:
            # the batch sampler needs every style it draws from, so a small
            # split must not lose one to binomial luck
            if cfg.data.tabletop_ratio > 0.0 and "tabletop" not in styles:
                styles[0] = "tabletop"
            if cfg.data.tabletop_ratio < 1.0 and "composite" not in styles:
                styles[-1] = "composite"
        split_dir = run_dir / split
        names = []
        for i in range(count):
            subset_mask = rng.uniform(size=len(mlist)) < 0.7
            subset = [m for m, keep in zip(mlist, subset_mask) if keep]
            if not subset:
                subset = [mlist[int(rng.integers(len(mlist)))]]
            scene = generate_scene(subset, rng, styles[i], cfg.data.scene)
            name = f"scene_{i:05d}"
            save_scene(scene, split_dir / name)
            names.append(name)
        write_manifest(split_dir, names)
        write_gt_manifest(split_dir / "gt.json",
                          scenes_gt(load_split(split_dir)))
        log(f"[temdet] {split}: {count} scenes")
    return run_dir


def cmd_train(cfg: RunConfig, dataset_dir, out_root, run_name=None,
              resume=None, max_iters=None, log=print) -> Path:
    dataset_dir = Path(dataset_dir)
    train_split = load_split(dataset_dir / "train")
    val_split = load_split(dataset_dir / "val")
    styles = split_styles(train_split)
    for style, prob in (("tabletop", cfg.data.tabletop_ratio),
                        ("composite", 1.0 - cfg.data.tabletop_ratio)):
        if prob > 0.0 and not styles[style]:
            raise ConfigError(
                f"training needs {style!r} scenes at ratio {prob:g} "
                f"but {dataset_dir} has none")
    if resume is not None and not Path(resume).exists():
        raise ConfigError(f"resume checkpoint not found: {resume}")
    models = default_models(cfg.data.objects)
    run_dir = make_run_dir(out_root, cfg, run_name)
    log_run(run_dir, cfg, "train", log)
    summary = train(cfg, models, styles, [s for _, s in val_split], run_dir,
                    max_iters=max_iters, resume_from=resume, log=log)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    log(f"[temdet] best validation loss {summary['best_val']:.4f} "
        f"after {summary['iterations']} iterations")
    return run_dir


def cmd_render_templates(cfg: RunConfig, object_id: str, out_root,
                         run_name=None, log=print) -> Path:
    models = default_models(cfg.data.objects)
    if object_id not in models:
        raise ConfigError(f"object {object_id!r} not in {sorted(models)}")
    run_dir = make_run_dir(out_root, cfg, run_name)
    log_run(run_dir, cfg, "render-templates", log)
    renderer = FlatRasterizer()
    model = models[object_id]
    counts = {}
    for kind, poses in (("global", global_template_poses()),
                        ("local", local_template_poses_test(cfg.infer.n_inplane))):
        kind_dir = run_dir / kind
        kind_dir.mkdir(exist_ok=True)
        for i, pose in enumerate(poses):
            template = make_framed_template(renderer, model, pose.rotation)
            save_template(template, kind_dir / f"template_{i:03d}.png")
        counts[kind] = len(poses)
    (run_dir / "index.json").write_text(json.dumps({
        "object_id": object_id, "counts": counts,
        "config_hash": config_hash(cfg),
    }, indent=1))
    log(f"[temdet] rendered {counts['global']} global + "
        f"{counts['local']} local templates for {object_id}")
    return run_dir


def cmd_detect(cfg: RunConfig, checkpoint, dataset_split, out_root,
               run_name=None, objects=None, limit=None, log=print) -> Path:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    named = load_split(dataset_split)
    if limit is not None:
        named = named[:limit]
    models = default_models(objects or cfg.data.objects)
    run_dir = make_run_dir(out_root, cfg, run_name)
    log_run(run_dir, cfg, "detect", log)

    model, _ = load_checkpoint(checkpoint)
    renderer = FlatRasterizer()
    rng = np.random.default_rng([cfg.train.seed, 17])
    records = []
    for object_id, model3d in models.items():
        bank = build_template_bank(renderer, model3d,
                                   n_inplane=cfg.infer.n_inplane, rng=rng)
        bank = precompute(bank, model, cfg.infer.template_batch)
        for name, scene in named:
            for det in detect(scene.image, bank, model, cfg.infer):
                records.append((name, det))
    out_file = run_dir / "predictions.txt"
    write_detections(out_file, records)
    log(f"[temdet] {len(records)} detections over {len(named)} images "
        f"-> {out_file}")
    return run_dir


def cmd_evaluate(cfg: RunConfig, predictions_path, gt_path, out_root,
                 run_name=None, log=print) -> Path:
    for path in (predictions_path, gt_path):
        if not Path(path).exists():
            raise ConfigError(f"input not found: {path}")
    preds = read_detections(predictions_path)
    gt = read_gt_manifest(gt_path)
    run_dir = make_run_dir(out_root, cfg, run_name)
    log_run(run_dir, cfg, "evaluate", log)

    evaluable = sorted({oid for objs in gt.values()
                        for oid, boxes in objs.items() if boxes})
    if not evaluable:
        raise ConfigError(f"ground truth {gt_path} has no boxes")
    result = map_protocol(preds, gt, evaluable,
                          known_objects=cfg.data.objects,
                          nms_iou=cfg.infer.nms_iou)
    bbox2d = {
        oid: bbox2d_metric(records_from_predictions(preds, gt, oid))
        for oid in evaluable
    }
    surviving = pooled_nms(preds, cfg.infer.nms_iou)
    curves = {}
    for oid in evaluable:
        preds_o = [(img, d) for img, d in surviving if d.object_id == oid]
        gts_o = {img: objs.get(oid, []) for img, objs in gt.items()}
        curves[oid] = precision_recall_points(preds_o, gts_o)
    tables = [per_object_report(result.per_object, metric="AP"),
              per_object_report(bbox2d, metric="bbox2d")]
    write_report(run_dir, tables, curves)
    log((run_dir / "report.txt").read_text())
    return run_dir


def _sweep_templates(cfg, model, named, gt, renderer, log):
    models3d = default_models(cfg.data.objects)
    evaluable = sorted({oid for objs in gt.values()
                       for oid, boxes in objs.items() if boxes})
    rows = []
    for count in TEMPLATE_COUNT_SWEEP:
        n_inplane = count // 16
        infer_cfg = dataclasses.replace(cfg.infer, n_inplane=n_inplane)
        rng = np.random.default_rng([cfg.train.seed, 17])
        banks = {
            oid: precompute(build_template_bank(renderer, m3d,
                                                n_inplane=n_inplane, rng=rng),
                            model, infer_cfg.template_batch)
            for oid, m3d in models3d.items()
        }
        start = time.monotonic()
        records = []
        for oid, bank in banks.items():
            for name, scene in named:
                records.extend((name, det) for det
                               in detect(scene.image, bank, model, infer_cfg))
        elapsed = time.monotonic() - start
        result = map_protocol(records, gt, evaluable,
                              known_objects=cfg.data.objects,
                              nms_iou=infer_cfg.nms_iou)
        rows.append({"sweep": "templates", "value": count,
                     "map": result.mean, "seconds": round(elapsed, 3)})
        log(f"[temdet] {count} templates: mAP {result.mean:.2f} "
            f"in {elapsed:.2f}s")
    baseline = next(r["map"] for r in rows if r["value"] == 160)
    for row in rows:
        row["delta"] = round(row["map"] - baseline, 4)
    return rows


def _sweep_perturbation(cfg, models, dataset_dir, run_dir, log):
    train_split = load_split(Path(dataset_dir) / "train")
    val_split = load_split(Path(dataset_dir) / "val")
    styles = split_styles(train_split)
    rows = []
    for angle in PERTURBATION_SWEEP:
        cfg_a = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, perturb_deg=angle))
        start = time.monotonic()
        summary = train(cfg_a, models, styles, [s for _, s in val_split],
                        run_dir / f"perturb_{int(angle):03d}")
        elapsed = time.monotonic() - start
        rows.append({"sweep": "perturbation", "value": angle,
                     "val_loss": round(summary["best_val"], 6),
                     "seconds": round(elapsed, 3)})
        log(f"[temdet] +-{angle:g} deg: val loss {summary['best_val']:.4f} "
            f"in {elapsed:.2f}s")
    baseline = next(r["val_loss"] for r in rows if r["value"] == 20.0)
    for row in rows:
        row["delta"] = round(row["val_loss"] - baseline, 6)
    return rows


def _ablation_table(rows) -> str:
    header = f"{'sweep':<14}{'value':>8}{'metric':>12}{'delta':>10}{'seconds':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        metric = r.get("map", r.get("val_loss"))
        lines.append(f"{r['sweep']:<14}{r['value']:>8g}{metric:>12.4f}"
                     f"{r['delta']:>10.4f}{r['seconds']:>10.3f}")
    return "\n".join(lines)


def cmd_ablate(cfg: RunConfig, checkpoint, dataset_dir, out_root,
               run_name=None, sweep="templates", limit=None, log=print) -> Path:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    dataset_dir = Path(dataset_dir)
    run_dir = make_run_dir(out_root, cfg, run_name)
    log_run(run_dir, cfg, "ablate", log)

    rows = []
    if sweep in ("templates", "all"):
        model, _ = load_checkpoint(checkpoint)
        named = load_split(dataset_dir / "val")
        if limit is not None:
            named = named[:limit]
        gt = read_gt_manifest(dataset_dir / "val" / "gt.json")
        gt = {name: gt[name] for name, _ in named}
        rows += _sweep_templates(cfg, model, named, gt, FlatRasterizer(), log)
    if sweep in ("perturbation", "all"):
        rows += _sweep_perturbation(cfg, default_models(cfg.data.objects),
                                    dataset_dir, run_dir, log)
    (run_dir / "ablation.json").write_text(json.dumps(rows, indent=1))
    (run_dir / "ablation.txt").write_text(_ablation_table(rows) + "\n")
    log(_ablation_table(rows))
    return run_dir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="temdet",
        description="Template-based unseen-instance detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--preset", choices=("desk", "full"), default="desk",
                       help="built-in config when --config is absent")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", required=True, help="root for the run directory")
        p.add_argument("--run-name", help="fixed run directory name "
                                          "(default: timestamp + config hash)")

    p = sub.add_parser("make-dataset", help="generate labeled synthetic scenes")
    common(p)

    p = sub.add_parser("train", help="run the optimization schedule")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-iters", type=int, help="stop after this many iterations")

    p = sub.add_parser("detect", help="detect objects over a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, help="dataset split directory")
    p.add_argument("--objects", nargs="+", help="object ids (default: config)")
    p.add_argument("--limit", type=int, help="only the first N images")

    p = sub.add_parser("evaluate", help="score a prediction file")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--gt", required=True, help="ground-truth manifest JSON")

    p = sub.add_parser("render-templates", help="write a template bank to disk")
    common(p)
    p.add_argument("--object", required=True, dest="object_id")

    p = sub.add_parser("ablate", help="template-count and perturbation sweeps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset run directory")
    p.add_argument("--sweep", choices=("templates", "perturbation", "all"),
                   default="templates")
    p.add_argument("--limit", type=int, help="only the first N val images")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return 0 if exit_.code in (0, None) else 1
    try:
        cfg = resolve_config(args)
        if args.command == "make-dataset":
            cmd_make_dataset(cfg, args.out, args.run_name)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, args.out, args.run_name,
                      resume=args.resume, max_iters=args.max_iters)
        elif args.command == "detect":
            cmd_detect(cfg, args.checkpoint, args.split, args.out,
                       args.run_name, objects=args.objects, limit=args.limit)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.predictions, args.gt, args.out,
                         args.run_name)
        elif args.command == "render-templates":
            cmd_render_templates(cfg, args.object_id, args.out, args.run_name)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.checkpoint, args.dataset, args.out,
                       args.run_name, sweep=args.sweep, limit=args.limit)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure, exit code 2
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
