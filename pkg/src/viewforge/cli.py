"""Command-line entry point: generate, batch, evaluate, cache."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .backbone import create_backbone
from .core import (
    CONFIG_KEYS,
    PipelineConfig,
    PipelineError,
    Scene,
    ValidationError,
    ViewSpec,
    load_config,
    load_image,
    parse_config_value,
    resize_image,
    seeded_rng,
    validate_config,
)
from .guidance import cache_stats, clear_cache, create_nvs_backend, synthesize_guidance
from .harness import (
    RunPlan,
    load_manifest,
    load_manifest_file,
    run_batch,
    validation_split,
)
from .metrics import (
    FailureRecord,
    MetricReport,
    MetricRow,
    compute_scene_metrics,
    create_embedding_space,
    create_perceptual,
    emit_report,
    NEUTRAL_SOURCE_TEXT,
)
from .core import GenerationResult, config_hash
from .optim import run_schedule, save_state, write_loss_csv
from .prompts import acquire_caption, build_target_prompt
from .sampling import generate as sample_generate
from .sampling import save_generation

CACHE_DIR_ENV = "VIEWFORGE_CACHE_DIR"

# One CLI flag per config key: dots and underscores become dashes.
CONFIG_FLAGS = {key: "--" + key.replace(".", "-").replace("_", "-") for key in CONFIG_KEYS}


def _add_config_flags(sp: argparse.ArgumentParser) -> None:
    group = sp.add_argument_group("config overrides (CLI > config file > defaults)")
    for key, flag in sorted(CONFIG_FLAGS.items()):
        group.add_argument(flag, dest="cfgkey_" + CONFIG_KEYS[key], metavar="V",
                           default=None, help=f"override config key '{key}'")


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", default=None, help="config file (key = value lines)")
    sp.add_argument("--out", default="outputs", help="output directory (default: outputs)")
    sp.add_argument("--cache-dir", default=None,
                    help=f"guidance cache dir (default: ${CACHE_DIR_ENV} or <out>/cache)")
    sp.add_argument("--workers", type=int, default=1, help="parallel scene workers")
    _add_config_flags(sp)


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    overrides = {}
    for key, fieldname in CONFIG_KEYS.items():
        raw = getattr(args, "cfgkey_" + fieldname, None)
        if raw is not None:
            name, value = parse_config_value(key, raw)
            overrides[name] = value
    if overrides:
        cfg = replace(cfg, **overrides)
    return validate_config(cfg)


def resolve_cache_dir(args: argparse.Namespace) -> Path:
    if getattr(args, "cache_dir", None):
        return Path(args.cache_dir)
    env = os.environ.get(CACHE_DIR_ENV)
    if env:
        return Path(env)
    return Path(getattr(args, "out", "outputs")) / "cache"


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    image_path = Path(args.image)
    image = load_image(image_path)
    caption = acquire_caption(image, provided=args.caption, captioner=None)
    scene = Scene(image=resize_image(image, cfg.image_size), caption=caption,
                  scene_id=args.scene_id or image_path.stem)
    view = ViewSpec(args.elevation, args.azimuth)

    backbone = create_backbone(cfg.backbone, cfg)
    nvs = create_nvs_backend(cfg.nvs)
    guidance = synthesize_guidance(scene, view, nvs, resolve_cache_dir(args),
                                   snap=cfg.snap_to_supported_views)
    prompts = build_target_prompt(guidance.realized_view, scene.caption)
    label = f"{scene.scene_id}:{guidance.realized_view.key()}"

    state = run_schedule(backbone, scene, guidance, cfg,
                         seeded_rng(cfg.seed, f"optim:{label}"))
    run_dir = Path(args.out) / scene.scene_id / guidance.realized_view.key()
    save_state(state, run_dir / "state.ckpt")
    write_loss_csv(state, run_dir / "losses.csv")

    result = sample_generate(backbone, state, prompts, scene.image, cfg,
                             seeded_rng(cfg.seed, f"sample:{label}"))
    save_generation(result, run_dir, cfg=cfg, source_text=scene.caption, extra={
        "scene_id": scene.scene_id,
        "requested_view": {"elevation_deg": view.elevation_deg,
                           "azimuth_deg": view.azimuth_deg},
        "guidance_cache_key": guidance.cache_key,
    })
    print(f"wrote {run_dir / 'generated.png'}")
    return 0


def cmd_batch(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.manifest:
        manifest = load_manifest_file(args.manifest, split_seed=cfg.seed,
                                      val_fraction=cfg.val_fraction)
    else:
        manifest = load_manifest(args.dataset, split_seed=cfg.seed,
                                 val_fraction=cfg.val_fraction)
    if args.all:
        ids = manifest.scene_ids()
        if not ids:
            raise ValidationError(f"dataset at '{manifest.root}' has no scenes")
    else:
        ids = validation_split(manifest)
    plan = RunPlan(manifest=manifest, views=tuple(cfg.views), config=cfg,
                   out_dir=Path(args.out), cache_dir=resolve_cache_dir(args),
                   scene_ids=tuple(ids))
    backbone_factory = lambda: create_backbone(cfg.backbone, cfg)
    nvs = create_nvs_backend(cfg.nvs)
    report = run_batch(plan, backbone_factory, nvs, workers=args.workers)
    print(f"{len(report.rows)} runs ok, {len(report.failures)} failed; "
          f"report at {plan.out_dir / 'report.csv'}")
    return 0


def _view_from_key(key: str) -> ViewSpec:
    parts = key.split("_")
    if len(parts) != 2:
        raise ValidationError(f"bad view directory name '{key}' (expected elev_azi)")
    try:
        return ViewSpec(float(parts[0]), float(parts[1]))
    except ValueError:
        raise ValidationError(f"bad view directory name '{key}'") from None


def _find_generations(gen_root: Path, scene_id: str):
    """Returns [(view_key or None, image path, meta path or None)] or None."""
    d = gen_root / scene_id
    if not d.is_dir():
        return None
    found = []
    for sub in sorted(p for p in d.iterdir() if p.is_dir()):
        img = sub / "generated.png"
        if img.is_file():
            meta = sub / "meta.json"
            found.append((sub.name, img, meta if meta.is_file() else None))
    if found:
        return found
    for name in ("generated.png", "input.png", "input.jpg"):
        if (d / name).is_file():
            meta = d / "meta.json"
            return [(None, d / name, meta if meta.is_file() else None)]
    return None


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.inputs)
    gen_root = Path(args.generations)
    if not gen_root.is_dir():
        raise ValidationError(f"generations root not found: {gen_root}")

    pairs = {}
    missing = []
    for entry in manifest.scenes:
        gens = _find_generations(gen_root, entry.scene_id)
        if gens is None:
            missing.append(entry.scene_id)
        else:
            pairs[entry.scene_id] = (entry, gens)
    known = set(manifest.scene_ids())
    extras = sorted(p.name for p in gen_root.iterdir()
                    if p.is_dir() and p.name not in known
                    and _find_generations(gen_root, p.name) is not None)
    if missing or extras:
        raise ValidationError(
            "unpaired scenes: "
            f"missing generations for {missing or 'none'}, "
            f"generations without inputs for {extras or 'none'}")

    space = create_embedding_space(cfg.embedding_model)
    perceptual = create_perceptual(cfg.perceptual_model)
    rows, failures = [], []
    for scene_id, (entry, gens) in sorted(pairs.items()):
        for view_key, img_path, meta_path in gens:
            try:
                meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path else {}
                caption = entry.caption or meta.get("source_text")
                if not caption:
                    raise ValidationError(
                        f"scene '{scene_id}' has no caption.txt and no meta source text")
                view = _view_from_key(view_key) if view_key else ViewSpec(30.0, 30.0)
                target = meta.get("target_prompt") or build_target_prompt(view, caption).target_text
                scene = Scene(image=load_image(entry.image_path), caption=caption,
                              scene_id=scene_id)
                result = GenerationResult(
                    image=load_image(img_path), view=view, target_prompt=target,
                    seed=int(meta.get("seed", 0)), timings={})
                rows.append(MetricRow(scene_id=scene_id,
                                      view_key=view.key(),
                                      values=compute_scene_metrics(scene, result,
                                                                   space, perceptual)))
            except (ValidationError, PipelineError) as exc:
                failures.append(FailureRecord(scene_id=scene_id,
                                              view_key=view_key or "", error=str(exc)))
    if not rows:
        raise PipelineError("no scene could be evaluated: "
                            + "; ".join(f.error for f in failures))
    report = MetricReport.build(rows, failures, metadata={
        "dataset": manifest.root.name,
        "method": "evaluate",
        "embedding_space": space.name,
        "perceptual_model": perceptual.name,
        "neutral_source_text": NEUTRAL_SOURCE_TEXT,
        "config_hash": config_hash(cfg),
    })
    out_dir = Path(args.out)
    json_path, csv_path = emit_report(report, out_dir)
    print(f"evaluated {len(rows)} pairs; report at {csv_path}")
    return 0


def cmd_cache(args: argparse.Namespace) -> int:
    cache_dir = resolve_cache_dir(args)
    if args.action == "info":
        stats = cache_stats(cache_dir)
        print(json.dumps({"cache_dir": str(cache_dir), "backends": stats}, indent=2))
    else:
        removed = clear_cache(cache_dir)
        print(f"removed {removed} cached files from {cache_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewforge",
        description="Camera-controlled novel view synthesis from a single image.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="one scene at one target view")
    g.add_argument("image", help="input image path")
    g.add_argument("--caption", default=None, help="text description of the image")
    g.add_argument("--elevation", type=float, required=True, help="target elevation, degrees")
    g.add_argument("--azimuth", type=float, required=True, help="target azimuth, degrees")
    g.add_argument("--scene-id", default=None, help="output subdirectory name")
    _add_common(g)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("batch", help="dataset run across scenes x views")
    b.add_argument("dataset", help="dataset root (<scene_id>/input.png layout)")
    b.add_argument("--manifest", default=None,
                   help="tab-separated manifest file overriding discovery")
    b.add_argument("--all", action="store_true",
                   help="run every scene instead of the validation split")
    _add_common(b)
    b.set_defaults(func=cmd_batch)

    e = sub.add_parser("evaluate", help="metrics over existing generations")
    e.add_argument("--inputs", required=True, help="dataset root of input scenes")
    e.add_argument("--generations", required=True, help="root of generated outputs")
    _add_common(e)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("cache", help="guidance cache management")
    c.add_argument("action", choices=("info", "clear"))
    _add_common(c)
    c.set_defaults(func=cmd_cache)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # unexpected failure still honors the exit contract
        print(f"pipeline error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
