"""Dataset ingestion, deterministic validation splitting, and batch
orchestration across scenes x views with per-scene crash isolation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .core import (
    PipelineConfig,
    PipelineError,
    Scene,
    ValidationError,
    ViewSpec,
    config_hash,
    load_image,
    resize_image,
    seeded_rng,
    validate_config,
)
from .guidance import NvsBackend, synthesize_guidance
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
from .optim import run_schedule, save_state, write_loss_csv
from .prompts import acquire_caption, build_target_prompt
from .sampling import generate, save_generation


class MissingImageError(ValidationError):
    pass


class DuplicateSceneError(ValidationError):
    pass


class EmptyManifestError(ValidationError):
    pass


class AllScenesFailedError(PipelineError):
    pass


@dataclass(frozen=True)
class SceneEntry:
    scene_id: str
    image_path: Path
    caption: str | None  # None means: acquire via captioner at run time


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    scenes: tuple
    split_seed: int = 0
    val_fraction: float = 0.10

    def scene_ids(self) -> list:
        return [s.scene_id for s in self.scenes]

    def entry(self, scene_id: str) -> SceneEntry:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise ValidationError(f"unknown scene_id '{scene_id}'")


_IMAGE_NAMES = ("input.png", "input.jpg")


def _read_caption_file(path: Path) -> str | None:
    if not path.is_file():
        return None
    text = path.read_text(encoding="utf-8").strip()
    return text or None


def load_manifest(root, split_seed: int = 0, val_fraction: float = 0.10) -> DatasetManifest:
    """Discover `<root>/<scene_id>/input.(png|jpg)` plus optional caption.txt.
    Scenes come back sorted by scene_id."""
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset root not found: {root}")
    entries = []
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        image_path = None
        for name in _IMAGE_NAMES:
            if (child / name).is_file():
                image_path = child / name
                break
        if image_path is None:
            raise MissingImageError(
                f"scene dir '{child}' has no input.png or input.jpg")
        entries.append(SceneEntry(
            scene_id=child.name,
            image_path=image_path,
            caption=_read_caption_file(child / "caption.txt"),
        ))
    return DatasetManifest(root=root, scenes=tuple(entries),
                           split_seed=split_seed, val_fraction=val_fraction)


def load_manifest_file(path, split_seed: int = 0, val_fraction: float = 0.10) -> DatasetManifest:
    """Manifest override: tab-separated `scene_id<TAB>image_path<TAB>caption`
    lines; relative image paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest file not found: {path}")
    entries = []
    seen = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(
                f"{path}:{lineno}: expected scene_id<TAB>image_path<TAB>caption")
        scene_id, img, caption = (p.strip() for p in parts)
        if not scene_id:
            raise ValidationError(f"{path}:{lineno}: empty scene_id")
        if scene_id in seen:
            raise DuplicateSceneError(f"duplicate scene_id '{scene_id}' in {path}")
        seen.add(scene_id)
        image_path = Path(img)
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        if not image_path.is_file():
            raise MissingImageError(f"{path}:{lineno}: image not found: {image_path}")
        entries.append(SceneEntry(scene_id=scene_id, image_path=image_path,
                                  caption=caption or None))
    entries.sort(key=lambda s: s.scene_id)
    return DatasetManifest(root=path.parent, scenes=tuple(entries),
                           split_seed=split_seed, val_fraction=val_fraction)


def validation_split(manifest: DatasetManifest, fraction: float | None = None,
                     seed: int | None = None) -> list:
    """Deterministic pseudo-random subset of ceil(fraction * N) scene ids,
    returned sorted. The complement (the ids not returned) is the train set."""
    fraction = manifest.val_fraction if fraction is None else fraction
    seed = manifest.split_seed if seed is None else seed
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"split fraction must be in (0, 1], got {fraction}")
    ids = sorted(manifest.scene_ids())
    if not ids:
        raise EmptyManifestError(f"dataset at '{manifest.root}' has no scenes")
    n = math.ceil(fraction * len(ids))
    perm = seeded_rng(seed, "validation-split").permutation(len(ids))
    return sorted(ids[i] for i in perm[:n])


@dataclass(frozen=True)
class RunPlan:
    manifest: DatasetManifest
    views: tuple
    config: PipelineConfig
    out_dir: Path
    cache_dir: Path | None = None
    scene_ids: tuple | None = None  # None = every scene in the manifest
    method: str = "viewforge"

    def __post_init__(self):
        views = tuple(self.views)
        if not views or not all(isinstance(v, ViewSpec) for v in views):
            raise ValidationError("plan views must be a non-empty ViewSpec list")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        validate_config(self.config)

    def effective_cache_dir(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else self.out_dir / "cache"


def _load_scene(entry: SceneEntry, cfg: PipelineConfig, captioner) -> Scene:
    image = load_image(entry.image_path)
    caption = acquire_caption(image, provided=entry.caption, captioner=captioner)
    return Scene(image=resize_image(image, cfg.image_size), caption=caption,
                 scene_id=entry.scene_id)


def run_scene_view(entry: SceneEntry, view: ViewSpec, cfg: PipelineConfig,
                   backbone_factory, nvs_backend: NvsBackend, out_dir: Path,
                   cache_dir: Path, space, perceptual, captioner=None) -> MetricRow:
    """One (scene, view) unit of work: guidance -> optimization -> sampling ->
    metrics, with all artifacts written under out_dir/scene_id/view_key/."""
    scene = _load_scene(entry, cfg, captioner)
    guidance = synthesize_guidance(scene, view, nvs_backend, cache_dir,
                                   snap=cfg.snap_to_supported_views)
    prompts = build_target_prompt(guidance.realized_view, scene.caption)
    label = f"{scene.scene_id}:{guidance.realized_view.key()}"

    backbone = backbone_factory()
    state = run_schedule(backbone, scene, guidance, cfg,
                         seeded_rng(cfg.seed, f"optim:{label}"))

    run_dir = out_dir / scene.scene_id / guidance.realized_view.key()
    save_state(state, run_dir / "state.ckpt")
    write_loss_csv(state, run_dir / "losses.csv")

    result = generate(backbone, state, prompts, scene.image, cfg,
                      seeded_rng(cfg.seed, f"sample:{label}"))
    save_generation(result, run_dir, cfg=cfg, source_text=scene.caption, extra={
        "scene_id": scene.scene_id,
        "requested_view": {"elevation_deg": view.elevation_deg,
                           "azimuth_deg": view.azimuth_deg},
        "guidance_cache_key": guidance.cache_key,
    })
    values = compute_scene_metrics(scene, result, space, perceptual)
    return MetricRow(scene_id=scene.scene_id, view_key=guidance.realized_view.key(),
                     values=values)


def run_batch(plan: RunPlan, backbone_factory, nvs_backend: NvsBackend,
              workers: int = 1, captioner=None) -> MetricReport:
    """Run every (scene, view) pair; single failures are recorded, not fatal.
    Seeds derive from (config seed, scene, view), so the report is identical
    for any worker count."""
    cfg = validate_config(plan.config)
    ids = list(plan.scene_ids) if plan.scene_ids is not None else plan.manifest.scene_ids()
    if not ids:
        raise EmptyManifestError(f"no scenes selected from '{plan.manifest.root}'")
    entries = [plan.manifest.entry(sid) for sid in sorted(ids)]
    items = [(entry, view) for entry in entries for view in plan.views]
    space = create_embedding_space(cfg.embedding_model)
    perceptual = create_perceptual(cfg.perceptual_model)
    cache_dir = plan.effective_cache_dir()

    rows: list = []
    failures: list = []

    def work(item):
        entry, view = item
        return run_scene_view(entry, view, cfg, backbone_factory, nvs_backend,
                              plan.out_dir, cache_dir, space, perceptual,
                              captioner=captioner)

    if workers <= 1:
        outcomes = [(item, _safe(work, item)) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            results = list(pool.map(lambda it: _safe(work, it), items))
        outcomes = list(zip(items, results))

    for (entry, view), (row, err) in outcomes:
        if row is not None:
            rows.append(row)
        else:
            failures.append(FailureRecord(scene_id=entry.scene_id,
                                          view_key=view.key(), error=err))
    if not rows:
        detail = "; ".join(f"{f.scene_id}@{f.view_key}: {f.error}" for f in failures)
        raise AllScenesFailedError(f"every scene failed: {detail}")

    report = MetricReport.build(rows, failures, metadata={
        "dataset": plan.manifest.root.name,
        "method": plan.method,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "embedding_space": space.name,
        "perceptual_model": perceptual.name,
        "neutral_source_text": NEUTRAL_SOURCE_TEXT,
        "views": [v.key() for v in plan.views],
        "scene_ids": sorted(ids),
    })
    plan.out_dir.mkdir(parents=True, exist_ok=True)
    emit_report(report, plan.out_dir)
    return report


def _safe(fn, item):
    try:
        return fn(item), None
    except Exception as exc:
        return None, f"{type(exc).__name__}: {exc}"
