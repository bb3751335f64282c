"""Coarse guidance-view synthesis: pluggable NVS backends, view snapping, and
a content-addressed disk cache of backend outputs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import BackendUnavailableError
from .core import (
    PipelineError,
    ValidationError,
    Scene,
    ViewSpec,
    atomic_write_bytes,
    atomic_write_text,
    image_content_hash,
    image_png_bytes,
    load_image,
    quantize_u8,
    u8_to_float,
)


class UnsupportedViewError(ValidationError):
    pass


class BackendError(PipelineError):
    """The NVS backend failed; wraps the backend's own diagnostic."""


@dataclass(frozen=True)
class NvsBackend:
    """A novel-view synthesizer: fixed supported views plus a synthesize fn."""

    name: str
    version: str
    supported_views: tuple
    synthesize: object  # callable (image, ViewSpec) -> HxWx3 raster in [0,1]

    def __post_init__(self):
        views = tuple(self.supported_views)
        if not views:
            raise ValidationError("backend must support at least one view")
        if len({v.key() for v in views}) != len(views):
            raise ValidationError("backend supported_views contains duplicates")
        object.__setattr__(self, "supported_views", views)


@dataclass(frozen=True)
class GuidanceImage:
    image: np.ndarray
    requested_view: ViewSpec
    realized_view: ViewSpec
    backend_name: str
    cache_key: str


def default_supported_views() -> list:
    """The six fixed views of the default backend: alternating +30/-20
    elevation at 60-degree azimuth spacing starting from 30."""
    return [
        ViewSpec(30.0, 30.0),
        ViewSpec(-20.0, 90.0),
        ViewSpec(30.0, 150.0),
        ViewSpec(-20.0, 210.0),
        ViewSpec(30.0, 270.0),
        ViewSpec(-20.0, 330.0),
    ]


def view_distance(a: ViewSpec, b: ViewSpec) -> float:
    delev = a.elevation_deg - b.elevation_deg
    dazi = abs(a.azimuth_deg - b.azimuth_deg)
    dazi = min(dazi, 360.0 - dazi)
    return math.sqrt(delev * delev + dazi * dazi)


def snap_view(requested: ViewSpec, supported) -> ViewSpec:
    """Nearest supported view by angular distance; ties keep the earliest
    entry (strict < scan order)."""
    supported = list(supported)
    if not supported:
        raise ValidationError("supported view list is empty")
    best = supported[0]
    best_d = view_distance(requested, best)
    for cand in supported[1:]:
        d = view_distance(requested, cand)
        if d < best_d:
            best, best_d = cand, d
    return best


def _mock_synthesize(image: np.ndarray, view: ViewSpec) -> np.ndarray:
    """Cheap deterministic stand-in for a pretrained NVS model: azimuth rolls
    the frame horizontally, elevation rolls vertically and retones."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    dx = int(round(view.azimuth_deg / 360.0 * w)) % w
    dy = int(round((view.elevation_deg + 90.0) / 180.0 * (h // 4)))
    out = np.roll(img, (-dy, -dx), axis=(0, 1))
    if view.elevation_deg < 0:
        out = out[::-1, :, :]
    gain = 0.8 + 0.2 * (view.azimuth_deg / 360.0)
    lift = 0.05 * (view.elevation_deg + 90.0) / 180.0
    return np.clip(out * gain + lift, 0.0, 1.0)


def create_mock_nvs_backend() -> NvsBackend:
    return NvsBackend(
        name="mock",
        version="mock-1",
        supported_views=tuple(default_supported_views()),
        synthesize=_mock_synthesize,
    )


class _Zero123PlusPlus:
    """Six-view grid model; loads lazily and slices the requested tile."""

    repo = "sudo-ai/zero123plusplus"

    def __init__(self):
        try:
            import diffusers  # noqa: F401
        except ImportError as exc:
            raise BackendUnavailableError(
                "nvs backend 'zero123pp' needs the diffusers package plus downloaded "
                "weights; use '--nvs mock' for a weight-free run") from exc
        import torch
        from diffusers import DiffusionPipeline
        try:
            self.pipeline = DiffusionPipeline.from_pretrained(
                self.repo, custom_pipeline="sudo-ai/zero123plus-pipeline")
        except Exception as exc:
            raise BackendUnavailableError(f"could not load '{self.repo}': {exc}") from exc
        if torch.cuda.is_available():
            self.pipeline.to("cuda")
        self.order = [v.key() for v in default_supported_views()]

    def __call__(self, image: np.ndarray, view: ViewSpec) -> np.ndarray:
        from PIL import Image
        pil = Image.fromarray(quantize_u8(image))
        grid = self.pipeline(pil, num_inference_steps=36).images[0]
        arr = u8_to_float(np.asarray(grid.convert("RGB")))
        tile_h, tile_w = arr.shape[0] // 3, arr.shape[1] // 2
        idx = self.order.index(view.key())
        row, col = idx // 2, idx % 2
        return arr[row * tile_h:(row + 1) * tile_h, col * tile_w:(col + 1) * tile_w]


def create_zero123pp_backend() -> NvsBackend:
    return NvsBackend(
        name="zero123pp",
        version=_Zero123PlusPlus.repo,
        supported_views=tuple(default_supported_views()),
        synthesize=_Zero123PlusPlus(),
    )


_NVS_BACKENDS = {
    "mock": create_mock_nvs_backend,
    "zero123pp": create_zero123pp_backend,
}


def create_nvs_backend(name: str) -> NvsBackend:
    try:
        factory = _NVS_BACKENDS[name]
    except KeyError:
        raise ValidationError(
            f"unknown nvs backend '{name}' (available: {sorted(_NVS_BACKENDS)})") from None
    return factory()


def _cache_paths(cache_dir, backend_name: str, scene_hash: str, view: ViewSpec):
    base = Path(cache_dir) / backend_name / scene_hash
    return base / f"{view.key()}.png", base / f"{view.key()}.json"


def synthesize_guidance(scene: Scene, view: ViewSpec, backend: NvsBackend,
                        cache_dir, snap: bool = True) -> GuidanceImage:
    """Run the backend at the (possibly snapped) view, through the cache.

    The cache key is (scene content hash, realized view, backend name); a
    repeat call returns the stored bytes without touching the backend.
    """
    if snap:
        realized = snap_view(view, backend.supported_views)
    else:
        matches = [v for v in backend.supported_views if v == view]
        if not matches:
            raise UnsupportedViewError(
                f"view {view} not in backend '{backend.name}' supported set "
                f"{[str(v) for v in backend.supported_views]} (snap disabled)")
        realized = matches[0]

    scene_hash = image_content_hash(scene.image)
    png_path, meta_path = _cache_paths(cache_dir, backend.name, scene_hash, realized)
    cache_key = f"{backend.name}/{scene_hash}/{realized.key()}"

    if png_path.is_file():
        img = load_image(png_path)
    else:
        try:
            raw = np.asarray(backend.synthesize(scene.image, realized), dtype=np.float64)
        except PipelineError:
            raise
        except Exception as exc:
            raise BackendError(f"nvs backend '{backend.name}' failed: {exc}") from exc
        if raw.ndim != 3 or raw.shape[2] != 3:
            raise BackendError(
                f"nvs backend '{backend.name}' returned shape {raw.shape}, expected HxWx3")
        # Quantize before returning so the fresh path and the cached path
        # hand back bit-identical pixels.
        u8 = quantize_u8(raw)
        img = u8_to_float(u8)
        atomic_write_bytes(png_path, image_png_bytes(img))
        atomic_write_text(meta_path, json.dumps({
            "backend_name": backend.name,
            "backend_version": backend.version,
            "scene_id": scene.scene_id,
            "scene_hash": scene_hash,
            "requested_view": [view.elevation_deg, view.azimuth_deg],
            "realized_view": [realized.elevation_deg, realized.azimuth_deg],
        }, indent=2, sort_keys=True) + "\n")

    return GuidanceImage(image=img, requested_view=view, realized_view=realized,
                         backend_name=backend.name, cache_key=cache_key)


def cache_stats(cache_dir) -> dict:
    """Per-backend entry counts and byte totals under cache_dir."""
    root = Path(cache_dir)
    stats = {}
    if not root.is_dir():
        return stats
    for backend_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        entries = list(backend_dir.rglob("*.png"))
        size = sum(p.stat().st_size for p in backend_dir.rglob("*") if p.is_file())
        stats[backend_dir.name] = {"entries": len(entries), "bytes": size}
    return stats


def clear_cache(cache_dir) -> int:
    """Delete every cached file under cache_dir; returns files removed."""
    import shutil
    root = Path(cache_dir)
    if not root.is_dir():
        return 0
    n = sum(1 for p in root.rglob("*") if p.is_file())
    for child in root.iterdir():
        if child.is_dir():
            shutil.rmtree(child)
        else:
            child.unlink()
    return n
