"""Shared domain types, configuration schema, and deterministic seed plumbing."""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image


class ValidationError(ValueError):
    """Bad user input or malformed data. CLI maps this family to exit code 2."""


class PipelineError(RuntimeError):
    """Runtime failure inside the pipeline. CLI maps this family to exit code 3."""


class InvalidFieldError(ValidationError):
    """A config or domain field violates its constraint."""

    def __init__(self, field_name, constraint, value):
        self.field_name = field_name
        self.constraint = constraint
        self.value = value
        super().__init__(f"invalid field '{field_name}' = {value!r}: must {constraint}")


class ShapeMismatchError(ValidationError):
    def __init__(self, what, a, b):
        super().__init__(f"shape mismatch in {what}: {a} vs {b}")


def wrap_azimuth(deg: float) -> float:
    """Wrap any finite azimuth into [0, 360)."""
    if not math.isfinite(deg):
        raise InvalidFieldError("azimuth_deg", "be finite", deg)
    az = math.fmod(float(deg), 360.0)
    if az < 0.0:
        az += 360.0
    if az >= 360.0:  # fmod rounding can land exactly on 360.0
        az = 0.0
    return az


def format_angle(deg: float) -> str:
    """Compact angle string: 30.0 -> '30', -20.0 -> '-20', 12.5 -> '12.5'."""
    return f"{float(deg):g}"


@dataclass(frozen=True)
class ViewSpec:
    """Target camera viewpoint. Canonical order is (elevation, azimuth), in degrees."""

    elevation_deg: float
    azimuth_deg: float

    def __post_init__(self):
        elev = float(self.elevation_deg)
        if not math.isfinite(elev):
            raise InvalidFieldError("elevation_deg", "be finite", self.elevation_deg)
        if not -90.0 <= elev <= 90.0:
            raise InvalidFieldError("elevation_deg", "lie in [-90, 90]", self.elevation_deg)
        object.__setattr__(self, "elevation_deg", elev)
        object.__setattr__(self, "azimuth_deg", wrap_azimuth(self.azimuth_deg))

    def key(self) -> str:
        """Path-safe identifier, e.g. '30_270' or '-20_210'."""
        return f"{format_angle(self.elevation_deg)}_{format_angle(self.azimuth_deg)}"

    def __str__(self):
        return f"({format_angle(self.elevation_deg)}, {format_angle(self.azimuth_deg)})"


def parse_view(text: str) -> ViewSpec:
    """Parse 'elev,azi' into a ViewSpec."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise InvalidFieldError("view", "be 'elevation,azimuth'", text)
    try:
        elev, azi = float(parts[0]), float(parts[1])
    except ValueError:
        raise InvalidFieldError("view", "contain two numbers", text) from None
    return ViewSpec(elev, azi)


def parse_views(text: str) -> tuple[ViewSpec, ...]:
    """Parse a semicolon-separated view list, e.g. '30,30;-20,210'."""
    chunks = [c for c in (p.strip() for p in text.split(";")) if c]
    if not chunks:
        raise InvalidFieldError("views", "contain at least one 'elev,azi' pair", text)
    return tuple(parse_view(c) for c in chunks)


def views_to_string(views) -> str:
    return ";".join(f"{format_angle(v.elevation_deg)},{format_angle(v.azimuth_deg)}" for v in views)


# The four evaluation viewpoints used by the default batch plan.
DEFAULT_EVAL_VIEWS = (
    ViewSpec(30.0, 30.0),
    ViewSpec(-20.0, 210.0),
    ViewSpec(30.0, 270.0),
    ViewSpec(-20.0, 330.0),
)


@dataclass(frozen=True)
class Scene:
    """A single input: RGB image (float, values in [0, 1]) plus its text description."""

    image: np.ndarray
    caption: str
    scene_id: str

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InvalidFieldError("image", "be an HxWx3 array", getattr(img, "shape", None))
        if img.shape[0] < 64 or img.shape[1] < 64:
            raise InvalidFieldError("image", "have both spatial dims >= 64", img.shape)
        if not np.isfinite(img).all():
            raise InvalidFieldError("image", "contain only finite values", "non-finite entries")
        if img.min() < 0.0 or img.max() > 1.0:
            raise InvalidFieldError("image", "have values in [0, 1]", (float(img.min()), float(img.max())))
        caption = str(self.caption).strip()
        if not caption:
            raise InvalidFieldError("caption", "be non-empty after trimming", self.caption)
        if not str(self.scene_id):
            raise InvalidFieldError("scene_id", "be non-empty", self.scene_id)
        img = np.ascontiguousarray(img)
        img.setflags(write=False)
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "caption", caption)
        object.__setattr__(self, "scene_id", str(self.scene_id))


@dataclass(frozen=True)
class GenerationResult:
    """Final generated view plus the provenance needed to reproduce it."""

    image: np.ndarray
    view: ViewSpec
    target_prompt: str
    seed: int
    timings: dict

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InvalidFieldError("image", "be an HxWx3 array", getattr(img, "shape", None))
        img = np.ascontiguousarray(img)
        img.setflags(write=False)
        object.__setattr__(self, "image", img)


# ---------------------------------------------------------------------------
# Pipeline configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the pipeline. Defaults are documented starting points."""

    seed: int = 0
    image_size: int = 512
    embed_opt_steps_input: int = 400
    lora_steps_input: int = 400
    embed_opt_steps_view: int = 400
    lora_steps_view: int = 400
    embed_lr: float = 1e-3
    lora_lr: float = 1e-4
    lora_rank: int = 4
    cfg_scale: float = 7.5
    mi_weight: float = 0.5
    mi_bins: int = 32
    mi_bandwidth: float = 0.05
    mi_active_start: float = 0.1
    mi_active_end: float = 0.9
    sampler_steps: int = 50
    snap_to_supported_views: bool = True
    views: tuple = DEFAULT_EVAL_VIEWS
    warm_start_embedding: bool = True
    shared_adapters: bool = True
    optim_algo: str = "adam"
    uncond_source: str = "empty"
    backbone: str = "sd21"
    nvs: str = "zero123pp"
    embedding_model: str = "hashed-v1"
    perceptual_model: str = "randfeat-v1"
    val_fraction: float = 0.10
    captioner_timeout_s: float = 30.0
    captioner_retries: int = 2


# Config-file key for each field. Keys equal field names except the captioner
# group, which is namespaced.
_KEY_OVERRIDES = {
    "captioner_timeout_s": "captioner.timeout_s",
    "captioner_retries": "captioner.retries",
}
CONFIG_KEYS = {
    _KEY_OVERRIDES.get(f.name, f.name): f.name for f in fields(PipelineConfig)
}
_FIELD_TO_KEY = {v: k for k, v in CONFIG_KEYS.items()}

_CHOICES = {
    "optim_algo": ("adam", "sgd"),
    "uncond_source": ("empty", "input"),
}


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Check every field constraint; return the (already normalized) config.

    View presets are normalized by ViewSpec itself, so a valid config passes
    through unchanged.
    """
    def require(ok, name, constraint):
        if not ok:
            raise InvalidFieldError(name, constraint, getattr(cfg, name))

    require(isinstance(cfg.seed, int), "seed", "be an integer")
    require(isinstance(cfg.image_size, int) and cfg.image_size >= 64, "image_size", "be an integer >= 64")
    for name in ("embed_opt_steps_input", "lora_steps_input", "embed_opt_steps_view",
                 "lora_steps_view", "sampler_steps"):
        v = getattr(cfg, name)
        require(isinstance(v, int) and v >= 1, name, "be >= 1")
    for name in ("embed_lr", "lora_lr"):
        v = getattr(cfg, name)
        require(math.isfinite(v) and v > 0.0, name, "be > 0")
    require(isinstance(cfg.lora_rank, int) and cfg.lora_rank >= 1, "lora_rank", "be a positive integer")
    require(math.isfinite(cfg.cfg_scale), "cfg_scale", "be finite")
    require(math.isfinite(cfg.mi_weight) and cfg.mi_weight >= 0.0, "mi_weight", "be >= 0")
    require(isinstance(cfg.mi_bins, int) and cfg.mi_bins >= 2, "mi_bins", "be an integer >= 2")
    require(math.isfinite(cfg.mi_bandwidth) and cfg.mi_bandwidth > 0.0, "mi_bandwidth", "be > 0")
    require(0.0 <= cfg.mi_active_start < cfg.mi_active_end <= 1.0,
            "mi_active_start", "satisfy 0 <= start < end <= 1")
    require(isinstance(cfg.snap_to_supported_views, bool), "snap_to_supported_views", "be a boolean")
    require(len(cfg.views) >= 1 and all(isinstance(v, ViewSpec) for v in cfg.views),
            "views", "be a non-empty list of ViewSpec")
    for name, choices in _CHOICES.items():
        require(getattr(cfg, name) in choices, name, f"be one of {choices}")
    for name in ("backbone", "nvs", "embedding_model", "perceptual_model"):
        require(bool(getattr(cfg, name)), name, "be non-empty")
    require(0.0 < cfg.val_fraction <= 1.0, "val_fraction", "lie in (0, 1]")
    require(math.isfinite(cfg.captioner_timeout_s) and cfg.captioner_timeout_s > 0.0,
            "captioner.timeout_s", "be > 0")
    require(isinstance(cfg.captioner_retries, int) and cfg.captioner_retries >= 0,
            "captioner.retries", "be >= 0")
    return cfg


def _serialize_value(name, value):
    if name == "views":
        return views_to_string(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name, text, kind):
    text = text.strip()
    try:
        if name == "views":
            return parse_views(text)
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise InvalidFieldError(name, f"parse as {kind.__name__}", text) from None


_FIELD_KINDS = {f.name: (tuple if f.name == "views" else type(getattr(PipelineConfig(), f.name)))
                for f in fields(PipelineConfig)}


def serialize_config(cfg: PipelineConfig) -> str:
    """Render the flat `key = value` config text (one key per line, UTF-8)."""
    lines = []
    for f in fields(PipelineConfig):
        key = _FIELD_TO_KEY[f.name]
        lines.append(f"{key} = {_serialize_value(f.name, getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse config text into a validated PipelineConfig.

    Unknown keys are an error. Absent keys keep the values from `base`
    (defaults when base is None). Blank lines and '#' comments are ignored.
    """
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidFieldError(f"line {lineno}", "have the form 'key = value'", raw)
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise InvalidFieldError(key, "be a known config key", value.strip())
        name = CONFIG_KEYS[key]
        overrides[name] = _parse_value(name, value, _FIELD_KINDS[name])
    cfg = replace(base or PipelineConfig(), **overrides)
    return validate_config(cfg)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), base=base)


def parse_config_value(key: str, text: str):
    """Parse one config value by its key; returns (field_name, typed value)."""
    if key not in CONFIG_KEYS:
        raise InvalidFieldError(key, "be a known config key", text)
    name = CONFIG_KEYS[key]
    return name, _parse_value(name, text, _FIELD_KINDS[name])


def config_hash(cfg: PipelineConfig) -> str:
    """Stable hash of the full configuration, for provenance records."""
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Deterministic random streams
# ---------------------------------------------------------------------------

def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Deterministic random stream keyed by (seed, label).

    Identical (seed, label) pairs yield bitwise-identical streams; distinct
    labels or seeds yield independent streams. Labels let every pipeline
    stage and worker own its own stream without coordination.
    """
    digest = hashlib.sha256(stream_label.encode("utf-8")).digest()
    words = np.frombuffer(digest, dtype=np.uint32)
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(w) for w in words]
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# Image helpers
# ---------------------------------------------------------------------------

_RESAMPLE = {
    "bicubic": Image.BICUBIC,
    "bilinear": Image.BILINEAR,
    "nearest": Image.NEAREST,
}


def quantize_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def u8_to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def resize_image(img: np.ndarray, size: int, method: str = "bicubic") -> np.ndarray:
    """Resize HxWx3 float image to size x size, clipping back into [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == size and img.shape[1] == size:
        return img
    resample = _RESAMPLE[method]
    chans = []
    for c in range(img.shape[2]):
        ch = Image.fromarray(img[:, :, c].astype(np.float32), mode="F")
        chans.append(np.asarray(ch.resize((size, size), resample), dtype=np.float64))
    return np.clip(np.stack(chans, axis=2), 0.0, 1.0)


def load_image(path) -> np.ndarray:
    """Load an image file as HxWx3 float64 in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"image file not found: {path}")
    with Image.open(path) as im:
        return u8_to_float(np.asarray(im.convert("RGB")))


def image_png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(quantize_u8(img)).save(buf, format="PNG")
    return buf.getvalue()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write-to-temp then rename, so readers never observe partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_image(img: np.ndarray, path) -> None:
    atomic_write_bytes(path, image_png_bytes(img))


def save_json(obj, path) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def image_content_hash(img: np.ndarray) -> str:
    """Content hash of an image on the 8-bit grid actually stored on disk."""
    u8 = quantize_u8(img)
    h = hashlib.sha256()
    h.update(np.asarray(u8.shape, dtype=np.int64).tobytes())
    h.update(u8.tobytes())
    return h.hexdigest()[:16]
