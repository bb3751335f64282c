"""Six-metric evaluation over (input image, generated image, prompt) triples.

Two encoder families are pluggable: a dual image-text embedding space for the
CLIP-style metrics and a perceptual network for LPIPS-style distance. The
default spaces are deterministic hash/random-feature stand-ins that need no
downloaded weights; real CLIP and LPIPS models can be selected by name when
their packages and weights are present.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    GenerationResult,
    PipelineError,
    Scene,
    ShapeMismatchError,
    ValidationError,
    ViewSpec,
    atomic_write_text,
    resize_image,
    save_json,
    seeded_rng,
)
from .prompts import build_view_prefix

METRIC_COLUMNS = ("LPIPS", "CLIP", "View-CLIP", "CLIPD", "View-CLIPD", "CLIP-I")

# Fixed neutral source text for the view-direction metric, so the text delta
# isolates the view clause. Constant across methods by design.
NEUTRAL_SOURCE_TEXT = "a photo"

DEGENERATE_NORM_EPS = 1e-8


class EncoderUnavailableError(PipelineError):
    pass


class EmptyTextError(ValidationError):
    pass


class EmptyReportError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# Embedding spaces
# ---------------------------------------------------------------------------

class EmbeddingSpace:
    """Dual image/text encoder into one unit-norm vector space."""

    name = "abstract"
    dim = 0

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < DEGENERATE_NORM_EPS:
        raise PipelineError("encoder produced a near-zero vector")
    return v / n


class HashedEmbeddingSpace(EmbeddingSpace):
    """Deterministic offline stand-in for a dual image-text encoder.

    Text: mean of hash-seeded token vectors. Image: fixed random projection
    of a 16x16 downsample. No semantic alignment between the modalities is
    claimed; the space exists so metric identities and plumbing are testable
    without any downloaded weights.
    """

    name = "hashed-v1"
    dim = 64
    _token_re = re.compile(r"[+-]?\d+|[a-z]+")

    def __init__(self):
        self._img_proj = seeded_rng(0, "hashed-v1:image-proj").standard_normal(
            (self.dim, 16 * 16 * 3)) / np.sqrt(16 * 16 * 3)
        self._tok_cache: dict[str, np.ndarray] = {}

    def _token_vec(self, tok: str) -> np.ndarray:
        v = self._tok_cache.get(tok)
        if v is None:
            v = seeded_rng(0, f"hashed-v1:tok:{tok}").standard_normal(self.dim)
            self._tok_cache[tok] = v
        return v

    def embed_text(self, text: str) -> np.ndarray:
        text = str(text).strip()
        if not text:
            raise EmptyTextError("cannot embed empty text")
        tokens = self._token_re.findall(text.lower()) or [text.lower()]
        acc = np.zeros(self.dim)
        for i, tok in enumerate(tokens):
            acc += self._token_vec(tok) * (1.0 + 0.01 * i)
        return _unit(acc)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        small = resize_image(img, 16)
        return _unit(self._img_proj @ small.reshape(-1))


class ClipEmbeddingSpace(EmbeddingSpace):
    """Real CLIP (ViT-B/32) through sentence-transformers; needs weights."""

    name = "clip-vit-b32"
    dim = 512

    def __init__(self):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EncoderUnavailableError(
                "embedding space 'clip-vit-b32' needs sentence-transformers") from exc
        try:
            self._model = SentenceTransformer("clip-ViT-B-32")
        except Exception as exc:
            raise EncoderUnavailableError(f"could not load clip-ViT-B-32: {exc}") from exc

    def embed_text(self, text: str) -> np.ndarray:
        if not str(text).strip():
            raise EmptyTextError("cannot embed empty text")
        return _unit(self._model.encode([text])[0])

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        from PIL import Image
        from .core import quantize_u8
        return _unit(self._model.encode([Image.fromarray(quantize_u8(image))])[0])


# ---------------------------------------------------------------------------
# Perceptual distance
# ---------------------------------------------------------------------------

class PerceptualNet:
    name = "abstract"

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        raise NotImplementedError


class RandomFeaturePerceptual(PerceptualNet):
    """Fixed random conv stack with per-location unit-normalized features;
    distance is the mean squared feature difference, averaged over layers.
    Zero on identical inputs and symmetric by construction."""

    name = "randfeat-v1"

    def __init__(self):
        shapes = [(8, 3, 3, 3), (16, 8, 3, 3), (16, 16, 3, 3)]
        self._weights = []
        for i, shape in enumerate(shapes):
            fan_in = shape[1] * shape[2] * shape[3]
            w = seeded_rng(0, f"randfeat-v1:conv{i}").standard_normal(shape) / np.sqrt(fan_in)
            self._weights.append(torch.as_tensor(w, dtype=torch.float64))

    def _features(self, img: np.ndarray) -> list:
        x = torch.as_tensor(np.asarray(img, dtype=np.float64).copy()).permute(2, 0, 1)[None]
        x = x * 2.0 - 1.0
        feats = []
        for w in self._weights:
            x = F.conv2d(x, w, stride=2, padding=1)
            x = F.relu(x)
            norm = torch.sqrt((x * x).sum(dim=1, keepdim=True) + 1e-10)
            feats.append(x / norm)
        return feats

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeMismatchError("perceptual distance", a.shape, b.shape)
        with torch.no_grad():
            fa = self._features(a)
            fb = self._features(b)
            return float(sum(torch.mean((x - y) ** 2) for x, y in zip(fa, fb)) / len(fa))


class LpipsPerceptual(PerceptualNet):
    """Learned perceptual distance (AlexNet variant); needs the lpips package
    and its weights."""

    name = "lpips-alex"

    def __init__(self):
        try:
            import lpips
        except ImportError as exc:
            raise EncoderUnavailableError("perceptual model 'lpips-alex' needs lpips") from exc
        try:
            self._net = lpips.LPIPS(net="alex", verbose=False)
        except Exception as exc:
            raise EncoderUnavailableError(f"could not load lpips weights: {exc}") from exc

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        if np.asarray(a).shape != np.asarray(b).shape:
            raise ShapeMismatchError("perceptual distance", np.asarray(a).shape,
                                     np.asarray(b).shape)
        def prep(x):
            t = torch.as_tensor(np.asarray(x, dtype=np.float32)).permute(2, 0, 1)[None]
            return t * 2.0 - 1.0
        with torch.no_grad():
            return float(self._net(prep(a), prep(b)))


_SPACES = {"hashed-v1": HashedEmbeddingSpace, "clip-vit-b32": ClipEmbeddingSpace}
_PERCEPTUAL = {"randfeat-v1": RandomFeaturePerceptual, "lpips-alex": LpipsPerceptual}


def create_embedding_space(name: str) -> EmbeddingSpace:
    try:
        return _SPACES[name]()
    except KeyError:
        raise ValidationError(
            f"unknown embedding space '{name}' (available: {sorted(_SPACES)})") from None


def create_perceptual(name: str) -> PerceptualNet:
    try:
        return _PERCEPTUAL[name]()
    except KeyError:
        raise ValidationError(
            f"unknown perceptual model '{name}' (available: {sorted(_PERCEPTUAL)})") from None


# ---------------------------------------------------------------------------
# The six metrics
# ---------------------------------------------------------------------------

def lpips_distance(a: np.ndarray, b: np.ndarray, perceptual_net: PerceptualNet) -> float:
    return perceptual_net.distance(a, b)


def clip_score(image: np.ndarray, text: str, space: EmbeddingSpace) -> float:
    """100 x cosine between the image embedding and the full-prompt embedding."""
    if not str(text).strip():
        raise EmptyTextError("clip_score text is empty")
    return 100.0 * float(np.dot(space.embed_image(image), space.embed_text(text)))


def view_clip_score(image: np.ndarray, view: ViewSpec, space: EmbeddingSpace) -> float:
    """Like clip_score but against the view clause alone."""
    return 100.0 * float(np.dot(space.embed_image(image),
                                space.embed_text(build_view_prefix(view))))


def directional_similarity(src_img: np.ndarray, gen_img: np.ndarray,
                           src_text: str, tgt_text: str,
                           space: EmbeddingSpace) -> float:
    """Cosine between the image-embedding delta and the text-embedding delta.
    Either delta with near-zero norm makes the value exactly 0."""
    di = space.embed_image(gen_img) - space.embed_image(src_img)
    dt = space.embed_text(tgt_text) - space.embed_text(src_text)
    ni, nt = float(np.linalg.norm(di)), float(np.linalg.norm(dt))
    if ni < DEGENERATE_NORM_EPS or nt < DEGENERATE_NORM_EPS:
        return 0.0
    return float(np.dot(di, dt) / (ni * nt))


def clip_d(scene: Scene, result: GenerationResult, space: EmbeddingSpace) -> float:
    return directional_similarity(scene.image, result.image,
                                  scene.caption, result.target_prompt, space)


def view_clip_d(scene: Scene, result: GenerationResult, space: EmbeddingSpace) -> float:
    return directional_similarity(scene.image, result.image,
                                  NEUTRAL_SOURCE_TEXT, build_view_prefix(result.view),
                                  space)


def clip_i(scene: Scene, result: GenerationResult, space: EmbeddingSpace) -> float:
    return float(np.dot(space.embed_image(result.image), space.embed_image(scene.image)))


def compute_scene_metrics(scene: Scene, result: GenerationResult,
                          space: EmbeddingSpace, perceptual: PerceptualNet) -> dict:
    """All six metrics for one (scene, generation) pair, keyed by column name."""
    src = scene.image
    if src.shape != result.image.shape:
        src = resize_image(src, result.image.shape[0])
    return {
        "LPIPS": lpips_distance(src, result.image, perceptual),
        "CLIP": clip_score(result.image, result.target_prompt, space),
        "View-CLIP": view_clip_score(result.image, result.view, space),
        "CLIPD": clip_d(scene, result, space),
        "View-CLIPD": view_clip_d(scene, result, space),
        "CLIP-I": clip_i(scene, result, space),
    }


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    scene_id: str
    view_key: str
    values: dict


@dataclass(frozen=True)
class FailureRecord:
    scene_id: str
    view_key: str
    error: str


@dataclass(frozen=True)
class MetricReport:
    """Aggregate + per-scene metric values. Aggregates are the unweighted
    means over all per-scene rows; failures are listed but never averaged."""

    lpips: float
    clip: float
    view_clip: float
    clip_d: float
    view_clip_d: float
    clip_i: float
    rows: tuple
    failures: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def per_scene(self) -> dict:
        return {f"{r.scene_id}@{r.view_key}": dict(r.values) for r in self.rows}

    @property
    def aggregate(self) -> dict:
        return {
            "LPIPS": self.lpips, "CLIP": self.clip, "View-CLIP": self.view_clip,
            "CLIPD": self.clip_d, "View-CLIPD": self.view_clip_d, "CLIP-I": self.clip_i,
        }

    @staticmethod
    def build(rows, failures=(), metadata=None) -> "MetricReport":
        rows = tuple(sorted(rows, key=lambda r: (r.view_key, r.scene_id)))
        if not rows:
            raise EmptyReportError("report has no successful rows")
        means = {c: float(np.mean([r.values[c] for r in rows])) for c in METRIC_COLUMNS}
        return MetricReport(
            lpips=means["LPIPS"], clip=means["CLIP"], view_clip=means["View-CLIP"],
            clip_d=means["CLIPD"], view_clip_d=means["View-CLIPD"], clip_i=means["CLIP-I"],
            rows=rows,
            failures=tuple(sorted(failures, key=lambda f: (f.scene_id, f.view_key))),
            metadata=dict(metadata or {}),
        )


def report_to_json_dict(report: MetricReport) -> dict:
    per_view = {}
    for vk in sorted({r.view_key for r in report.rows}):
        sub = [r for r in report.rows if r.view_key == vk]
        per_view[vk] = {c: float(np.mean([r.values[c] for r in sub])) for c in METRIC_COLUMNS}
    return {
        "aggregate": report.aggregate,
        "per_view": per_view,
        "per_scene": report.per_scene,
        "failures": [
            {"scene_id": f.scene_id, "view": f.view_key, "error": f.error}
            for f in report.failures
        ],
        "metadata": report.metadata,
    }


def report_to_csv(report: MetricReport) -> str:
    """Aggregate row per view, then per-scene rows, metric columns in the
    fixed order LPIPS,CLIP,View-CLIP,CLIPD,View-CLIPD,CLIP-I."""
    dataset = str(report.metadata.get("dataset", ""))
    method = str(report.metadata.get("method", ""))
    lines = ["kind,dataset,view,method,scene_id," + ",".join(METRIC_COLUMNS)]

    def fmt(values):
        return ",".join(f"{values[c]:.6f}" for c in METRIC_COLUMNS)

    doc = report_to_json_dict(report)
    for vk in sorted(doc["per_view"]):
        lines.append(f"aggregate,{dataset},{vk},{method},,{fmt(doc['per_view'][vk])}")
    for row in report.rows:
        lines.append(f"scene,{dataset},{row.view_key},{method},{row.scene_id},{fmt(row.values)}")
    return "\n".join(lines) + "\n"


def emit_report(report: MetricReport, out_dir) -> tuple:
    """Write report.json and report.csv under out_dir; returns both paths."""
    if not report.rows:
        raise EmptyReportError("cannot emit an empty report")
    out_dir = Path(out_dir)
    json_path = out_dir / "report.json"
    csv_path = out_dir / "report.csv"
    save_json(report_to_json_dict(report), json_path)
    atomic_write_text(csv_path, report_to_csv(report))
    return json_path, csv_path
