"""Sampling: classifier-free guidance plus mutual-information guidance that
pulls the emerging generation toward the input image's intensity statistics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import DiffusionBackbone, NonFiniteLatentError
from .core import (
    GenerationResult,
    InvalidFieldError,
    PipelineConfig,
    PipelineError,
    ShapeMismatchError,
    ValidationError,
    config_hash,
    resize_image,
    save_image,
    save_json,
)
from .optim import OptimizationState
from .prompts import PromptSpec

_LUMA = (0.299, 0.587, 0.114)


def _to_tensor(arr) -> torch.Tensor:
    """float64 tensor from any array, copying so read-only inputs are fine."""
    return torch.as_tensor(np.asarray(arr, dtype=np.float64).copy())


@dataclass(frozen=True)
class MiGuidanceSpec:
    """Mutual-information guidance knobs. weight == 0 disables the term
    exactly; the guided path is then bit-identical to plain sampling."""

    weight: float = 0.5
    bins: int = 32
    bandwidth: float = 0.05
    active_start: float = 0.1
    active_end: float = 0.9

    def __post_init__(self):
        if not (math.isfinite(self.weight) and self.weight >= 0.0):
            raise InvalidFieldError("weight", "be >= 0", self.weight)
        if not (isinstance(self.bins, int) and self.bins >= 2):
            raise InvalidFieldError("bins", "be an integer >= 2", self.bins)
        if not (math.isfinite(self.bandwidth) and self.bandwidth > 0.0):
            raise InvalidFieldError("bandwidth", "be > 0", self.bandwidth)
        if not (0.0 <= self.active_start < self.active_end <= 1.0):
            raise InvalidFieldError("active_start", "satisfy 0 <= start < end <= 1",
                                    (self.active_start, self.active_end))

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "MiGuidanceSpec":
        return cls(weight=cfg.mi_weight, bins=cfg.mi_bins, bandwidth=cfg.mi_bandwidth,
                   active_start=cfg.mi_active_start, active_end=cfg.mi_active_end)


def _grayscale(img: torch.Tensor) -> torch.Tensor:
    if img.ndim == 3 and img.shape[-1] == 3:
        return _LUMA[0] * img[..., 0] + _LUMA[1] * img[..., 1] + _LUMA[2] * img[..., 2]
    if img.ndim == 2:
        return img
    raise ShapeMismatchError("grayscale input", tuple(img.shape), "(H, W) or (H, W, 3)")


def _soft_assign(values: torch.Tensor, bins: int, bandwidth: float) -> torch.Tensor:
    """Per-value softmax weights over bin centers (N x bins, rows sum to 1).

    Values live on bin-unit coordinates u = v*bins - 0.5, putting the center
    of bin j at u = j. The 1e-6 nudge implements half-open bins in the hard
    limit: an exact boundary value such as 0.5 with 2 bins lands in the upper
    bin instead of splitting; at practical bandwidths it is negligible.
    """
    u = values.reshape(-1) * bins - 0.5 + 1e-6
    centers = torch.arange(bins, dtype=values.dtype)
    sigma = bandwidth * bins
    logits = -((u[:, None] - centers[None, :]) ** 2) / (2.0 * sigma * sigma)
    return torch.softmax(logits, dim=1)


def _check_unit_range(name: str, values: torch.Tensor) -> None:
    lo, hi = float(values.min()), float(values.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise InvalidFieldError(name, "have values in [0, 1]", (lo, hi))


def soft_histogram(image: np.ndarray, bins: int, bandwidth: float) -> np.ndarray:
    """Differentiable intensity histogram: length-`bins`, sums to 1."""
    spec = MiGuidanceSpec(weight=0.0, bins=int(bins), bandwidth=float(bandwidth))
    v = _grayscale(_to_tensor(image))
    _check_unit_range("image", v)
    return _soft_assign(v, spec.bins, spec.bandwidth).mean(dim=0).numpy()


def _mi_torch(a: torch.Tensor, b: torch.Tensor, spec: MiGuidanceSpec) -> torch.Tensor:
    wa = _soft_assign(a, spec.bins, spec.bandwidth)
    wb = _soft_assign(b, spec.bins, spec.bandwidth)
    joint = wa.transpose(0, 1) @ wb / wa.shape[0]
    pi = joint.sum(dim=1, keepdim=True)
    qj = joint.sum(dim=0, keepdim=True)
    eps = 1e-12
    return torch.sum(joint * (torch.log(joint + eps) - torch.log(pi @ qj + eps)))


def mutual_information(a: np.ndarray, b: np.ndarray, spec: MiGuidanceSpec) -> float:
    """MI (nats) of the soft joint histogram of per-pixel intensity pairs."""
    ta = _grayscale(_to_tensor(a))
    tb = _grayscale(_to_tensor(b))
    if ta.shape != tb.shape:
        raise ShapeMismatchError("mutual_information", tuple(ta.shape), tuple(tb.shape))
    _check_unit_range("a", ta)
    _check_unit_range("b", tb)
    return float(_mi_torch(ta, tb, spec))


def _cfg_eps(backbone, latent, t, cond, uncond, cfg_scale):
    eps_u = backbone.predict_noise(latent, t, uncond)
    eps_c = backbone.predict_noise(latent, t, cond)
    return eps_u + cfg_scale * (eps_c - eps_u)


def guided_step(backbone: DiffusionBackbone, state: OptimizationState,
                latent: torch.Tensor, t: int, t_prev: int, prompts: PromptSpec,
                input_image: np.ndarray, cfg_scale: float, mi_spec: MiGuidanceSpec,
                cond: torch.Tensor | None = None, uncond: torch.Tensor | None = None,
                uncond_source: str = "empty") -> torch.Tensor:
    """One deterministic denoising update from timestep t to t_prev.

    Classifier-free guidance combines the target-prompt and unconditional
    noise predictions. Inside the active step range, the mutual-information
    gradient (taken through the decoded denoised prediction) is added to the
    score before the update; the correction on the noise prediction is
    -weight * sqrt(1 - alpha_bar) * grad.
    """
    T = backbone.max_timestep
    if not (1 <= t <= T) or not (0 <= t_prev < t):
        raise ValidationError(f"bad timestep pair (t={t}, t_prev={t_prev}) for T={T}")
    if cond is None:
        cond = backbone.encode_text(prompts.target_text)
    if uncond is None:
        uncond = backbone.encode_text("" if uncond_source == "empty" else prompts.source_text)
    ab_t = backbone.alpha_bar(t)
    ab_prev = backbone.alpha_bar(t_prev)
    sq1m = math.sqrt(1.0 - ab_t)

    frac = t / T
    active = mi_spec.weight > 0.0 and mi_spec.active_start <= frac <= mi_spec.active_end
    if not active:
        with torch.no_grad():
            eps = _cfg_eps(backbone, latent, t, cond, uncond, cfg_scale)
    else:
        x_req = latent.detach().clone().requires_grad_(True)
        eps_g = _cfg_eps(backbone, x_req, t, cond, uncond, cfg_scale)
        x0_g = (x_req - sq1m * eps_g) / math.sqrt(ab_t)
        size = int(np.asarray(input_image).shape[0])
        decoded = backbone.decode_latent(x0_g, out_size=size)
        ref = _grayscale(_to_tensor(input_image))
        mi = _mi_torch(_grayscale(decoded), ref, mi_spec)
        grad = torch.autograd.grad(mi, x_req)[0]
        eps = eps_g.detach() - mi_spec.weight * sq1m * grad

    x0_hat = (latent - sq1m * eps) / math.sqrt(ab_t)
    nxt = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps
    if not torch.isfinite(nxt).all():
        raise NonFiniteLatentError(f"non-finite latent after step t={t}")
    return nxt.detach()


def timestep_ladder(max_timestep: int, steps: int) -> list:
    """Descending unique timesteps from T toward 1 for a steps-long run."""
    raw = np.linspace(max_timestep, 1, steps).round().astype(int)
    ladder = []
    for t in raw:
        if not ladder or t < ladder[-1]:
            ladder.append(int(t))
    return ladder


def generate(backbone: DiffusionBackbone, state: OptimizationState,
             prompts: PromptSpec, input_image: np.ndarray, cfg: PipelineConfig,
             rng: np.random.Generator) -> GenerationResult:
    """Full deterministic sampling run from a pure-noise latent."""
    t_start = time.perf_counter()
    if state.theta_lora:
        backbone.load_adapter_state(state.theta_lora)
        backbone.set_adapter_scale(1.0)
    input_img = resize_image(np.asarray(input_image, dtype=np.float64), cfg.image_size)
    mi_spec = MiGuidanceSpec.from_config(cfg)
    cond = backbone.encode_text(prompts.target_text)
    uncond = backbone.encode_text(
        "" if cfg.uncond_source == "empty" else prompts.source_text)

    latent = torch.as_tensor(rng.standard_normal(tuple(backbone.latent_shape)),
                             dtype=torch.float64)
    ladder = timestep_ladder(backbone.max_timestep, cfg.sampler_steps)
    t_setup = time.perf_counter()
    for i, t in enumerate(ladder):
        t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
        try:
            latent = guided_step(backbone, state, latent, t, t_prev, prompts,
                                 input_img, cfg.cfg_scale, mi_spec,
                                 cond=cond, uncond=uncond,
                                 uncond_source=cfg.uncond_source)
        except PipelineError as exc:
            raise type(exc)(f"[sampler step {i + 1}/{len(ladder)}] {exc}") from exc
    t_sample = time.perf_counter()
    with torch.no_grad():
        image = backbone.decode_latent(latent, out_size=cfg.image_size).numpy()
    t_decode = time.perf_counter()
    image = np.clip(image, 0.0, 1.0)
    return GenerationResult(
        image=image,
        view=prompts.view,
        target_prompt=prompts.target_text,
        seed=cfg.seed,
        timings={
            "setup_s": t_setup - t_start,
            "sampling_s": t_sample - t_setup,
            "decode_s": t_decode - t_sample,
        },
    )


def save_generation(result: GenerationResult, out_dir, cfg: PipelineConfig | None = None,
                    source_text: str | None = None, extra: dict | None = None) -> None:
    """Write generated.png plus a meta.json provenance record."""
    from pathlib import Path
    out_dir = Path(out_dir)
    save_image(result.image, out_dir / "generated.png")
    meta = {
        "seed": result.seed,
        "target_prompt": result.target_prompt,
        "view": {"elevation_deg": result.view.elevation_deg,
                 "azimuth_deg": result.view.azimuth_deg},
        "timings": result.timings,
    }
    if source_text is not None:
        meta["source_text"] = source_text
    if cfg is not None:
        meta["config_hash"] = config_hash(cfg)
    if extra:
        meta.update(extra)
    save_json(meta, out_dir / "meta.json")
