"""Inference-time optimization: embedding inversion on the input image,
low-rank adapter fine-tuning, then both phases again on the guidance view."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import DiffusionBackbone
from .core import (
    PipelineConfig,
    PipelineError,
    Scene,
    ShapeMismatchError,
    atomic_write_bytes,
    atomic_write_text,
    resize_image,
    seeded_rng,
)
from .guidance import GuidanceImage


class NonFiniteLossError(PipelineError):
    pass


class FrozenWeightError(PipelineError):
    """A base (non-adapter) weight changed during adapter fine-tuning."""


PHASE_NAMES = ("embed_input", "lora_input", "embed_view", "lora_view")


@dataclass
class PhaseRecord:
    phase: str
    losses: list = field(default_factory=list)


@dataclass
class OptimizationState:
    """Optimized conditioning embedding + adapter weights + loss history."""

    e_optim: torch.Tensor
    theta_lora: dict | None = None
    phase_log: list = field(default_factory=list)

    def losses_for(self, phase: str) -> list:
        for rec in self.phase_log:
            if rec.phase == phase:
                return rec.losses
        raise KeyError(phase)


@dataclass(frozen=True)
class DenoiseLossSpec:
    """Squared error on predicted noise, one uniform timestep per draw."""

    loss_kind: str = "squared-error-on-noise"
    timestep_sampling: str = "uniform-1-to-T"
    noise_sampling: str = "standard-normal"
    T: int = 1000


def _draw_noised(backbone: DiffusionBackbone, target_latent: torch.Tensor,
                 rng: np.random.Generator):
    t = int(rng.integers(1, backbone.max_timestep + 1))
    eps = torch.as_tensor(rng.standard_normal(tuple(target_latent.shape)),
                          dtype=target_latent.dtype)
    ab = backbone.alpha_bar(t)
    x_t = (ab ** 0.5) * target_latent + ((1.0 - ab) ** 0.5) * eps
    return t, eps, x_t


def _loss_at(backbone: DiffusionBackbone, e: torch.Tensor, target_latent: torch.Tensor,
             rng: np.random.Generator, context: str = "") -> torch.Tensor:
    t, eps, x_t = _draw_noised(backbone, target_latent, rng)
    pred = backbone.predict_noise(x_t, t, e)
    loss = torch.mean((pred - eps) ** 2)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite denoise loss{context} at t={t}")
    return loss


def denoise_loss(backbone: DiffusionBackbone, state: OptimizationState,
                 target_image: np.ndarray, rng: np.random.Generator,
                 target_latent: torch.Tensor | None = None) -> torch.Tensor:
    """One stochastic estimate of the denoising objective at state.e_optim.

    Draws (t, noise) from rng, noises the encoded target to x_t, and returns
    the mean squared error between the predicted and true noise. The returned
    scalar keeps its autograd graph.
    """
    if target_latent is None:
        target_latent = backbone.encode_image(np.asarray(target_image, dtype=np.float64))
    e = state.e_optim
    if tuple(e.shape) != tuple(backbone.embedding_shape):
        raise ShapeMismatchError("e_optim", tuple(e.shape), tuple(backbone.embedding_shape))
    return _loss_at(backbone, e, target_latent, rng)


def _make_optimizer(params, lr: float, algo: str):
    if algo == "adam":
        return torch.optim.Adam(params, lr=lr)
    if algo == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise PipelineError(f"unknown optimizer algorithm '{algo}'")


def optimize_embedding(backbone: DiffusionBackbone, init_e: torch.Tensor,
                       target_image: np.ndarray, steps: int, lr: float,
                       rng: np.random.Generator, algo: str = "adam",
                       phase: str = "embed"):
    """Gradient-descend the conditioning embedding against the denoise loss.

    Adapters and all backbone weights stay untouched; only the embedding
    moves. Returns (optimized embedding, per-step loss list). lr == 0 is an
    exact identity on the embedding (losses still recorded).
    """
    if steps < 1:
        raise PipelineError(f"steps must be >= 1, got {steps}")
    if tuple(init_e.shape) != tuple(backbone.embedding_shape):
        raise ShapeMismatchError("init_e", tuple(init_e.shape), tuple(backbone.embedding_shape))
    target_latent = backbone.encode_image(np.asarray(target_image, dtype=np.float64))
    e = init_e.detach().clone().requires_grad_(True)
    opt = _make_optimizer([e], lr, algo) if lr != 0.0 else None
    losses = []
    for step in range(steps):
        loss = _loss_at(backbone, e, target_latent, rng, context=f" ({phase} step {step})")
        losses.append(float(loss.detach()))
        if opt is not None:
            opt.zero_grad()
            loss.backward()
            opt.step()
    return e.detach(), losses


def finetune_adapters(backbone: DiffusionBackbone, state: OptimizationState,
                      target_image: np.ndarray, steps: int, lr: float,
                      rng: np.random.Generator, algo: str = "adam",
                      phase: str = "lora") -> OptimizationState:
    """Gradient-descend the low-rank adapters with conditioning pinned to
    state.e_optim. Base weights are checksum-verified unchanged."""
    if steps < 1:
        raise PipelineError(f"steps must be >= 1, got {steps}")
    params = backbone.adapter_parameters()
    if not params:
        raise PipelineError("adapters not initialized on this backbone")
    before = backbone.base_state_hashes()
    target_latent = backbone.encode_image(np.asarray(target_image, dtype=np.float64))
    e = state.e_optim.detach()
    opt = _make_optimizer(params, lr, algo) if lr != 0.0 else None
    losses = []
    for step in range(steps):
        loss = _loss_at(backbone, e, target_latent, rng, context=f" ({phase} step {step})")
        losses.append(float(loss.detach()))
        if opt is not None:
            opt.zero_grad()
            loss.backward()
            opt.step()
    after = backbone.base_state_hashes()
    changed = sorted(k for k in before if before[k] != after.get(k))
    if changed:
        raise FrozenWeightError(f"base weights changed during {phase}: {changed}")
    state.theta_lora = backbone.adapter_state()
    state.phase_log.append(PhaseRecord(phase=phase, losses=losses))
    return state


def run_schedule(backbone: DiffusionBackbone, scene: Scene, guidance: GuidanceImage,
                 cfg: PipelineConfig, rng: np.random.Generator) -> OptimizationState:
    """The four-phase schedule.

    A: optimize the embedding to reconstruct the input image, starting from
       the text encoding of the caption.
    B: fine-tune adapters on the input image under that embedding.
    C: re-optimize the embedding on the guidance view (warm-started from A
       unless configured cold, which restarts from the caption encoding).
    D: continue adapter fine-tuning on the guidance view (a fresh adapter set
       when shared_adapters is off).
    """
    size = cfg.image_size
    input_img = resize_image(scene.image, size)
    view_img = resize_image(guidance.image, size)
    e_text = backbone.encode_text(scene.caption)
    state = OptimizationState(e_optim=e_text)

    def phased(phase, fn):
        try:
            return fn()
        except PipelineError as exc:
            raise type(exc)(f"[phase {phase}] {exc}") from exc

    e_a, losses_a = phased(PHASE_NAMES[0], lambda: optimize_embedding(
        backbone, e_text, input_img, cfg.embed_opt_steps_input, cfg.embed_lr, rng,
        algo=cfg.optim_algo, phase=PHASE_NAMES[0]))
    state.e_optim = e_a
    state.phase_log.append(PhaseRecord(phase=PHASE_NAMES[0], losses=losses_a))

    backbone.init_adapters(cfg.lora_rank, rng)
    phased(PHASE_NAMES[1], lambda: finetune_adapters(
        backbone, state, input_img, cfg.lora_steps_input, cfg.lora_lr, rng,
        algo=cfg.optim_algo, phase=PHASE_NAMES[1]))

    init_c = e_a if cfg.warm_start_embedding else e_text
    e_c, losses_c = phased(PHASE_NAMES[2], lambda: optimize_embedding(
        backbone, init_c, view_img, cfg.embed_opt_steps_view, cfg.embed_lr, rng,
        algo=cfg.optim_algo, phase=PHASE_NAMES[2]))
    state.e_optim = e_c
    state.phase_log.append(PhaseRecord(phase=PHASE_NAMES[2], losses=losses_c))

    if not cfg.shared_adapters:
        backbone.init_adapters(cfg.lora_rank, rng)
    phased(PHASE_NAMES[3], lambda: finetune_adapters(
        backbone, state, view_img, cfg.lora_steps_view, cfg.lora_lr, rng,
        algo=cfg.optim_algo, phase=PHASE_NAMES[3]))
    return state


def reconstruction_error(backbone: DiffusionBackbone, e: torch.Tensor,
                         target_image: np.ndarray, seed: int = 0,
                         n_eval: int = 32) -> float:
    """Deterministic reconstruction proxy: mean denoise loss over a fixed set
    of (timestep, noise) draws, using the backbone's current adapters."""
    rng = seeded_rng(seed, "reconstruction-eval")
    target_latent = backbone.encode_image(np.asarray(target_image, dtype=np.float64))
    total = 0.0
    with torch.no_grad():
        for _ in range(n_eval):
            total += float(_loss_at(backbone, e, target_latent, rng))
    return total / n_eval


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_state(state: OptimizationState, path) -> None:
    """Single-archive checkpoint: embedding + adapters + phase log."""
    arrays = {"e_optim": state.e_optim.detach().numpy()}
    if state.theta_lora:
        for k, v in state.theta_lora.items():
            arrays[f"lora::{k}"] = np.asarray(v)
    log = [{"phase": rec.phase, "losses": list(rec.losses)} for rec in state.phase_log]
    arrays["phase_log_json"] = np.frombuffer(
        json.dumps(log).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_state(path) -> OptimizationState:
    with np.load(Path(path), allow_pickle=False) as data:
        e = torch.as_tensor(data["e_optim"], dtype=torch.float64)
        theta = {k[len("lora::"):]: data[k].copy() for k in data.files if k.startswith("lora::")}
        log_raw = json.loads(data["phase_log_json"].tobytes().decode("utf-8"))
    log = [PhaseRecord(phase=r["phase"], losses=list(r["losses"])) for r in log_raw]
    return OptimizationState(e_optim=e, theta_lora=theta or None, phase_log=log)


def write_loss_csv(state: OptimizationState, path) -> None:
    """Loss curves as `step,phase,loss` with a global 1-based step index."""
    lines = ["step,phase,loss"]
    step = 0
    for rec in state.phase_log:
        for loss in rec.losses:
            step += 1
            lines.append(f"{step},{rec.phase},{loss:.10g}")
    atomic_write_text(path, "\n".join(lines) + "\n")
