"""Diffusion backbone interface plus the built-in tiny deterministic backbone.

The tiny backbone ("mock") is a real denoising model in float64 with a few
hundred parameters: large enough to optimize and sample against, small enough
for finite-difference gradient checks. Adapters attach only to the
cross-attention projections (to_q / to_k / to_v / to_out), mirroring how
low-rank adapters are injected into a full UNet.
"""

from __future__ import annotations

import abc
import hashlib
import math
import re

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    PipelineConfig,
    ShapeMismatchError,
    PipelineError,
    ValidationError,
    seeded_rng,
)


class BackendUnavailableError(PipelineError):
    """A requested backbone/backend cannot run in this environment."""


class NonFiniteLatentError(PipelineError):
    pass


class NoiseSchedule:
    """Forward-noising schedule. alpha_bar(0) = 1; t runs over {1..T}."""

    def __init__(self, max_timestep: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.max_timestep = int(max_timestep)
        betas = np.linspace(beta_start, beta_end, self.max_timestep, dtype=np.float64)
        ab = np.cumprod(1.0 - betas)
        self.alpha_bars = np.concatenate(([1.0], ab))

    def alpha_bar(self, t: int) -> float:
        t = int(t)
        if not 0 <= t <= self.max_timestep:
            raise ValidationError(f"timestep {t} outside [0, {self.max_timestep}]")
        return float(self.alpha_bars[t])

    def noise_to(self, x0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        ab = self.alpha_bar(t)
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


class LoraLinear(torch.nn.Module):
    """Frozen linear layer with an optional low-rank additive adapter.

    Down-projection starts small-normal, up-projection starts at zero, so a
    freshly attached adapter contributes exactly nothing. scale == 0 skips the
    adapter branch entirely, guaranteeing bit-identical base behavior.
    """

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor | None = None):
        super().__init__()
        self.weight = torch.nn.Parameter(weight.detach().clone(), requires_grad=False)
        self.bias = (
            torch.nn.Parameter(bias.detach().clone(), requires_grad=False)
            if bias is not None else None
        )
        self.lora_down: torch.nn.Parameter | None = None
        self.lora_up: torch.nn.Parameter | None = None
        self.scale = 1.0

    def init_adapter(self, rank: int, rng: np.random.Generator, down_std: float = 0.01):
        out_f, in_f = self.weight.shape
        down = rng.standard_normal((rank, in_f)) * down_std
        self.lora_down = torch.nn.Parameter(torch.as_tensor(down, dtype=self.weight.dtype))
        self.lora_up = torch.nn.Parameter(torch.zeros((out_f, rank), dtype=self.weight.dtype))

    def drop_adapter(self):
        self.lora_down = None
        self.lora_up = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if self.lora_down is not None and self.scale != 0.0:
            y = y + self.scale * F.linear(F.linear(x, self.lora_down), self.lora_up)
        return y


class DiffusionBackbone(abc.ABC):
    """Denoiser + text encoder + image codec + schedule, behind one handle."""

    name: str = "abstract"
    version: str = "0"

    @property
    @abc.abstractmethod
    def max_timestep(self) -> int: ...

    @abc.abstractmethod
    def alpha_bar(self, t: int) -> float: ...

    @property
    @abc.abstractmethod
    def latent_shape(self) -> tuple: ...

    @property
    @abc.abstractmethod
    def embedding_shape(self) -> tuple: ...

    @abc.abstractmethod
    def encode_text(self, text: str) -> torch.Tensor:
        """Text -> conditioning embedding (sequence length x embedding dim)."""

    @abc.abstractmethod
    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        """HxWx3 raster in [0,1] -> latent tensor."""

    @abc.abstractmethod
    def decode_latent(self, latent: torch.Tensor, out_size: int | None = None) -> torch.Tensor:
        """Latent -> HxWx3 raster in [0,1]; differentiable."""

    @abc.abstractmethod
    def predict_noise(self, x_t: torch.Tensor, t: int, e: torch.Tensor) -> torch.Tensor: ...

    # -- adapter management ------------------------------------------------

    @abc.abstractmethod
    def init_adapters(self, rank: int, rng: np.random.Generator) -> None: ...

    @abc.abstractmethod
    def adapter_parameters(self) -> list: ...

    @abc.abstractmethod
    def adapter_state(self) -> dict: ...

    @abc.abstractmethod
    def load_adapter_state(self, state: dict) -> None: ...

    @abc.abstractmethod
    def set_adapter_scale(self, scale: float) -> None: ...

    @abc.abstractmethod
    def base_state_hashes(self) -> dict: ...


def _tensor_sha256(t: torch.Tensor) -> str:
    arr = np.ascontiguousarray(t.detach().cpu().numpy())
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
    h.update(arr.tobytes())
    return h.hexdigest()


class ToyTextEncoder:
    """Deterministic hash-seeded token embedder: 8 slots x 8 dims, float64.

    Every distinct token maps to a fixed random vector; positions carry a
    fixed sinusoidal code so word order matters. No trainable state.
    """

    seq_len = 8
    dim = 8
    _token_re = re.compile(r"[+-]?\d+|[a-z]+")

    def __init__(self):
        pos = np.arange(self.seq_len)[:, None].astype(np.float64)
        freq = 2.0 ** np.arange(self.dim // 2)[None, :]
        ang = pos / (self.seq_len * freq)
        self._pos = np.concatenate([np.sin(2 * np.pi * ang), np.cos(2 * np.pi * ang)], axis=1)
        self._cache: dict[str, np.ndarray] = {}

    def _token_vec(self, token: str) -> np.ndarray:
        v = self._cache.get(token)
        if v is None:
            v = seeded_rng(0, f"toy-text-v1:{token}").standard_normal(self.dim)
            self._cache[token] = v
        return v

    def encode(self, text: str) -> torch.Tensor:
        tokens = self._token_re.findall(text.lower())[: self.seq_len]
        out = 0.25 * self._pos.copy()
        for i, tok in enumerate(tokens):
            out[i] += self._token_vec(tok)
        return torch.as_tensor(out, dtype=torch.float64)


class ToyCodec:
    """Pools the image to an 8x8, 4-channel latent through a fixed orthonormal
    channel mix; decode upsamples and squashes back into (0, 1)."""

    latent_channels = 4
    latent_size = 8

    def __init__(self):
        raw = seeded_rng(0, "toy-codec-v1:mix").standard_normal((self.latent_channels, 3))
        q, _ = np.linalg.qr(raw)  # orthonormal columns: q.T @ q == I_3
        self.mix = torch.as_tensor(q, dtype=torch.float64)

    def encode(self, image: np.ndarray) -> torch.Tensor:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeMismatchError("codec encode", getattr(img, "shape", None), "(H, W, 3)")
        with torch.no_grad():
            x = torch.as_tensor(img * 2.0 - 1.0).permute(2, 0, 1)
            pooled = F.adaptive_avg_pool2d(x[None], self.latent_size)[0]
            return torch.einsum("cr,rhw->chw", self.mix, pooled)

    def decode(self, latent: torch.Tensor, out_size: int) -> torch.Tensor:
        if latent.shape != (self.latent_channels, self.latent_size, self.latent_size):
            raise ShapeMismatchError(
                "codec decode", tuple(latent.shape),
                (self.latent_channels, self.latent_size, self.latent_size))
        x = torch.einsum("cr,chw->rhw", self.mix, latent)
        x = F.interpolate(x[None], size=(out_size, out_size), mode="bilinear", align_corners=False)[0]
        return (0.5 * (torch.tanh(2.0 * x) + 1.0)).permute(1, 2, 0)


class ToyBackbone(DiffusionBackbone):
    """A few-hundred-parameter cross-attention denoiser in float64.

    The denoiser sees the latent as 64 spatial tokens, attends into the text
    embedding, and predicts noise per token. Base weights are fixed pretend
    "pretrained" constants (seed-derived, identical for every instance).
    """

    name = "mock"
    version = "toy-1"

    def __init__(self, image_size: int = 64):
        self.image_size = int(image_size)
        self.schedule = NoiseSchedule(1000)
        self.codec = ToyCodec()
        self.text_encoder = ToyTextEncoder()

        def mk(label, shape, std):
            w = seeded_rng(0, f"toy-backbone-weights-v1:{label}").standard_normal(shape) * std
            return torch.nn.Parameter(torch.as_tensor(w, dtype=torch.float64), requires_grad=False)

        d = 8
        self.in_proj_w = mk("in_proj_w", (d, 4), 0.5)
        self.in_proj_b = mk("in_proj_b", (d,), 0.1)
        self.time_proj_w = mk("time_proj_w", (d, 4), 0.5)
        self.time_proj_b = mk("time_proj_b", (d,), 0.1)
        self.to_q = LoraLinear(mk("to_q", (d, d), 0.35))
        self.to_k = LoraLinear(mk("to_k", (d, d), 0.35))
        self.to_v = LoraLinear(mk("to_v", (d, d), 0.35))
        self.to_out = LoraLinear(mk("to_out_w", (d, d), 0.35), bias=mk("to_out_b", (d,), 0.0))
        self.out_proj_w = mk("out_proj_w", (4, d), 0.25)
        self.out_proj_b = mk("out_proj_b", (4,), 0.0)
        self._dim = d

    # -- protocol ----------------------------------------------------------

    @property
    def max_timestep(self) -> int:
        return self.schedule.max_timestep

    def alpha_bar(self, t: int) -> float:
        return self.schedule.alpha_bar(t)

    @property
    def latent_shape(self) -> tuple:
        return (self.codec.latent_channels, self.codec.latent_size, self.codec.latent_size)

    @property
    def embedding_shape(self) -> tuple:
        return (self.text_encoder.seq_len, self.text_encoder.dim)

    def encode_text(self, text: str) -> torch.Tensor:
        return self.text_encoder.encode(text)

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        return self.codec.encode(image)

    def decode_latent(self, latent: torch.Tensor, out_size: int | None = None) -> torch.Tensor:
        return self.codec.decode(latent, out_size or self.image_size)

    def _time_features(self, t: int) -> torch.Tensor:
        tau = 2.0 * math.pi * float(t) / self.max_timestep
        return torch.tensor(
            [math.sin(tau), math.cos(tau), math.sin(4 * tau), math.cos(4 * tau)],
            dtype=torch.float64)

    def predict_noise(self, x_t: torch.Tensor, t: int, e: torch.Tensor) -> torch.Tensor:
        if tuple(x_t.shape) != self.latent_shape:
            raise ShapeMismatchError("latent", tuple(x_t.shape), self.latent_shape)
        if tuple(e.shape) != self.embedding_shape:
            raise ShapeMismatchError("embedding", tuple(e.shape), self.embedding_shape)
        c, hh, ww = self.latent_shape
        tokens = x_t.reshape(c, hh * ww).transpose(0, 1)  # 64 x 4
        h = F.linear(tokens, self.in_proj_w, self.in_proj_b)
        h = h + F.linear(self._time_features(t), self.time_proj_w, self.time_proj_b)
        q = self.to_q(h)
        k = self.to_k(e)
        v = self.to_v(e)
        att = torch.softmax(q @ k.transpose(0, 1) / math.sqrt(self._dim), dim=-1)
        h2 = torch.tanh(h + self.to_out(att @ v))
        eps = F.linear(h2, self.out_proj_w, self.out_proj_b)
        return eps.transpose(0, 1).reshape(c, hh, ww)

    # -- adapters ----------------------------------------------------------

    def _attn_layers(self) -> dict:
        return {"to_q": self.to_q, "to_k": self.to_k, "to_v": self.to_v, "to_out": self.to_out}

    def init_adapters(self, rank: int, rng: np.random.Generator) -> None:
        for layer in self._attn_layers().values():
            layer.init_adapter(rank, rng)
            layer.scale = 1.0

    def adapter_parameters(self) -> list:
        params = []
        for layer in self._attn_layers().values():
            if layer.lora_down is not None:
                params.extend([layer.lora_down, layer.lora_up])
        return params

    def adapter_state(self) -> dict:
        state = {}
        for name, layer in self._attn_layers().items():
            if layer.lora_down is not None:
                state[f"{name}.lora_down"] = layer.lora_down.detach().numpy().copy()
                state[f"{name}.lora_up"] = layer.lora_up.detach().numpy().copy()
        return state

    def load_adapter_state(self, state: dict) -> None:
        layers = self._attn_layers()
        for name, layer in layers.items():
            dk, uk = f"{name}.lora_down", f"{name}.lora_up"
            if dk not in state:
                layer.drop_adapter()
                continue
            down = torch.as_tensor(np.asarray(state[dk]), dtype=torch.float64)
            up = torch.as_tensor(np.asarray(state[uk]), dtype=torch.float64)
            layer.lora_down = torch.nn.Parameter(down.clone())
            layer.lora_up = torch.nn.Parameter(up.clone())
        unknown = set(state) - {f"{n}.{s}" for n in layers for s in ("lora_down", "lora_up")}
        if unknown:
            raise ValidationError(f"unknown adapter entries: {sorted(unknown)}")

    def set_adapter_scale(self, scale: float) -> None:
        for layer in self._attn_layers().values():
            layer.scale = float(scale)

    def base_state_hashes(self) -> dict:
        blocks = {
            "in_proj_w": self.in_proj_w, "in_proj_b": self.in_proj_b,
            "time_proj_w": self.time_proj_w, "time_proj_b": self.time_proj_b,
            "out_proj_w": self.out_proj_w, "out_proj_b": self.out_proj_b,
            "codec.mix": self.codec.mix,
        }
        for name, layer in self._attn_layers().items():
            blocks[f"{name}.weight"] = layer.weight
            if layer.bias is not None:
                blocks[f"{name}.bias"] = layer.bias
        return {name: _tensor_sha256(t) for name, t in blocks.items()}

    def parameter_count(self) -> int:
        n = sum(int(t.numel()) for t in (
            self.in_proj_w, self.in_proj_b, self.time_proj_w, self.time_proj_b,
            self.out_proj_w, self.out_proj_b))
        for layer in self._attn_layers().values():
            n += int(layer.weight.numel())
            if layer.bias is not None:
                n += int(layer.bias.numel())
            if layer.lora_down is not None:
                n += int(layer.lora_down.numel()) + int(layer.lora_up.numel())
        return n


class Sd21Backbone(DiffusionBackbone):
    """Stable Diffusion 2.1 wrapper. Requires diffusers + transformers and the
    pretrained weights on disk; unavailable environments get a clear error."""

    name = "sd21"
    version = "stabilityai/stable-diffusion-2-1-base"

    def __init__(self, image_size: int = 512, device: str | None = None):
        try:
            import diffusers  # noqa: F401
            import transformers  # noqa: F401
        except ImportError as exc:
            raise BackendUnavailableError(
                "backbone 'sd21' needs the diffusers and transformers packages plus "
                "downloaded weights; use '--backbone mock' for a weight-free run"
            ) from exc
        from diffusers import AutoencoderKL, DDPMScheduler, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer

        self.image_size = int(image_size)
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        repo = self.version
        try:
            self.unet = UNet2DConditionModel.from_pretrained(repo, subfolder="unet")
            self.vae = AutoencoderKL.from_pretrained(repo, subfolder="vae")
            self.tokenizer = CLIPTokenizer.from_pretrained(repo, subfolder="tokenizer")
            self.text_model = CLIPTextModel.from_pretrained(repo, subfolder="text_encoder")
            sched = DDPMScheduler.from_pretrained(repo, subfolder="scheduler")
        except Exception as exc:
            raise BackendUnavailableError(f"could not load '{repo}' weights: {exc}") from exc
        self.unet.to(self.device).eval().requires_grad_(False)
        self.vae.to(self.device).eval().requires_grad_(False)
        self.text_model.to(self.device).eval().requires_grad_(False)
        ab = sched.alphas_cumprod.double().cpu().numpy()
        self._alpha_bars = np.concatenate(([1.0], ab))
        self._max_t = len(ab)
        self._lora_layers = self._wrap_cross_attention()

    def _wrap_cross_attention(self) -> dict:
        wrapped = {}
        for name, module in self.unet.named_modules():
            if ".attn2" not in name:
                continue
            for proj in ("to_q", "to_k", "to_v"):
                lin = getattr(module, proj, None)
                if isinstance(lin, torch.nn.Linear):
                    rep = LoraLinear(lin.weight, lin.bias)
                    setattr(module, proj, rep)
                    wrapped[f"{name}.{proj}"] = rep
            out = getattr(module, "to_out", None)
            if out is not None and isinstance(out[0], torch.nn.Linear):
                rep = LoraLinear(out[0].weight, out[0].bias)
                out[0] = rep
                wrapped[f"{name}.to_out"] = rep
        return wrapped

    @property
    def max_timestep(self) -> int:
        return self._max_t

    def alpha_bar(self, t: int) -> float:
        return float(self._alpha_bars[int(t)])

    @property
    def latent_shape(self) -> tuple:
        return (4, self.image_size // 8, self.image_size // 8)

    @property
    def embedding_shape(self) -> tuple:
        return (self.tokenizer.model_max_length, self.text_model.config.hidden_size)

    def encode_text(self, text: str) -> torch.Tensor:
        ids = self.tokenizer(
            text, padding="max_length", truncation=True,
            max_length=self.tokenizer.model_max_length, return_tensors="pt",
        ).input_ids.to(self.device)
        with torch.no_grad():
            return self.text_model(ids).last_hidden_state[0]

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(image, dtype=np.float32) * 2.0 - 1.0)
        x = x.permute(2, 0, 1)[None].to(self.device)
        with torch.no_grad():
            lat = self.vae.encode(x).latent_dist.mean[0]
        return lat * self.vae.config.scaling_factor

    def decode_latent(self, latent: torch.Tensor, out_size: int | None = None) -> torch.Tensor:
        img = self.vae.decode((latent / self.vae.config.scaling_factor)[None]).sample[0]
        img = (img.clamp(-1.0, 1.0) + 1.0) / 2.0
        if out_size is not None and img.shape[-1] != out_size:
            img = F.interpolate(img[None], size=(out_size, out_size),
                                mode="bilinear", align_corners=False)[0]
        return img.permute(1, 2, 0)

    def predict_noise(self, x_t: torch.Tensor, t: int, e: torch.Tensor) -> torch.Tensor:
        ts = torch.tensor([int(t)], device=self.device)
        return self.unet(x_t[None], ts, encoder_hidden_states=e[None]).sample[0]

    def init_adapters(self, rank: int, rng: np.random.Generator) -> None:
        for layer in self._lora_layers.values():
            layer.init_adapter(rank, rng)
            layer.scale = 1.0

    def adapter_parameters(self) -> list:
        params = []
        for layer in self._lora_layers.values():
            if layer.lora_down is not None:
                params.extend([layer.lora_down, layer.lora_up])
        return params

    def adapter_state(self) -> dict:
        state = {}
        for name, layer in self._lora_layers.items():
            if layer.lora_down is not None:
                state[f"{name}.lora_down"] = layer.lora_down.detach().cpu().numpy().copy()
                state[f"{name}.lora_up"] = layer.lora_up.detach().cpu().numpy().copy()
        return state

    def load_adapter_state(self, state: dict) -> None:
        for name, layer in self._lora_layers.items():
            dk = f"{name}.lora_down"
            if dk in state:
                layer.lora_down = torch.nn.Parameter(
                    torch.as_tensor(np.asarray(state[dk]), dtype=layer.weight.dtype,
                                    device=layer.weight.device))
                layer.lora_up = torch.nn.Parameter(
                    torch.as_tensor(np.asarray(state[f"{name}.lora_up"]), dtype=layer.weight.dtype,
                                    device=layer.weight.device))

    def set_adapter_scale(self, scale: float) -> None:
        for layer in self._lora_layers.values():
            layer.scale = float(scale)

    def base_state_hashes(self) -> dict:
        hashes = {}
        for name, p in self.unet.named_parameters():
            if "lora" not in name:
                hashes[f"unet.{name}"] = _tensor_sha256(p)
        return hashes


_BACKBONES = {
    "mock": lambda cfg: ToyBackbone(image_size=cfg.image_size),
    "sd21": lambda cfg: Sd21Backbone(image_size=cfg.image_size),
}


def create_backbone(name: str, cfg: PipelineConfig | None = None) -> DiffusionBackbone:
    cfg = cfg or PipelineConfig()
    try:
        factory = _BACKBONES[name]
    except KeyError:
        raise ValidationError(
            f"unknown backbone '{name}' (available: {sorted(_BACKBONES)})") from None
    return factory(cfg)
