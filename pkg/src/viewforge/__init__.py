"""Camera-controlled novel view synthesis from a single image: a coarse
guidance view from a pluggable synthesis backend steers inference-time
optimization of a diffusion backbone, followed by guided sampling and a
six-metric evaluation harness."""

from .core import (
    GenerationResult,
    InvalidFieldError,
    PipelineConfig,
    PipelineError,
    Scene,
    ShapeMismatchError,
    ValidationError,
    ViewSpec,
    load_config,
    parse_config_text,
    seeded_rng,
    serialize_config,
    validate_config,
)
from .backbone import DiffusionBackbone, ToyBackbone, create_backbone
from .guidance import (
    GuidanceImage,
    NvsBackend,
    create_nvs_backend,
    default_supported_views,
    snap_view,
    synthesize_guidance,
)
from .prompts import PromptSpec, acquire_caption, build_target_prompt, build_view_prefix
from .optim import (
    DenoiseLossSpec,
    OptimizationState,
    denoise_loss,
    finetune_adapters,
    optimize_embedding,
    run_schedule,
)
from .sampling import (
    MiGuidanceSpec,
    generate,
    guided_step,
    mutual_information,
    soft_histogram,
)
from .metrics import (
    EmbeddingSpace,
    MetricReport,
    clip_d,
    clip_i,
    clip_score,
    compute_scene_metrics,
    directional_similarity,
    emit_report,
    lpips_distance,
    view_clip_d,
    view_clip_score,
)
from .harness import (
    DatasetManifest,
    RunPlan,
    load_manifest,
    run_batch,
    validation_split,
)

__version__ = "0.1.0"
