"""Caption acquisition and view-conditioned target prompt construction."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .core import (
    PipelineError,
    ValidationError,
    ViewSpec,
    format_angle,
    image_png_bytes,
)


class CaptionerUnavailableError(ValidationError):
    pass


class EmptyCaptionError(ValidationError):
    pass


class CaptionerError(PipelineError):
    """The external captioning client failed after all retries."""


@dataclass(frozen=True)
class PromptSpec:
    """Source caption plus the view-conditioned target prompt built from it."""

    source_text: str
    target_text: str
    view_prefix: str
    view: ViewSpec

    def __post_init__(self):
        if not self.view_prefix:
            raise ValidationError("view_prefix must be non-empty")
        expected = f"{self.view_prefix}, {self.source_text}"
        if self.target_text != expected:
            raise ValidationError(
                f"target_text must equal view_prefix + ', ' + source_text; got {self.target_text!r}")


def build_view_prefix(view: ViewSpec) -> str:
    """Render the view clause. Elevation keeps an explicit +/- sign; azimuth is
    a non-negative integer and always takes '+'."""
    sign = "-" if view.elevation_deg < 0 else "+"
    elev = format_angle(abs(view.elevation_deg))
    azi = int(round(view.azimuth_deg)) % 360
    return (f"View from an elevated angle of {sign}{elev} degrees "
            f"and an azimuth angle of +{azi} degrees")


def build_target_prompt(view: ViewSpec, source_text: str) -> PromptSpec:
    source = str(source_text).strip()
    if not source:
        raise EmptyCaptionError("source text is empty")
    prefix = build_view_prefix(view)
    return PromptSpec(
        source_text=source,
        target_text=f"{prefix}, {source}",
        view_prefix=prefix,
        view=view,
    )


class MockCaptioner:
    """Offline stand-in for an image-captioning service."""

    def __init__(self, text: str = "a photographed scene"):
        self.text = text
        self.calls = 0

    def caption(self, png_bytes: bytes, timeout_s: float) -> str:
        self.calls += 1
        return self.text


class RetryingCaptioner:
    """Serializes calls to a captioning client and retries transient failures.

    The client contract is caption(png_bytes, timeout_s) -> text; the client
    itself is responsible for honoring the timeout.
    """

    def __init__(self, client, timeout_s: float = 30.0, retries: int = 2):
        if timeout_s <= 0:
            raise ValidationError("captioner timeout_s must be > 0")
        if retries < 0:
            raise ValidationError("captioner retries must be >= 0")
        self.client = client
        self.timeout_s = float(timeout_s)
        self.retries = int(retries)
        self._lock = threading.Lock()

    def caption_image(self, image: np.ndarray) -> str:
        png = image_png_bytes(image)
        last = None
        with self._lock:
            for _ in range(self.retries + 1):
                try:
                    return str(self.client.caption(png, self.timeout_s))
                except Exception as exc:
                    last = exc
        raise CaptionerError(
            f"captioner failed after {self.retries + 1} attempts: {last}") from last


def acquire_caption(scene_image: np.ndarray, provided: str | None = None,
                    captioner=None) -> str:
    """User-provided caption wins; otherwise ask the captioning client.

    The captioner argument is any object with caption_image(image) -> text
    (RetryingCaptioner wraps raw clients into that shape).
    """
    if provided is None and captioner is None:
        raise CaptionerUnavailableError(
            "no caption source: pass a caption or configure a captioning client")
    if provided is not None:
        text = str(provided).strip()
        if text:
            return text
    if captioner is not None:
        text = str(captioner.caption_image(scene_image)).strip()
        if text:
            return text
    raise EmptyCaptionError("every caption source produced empty text")
