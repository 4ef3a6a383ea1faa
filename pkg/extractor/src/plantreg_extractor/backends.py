"""Detector and encoder backends.

Two interchangeable implementations: ``PretrainedBackend`` wraps the
text-prompted grounding detector and the vision-language encoder from
``transformers`` (weights download on first use), and ``StubBackend`` is
a fully deterministic, dependency-light stand-in (border-contrast box
finder plus a fixed random projection) for tests and offline pipelines.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from .formats import EMBED_DIM


class ModelUnavailableError(RuntimeError):
    """A pretrained model could not be imported or loaded."""


@dataclass(frozen=True)
class DetectionBox:
    x0: float
    y0: float
    x1: float
    y1: float
    score: float
    label: str


class Detector(Protocol):
    def detect(self, image: Image.Image, prompts: Sequence[str]) -> list[DetectionBox]:
        ...


class Encoder(Protocol):
    def encode_images(self, images: Sequence[Image.Image]) -> np.ndarray:
        ...

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        ...


class StubBackend:
    """Deterministic detector + encoder with no model downloads.

    Detection finds the bounding box of pixels that contrast with the
    image border (uniform images yield no detection, exercising the
    full-frame fallback). Encoding is a fixed seeded random projection of
    a 16x16 downsample, so equal images always embed identically.
    """

    _PROJECTION_SEED = 0x51AB
    _CONTRAST = 12.0  # mean absolute channel difference vs border color

    def __init__(self) -> None:
        rng = np.random.default_rng(self._PROJECTION_SEED)
        self._projection = rng.standard_normal((16 * 16 * 3, EMBED_DIM)).astype(
            np.float32
        ) / np.sqrt(16 * 16 * 3)

    def detect(self, image: Image.Image, prompts: Sequence[str]) -> list[DetectionBox]:
        pixels = np.asarray(image.convert("RGB"), dtype=np.float32)
        border = np.concatenate(
            [pixels[0], pixels[-1], pixels[:, 0], pixels[:, -1]]
        )
        background = np.median(border, axis=0)
        contrast = np.abs(pixels - background).mean(axis=2)
        mask = contrast > self._CONTRAST
        if not mask.any():
            return []
        ys, xs = np.nonzero(mask)
        label = prompts[0] if prompts else "object"
        return [
            DetectionBox(
                x0=float(xs.min()),
                y0=float(ys.min()),
                x1=float(xs.max() + 1),
                y1=float(ys.max() + 1),
                score=0.9,
                label=label,
            )
        ]

    def encode_images(self, images: Sequence[Image.Image]) -> np.ndarray:
        rows = []
        for image in images:
            small = image.convert("RGB").resize((16, 16), Image.BILINEAR)
            flat = np.asarray(small, dtype=np.float32).reshape(-1) / 255.0
            rows.append(flat @ self._projection)
        return np.stack(rows).astype(np.float32)

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for text in texts:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            rng = np.random.default_rng(seed)
            rows.append(rng.standard_normal(EMBED_DIM).astype(np.float32))
        return np.stack(rows)


class PretrainedBackend:
    """Grounding detector + vision-language encoder via ``transformers``.

    Both models are loaded lazily on first use; import or download
    failures surface as :class:`ModelUnavailableError`.
    """

    def __init__(
        self,
        encoder_name: str = "openai/clip-vit-base-patch32",
        detector_name: str = "IDEA-Research/grounding-dino-tiny",
        device: str = "cpu",
    ) -> None:
        self.encoder_name = encoder_name
        self.detector_name = detector_name
        self.device = device
        self._encoder = None
        self._detector = None

    def _load_encoder(self):
        if self._encoder is None:
            try:
                import torch  # noqa: F401
                from transformers import CLIPModel, CLIPProcessor

                model = CLIPModel.from_pretrained(self.encoder_name).to(self.device)
                model.eval()
                processor = CLIPProcessor.from_pretrained(self.encoder_name)
            except Exception as exc:
                raise ModelUnavailableError(
                    f"missing models: cannot load encoder {self.encoder_name!r}: {exc}"
                ) from exc
            self._encoder = (model, processor)
        return self._encoder

    def _load_detector(self):
        if self._detector is None:
            try:
                import torch  # noqa: F401
                from transformers import (
                    AutoProcessor,
                    GroundingDinoForObjectDetection,
                )

                model = GroundingDinoForObjectDetection.from_pretrained(
                    self.detector_name
                ).to(self.device)
                model.eval()
                processor = AutoProcessor.from_pretrained(self.detector_name)
            except Exception as exc:
                raise ModelUnavailableError(
                    f"missing models: cannot load detector {self.detector_name!r}: {exc}"
                ) from exc
            self._detector = (model, processor)
        return self._detector

    def detect(self, image: Image.Image, prompts: Sequence[str]) -> list[DetectionBox]:
        import torch

        model, processor = self._load_detector()
        text = ". ".join(prompts) + "."
        inputs = processor(images=image, text=text, return_tensors="pt").to(self.device)
        with torch.no_grad():
            outputs = model(**inputs)
        results = processor.post_process_grounded_object_detection(
            outputs,
            inputs["input_ids"],
            target_sizes=[image.size[::-1]],
        )[0]
        boxes = []
        for box, score, label in zip(
            results["boxes"], results["scores"], results["labels"]
        ):
            x0, y0, x1, y1 = (float(v) for v in box)
            boxes.append(
                DetectionBox(x0=x0, y0=y0, x1=x1, y1=y1, score=float(score), label=str(label))
            )
        return boxes

    def encode_images(self, images: Sequence[Image.Image]) -> np.ndarray:
        import torch

        model, processor = self._load_encoder()
        inputs = processor(images=list(images), return_tensors="pt").to(self.device)
        with torch.no_grad():
            features = model.get_image_features(**inputs)
        return features.cpu().numpy().astype(np.float32)

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        import torch

        model, processor = self._load_encoder()
        inputs = processor(text=list(texts), return_tensors="pt", padding=True).to(
            self.device
        )
        with torch.no_grad():
            features = model.get_text_features(**inputs)
        return features.cpu().numpy().astype(np.float32)


BACKENDS = {"stub": StubBackend, "pretrained": PretrainedBackend}


def make_backend(name: str, **kwargs):
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r} (expected {sorted(BACKENDS)})")
    return BACKENDS[name](**kwargs)
