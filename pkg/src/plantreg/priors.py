"""Level-prompt text priors and the auxiliary camera-level regressor.

Five fixed prompts ("a plant at approximately level 1" .. "level 5") map to
512-d text embeddings kept in a lookup table. Fusion requires unit-norm
priors, so lookup refuses unnormalized tables. When level metadata are
missing at inference, a small MLP predicts the level from the group's mean
visual embedding; its continuous output is quantized round-half-up and
clamped into 1..5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio, nn, store
from .store import EMBED_DIM, LEVELS

PROMPT_TEMPLATE = "a plant at approximately level {level}"
PRIORS_KIND = "level_priors"
PRIORS_BASE_SUFFIX = ".priors"

# Camera-level regressor: 512-d mean embedding -> scalar level.
LEVEL_REGRESSOR_LAYERS = (512, 1024, 512, 64, 1)
LEVEL_REGRESSOR_EPOCHS = 60

_NORM_TOL = 1e-6


class PriorTableError(ValueError):
    """Prior file or table violates the five-level contract."""


def prompt_for_level(level: int) -> str:
    """Exact prompt string for a camera height level in 1..5."""
    if not isinstance(level, (int, np.integer)) or isinstance(level, bool):
        raise ValueError(f"level must be an integer, got {level!r}")
    if level not in LEVELS:
        raise ValueError(f"level {level} out of range 1..5")
    return PROMPT_TEMPLATE.format(level=int(level))


@dataclass
class PriorTable:
    """Embeddings for the five level prompts, ordered by level."""

    prompts: tuple[str, ...]
    embeddings: np.ndarray  # (5, 512) float32
    normalized: bool = False

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if len(self.prompts) != len(LEVELS):
            raise PriorTableError(
                f"expected {len(LEVELS)} prompts, got {len(self.prompts)}"
            )
        if self.embeddings.shape != (len(LEVELS), EMBED_DIM):
            raise PriorTableError(
                f"expected embeddings of shape ({len(LEVELS)}, {EMBED_DIM}), "
                f"got {self.embeddings.shape}"
            )
        for level, prompt in zip(LEVELS, self.prompts):
            expected = prompt_for_level(level)
            if prompt != expected:
                raise PriorTableError(
                    f"prompt for level {level} is {prompt!r}, expected {expected!r}"
                )


@dataclass(frozen=True)
class LevelEstimate:
    """Raw regressor output and its quantized 1..5 lookup key."""

    continuous: float
    quantized: int


def quantize_level(continuous: float) -> int:
    """Round half up, then clamp into 1..5; total on all finite reals."""
    value = float(continuous)
    if not math.isfinite(value):
        raise ValueError(f"cannot quantize non-finite level {value}")
    return int(min(max(math.floor(value + 0.5), 1), 5))


def normalize_priors(table: PriorTable) -> PriorTable:
    """Return a copy whose embeddings are divided by their L2 norms."""
    norms = np.linalg.norm(table.embeddings.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        zero_levels = [LEVELS[i] for i in np.nonzero(norms == 0.0)[0]]
        raise PriorTableError(f"zero-norm prior embedding for level(s) {zero_levels}")
    normalized = (table.embeddings.astype(np.float64) / norms[:, None]).astype(
        np.float32
    )
    return PriorTable(prompts=table.prompts, embeddings=normalized, normalized=True)


def lookup_prior(table: PriorTable, level: int) -> np.ndarray:
    """Fetch the stored unit prior for *level*; no recomputation.

    Raises:
        ValueError: table is not normalized (fusion requires unit priors),
            or *level* is out of range.
    """
    if level not in LEVELS:
        raise ValueError(f"level {level} out of range 1..5")
    if not table.normalized:
        raise ValueError("prior table is not normalized; call normalize_priors first")
    return table.embeddings[int(level) - 1].copy()


def save_priors(table: PriorTable, base: str | Path) -> None:
    """Write ``<base>.priors.manifest.json`` + ``<base>.priors.f32bin``."""
    manifest = {
        "kind": PRIORS_KIND,
        "version": fileio.FORMAT_VERSION,
        "dim": EMBED_DIM,
        "count": len(LEVELS),
        "levels": list(LEVELS),
        "prompts": list(table.prompts),
        "normalized": bool(table.normalized),
    }
    fileio.write_pair(str(base) + PRIORS_BASE_SUFFIX, manifest, table.embeddings)


def load_priors(base: str | Path) -> PriorTable:
    """Load a prior table, validating count, dimension, and prompt text."""
    manifest, matrix = fileio.read_pair(
        str(base) + PRIORS_BASE_SUFFIX, PRIORS_KIND, EMBED_DIM
    )
    prompts = manifest.get("prompts", [])
    if len(prompts) != len(LEVELS) or matrix.shape[0] != len(LEVELS):
        raise PriorTableError(
            f"{base}: prior file must hold exactly {len(LEVELS)} entries, "
            f"got {matrix.shape[0]} rows / {len(prompts)} prompts"
        )
    table = PriorTable(
        prompts=tuple(str(p) for p in prompts),
        embeddings=matrix,
        normalized=bool(manifest.get("normalized", False)),
    )
    if table.normalized:
        norms = np.linalg.norm(table.embeddings.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise PriorTableError(
                f"{base}: manifest claims normalized priors but norms are {norms}"
            )
    return table


def group_mean_embeddings(
    cache: store.EmbeddingCache,
) -> tuple[np.ndarray, np.ndarray, list[store.LevelGroup]]:
    """Mean embedding and level target per (crop, plant, day, level) group.

    Multiple views of the same group are averaged before training or
    prediction, matching how the level regressor is used at eval time.
    """
    from . import fusion  # deferred: fusion imports this module

    groups = store.group_by_level(cache)
    if not groups:
        raise ValueError("cache has no records to group")
    means = np.stack(
        [fusion.aggregate_views(cache.matrix[group.rows]) for group in groups]
    )
    levels = np.array([[group.level] for group in groups], dtype=np.float32)
    return means, levels, groups


def train_level_regressor(
    cache: store.EmbeddingCache, config=None
) -> tuple[nn.MlpModel, list[dict]]:
    """Train the level MLP on group-mean embeddings with MSE to true levels.

    Defaults: lr 0.001, batch 64, 60 epochs, seeded shuffling. Pass a
    fusion ``TrainConfig`` to override (note the fusion default of 10
    epochs applies only to the fusion regressors, not here).
    """
    from . import fusion

    if config is None:
        config = fusion.TrainConfig(epochs=LEVEL_REGRESSOR_EPOCHS)
    means, levels, _ = group_mean_embeddings(cache)
    model = nn.init_params(nn.MlpSpec(LEVEL_REGRESSOR_LAYERS), config.seed)

    def level_loss(pred: np.ndarray, target: np.ndarray):
        loss, grad = nn.mse_loss(pred[:, 0], target[:, 0])
        return loss, {}, grad[:, None].astype(np.float32)

    history = nn.fit(
        model,
        means,
        levels,
        level_loss,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        epochs=config.epochs,
        seed=config.seed,
        shuffle=config.shuffle,
    )
    return model, history


def predict_level(regressor: nn.MlpModel, mean_embedding: np.ndarray) -> LevelEstimate:
    """Estimate the camera level from a group's mean visual embedding."""
    mean_embedding = np.asarray(mean_embedding, dtype=np.float32)
    if mean_embedding.shape != (regressor.spec.input_size,):
        raise ValueError(
            f"mean embedding has shape {mean_embedding.shape}, regressor "
            f"expects ({regressor.spec.input_size},)"
        )
    output, _ = nn.forward(regressor, mean_embedding)
    continuous = float(output[0])
    return LevelEstimate(continuous=continuous, quantized=quantize_level(continuous))
