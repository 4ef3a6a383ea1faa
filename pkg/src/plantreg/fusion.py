"""View aggregation, visual-text fusion, and the two multi-task regressors.

The unimodal model consumes one 512-d image embedding at a time. The
multimodal model first averages a level group's views into an
angle-invariant 512-d representation, concatenates the unit-norm text
prior for the group's camera level (from metadata, or from the auxiliary
level regressor when metadata are missing), and regresses age and leaf
count from the fused 1024-d vector. Both models share a two-output final
linear layer trained with the summed per-head MSE.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn, priors, store
from .store import EMBED_DIM

FUSED_DIM = 2 * EMBED_DIM

UNIMODAL_LAYERS = (512, 1024, 512, 64, 2)
MULTIMODAL_LAYERS = (1024, 2048, 1024, 512, 64, 2)

LEVEL_SOURCE_METADATA = "metadata"
LEVEL_SOURCE_REGRESSOR = "regressor"

_UNIT_TOL = 1e-4


@dataclass
class TrainConfig:
    """Optimization settings; defaults mirror the standard recipe
    (lr 0.001, batch 64, 10 epochs)."""

    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "shuffle": self.shuffle,
        }


@dataclass
class AggregatedSample:
    """One level group collapsed to its mean embedding plus targets."""

    key: tuple[str, int, int, int]  # (crop, plant_id, day, level)
    visual: np.ndarray  # (512,) float32
    view_count: int
    age: float
    leaf_count: float

    @property
    def crop(self) -> str:
        return self.key[0]

    @property
    def level(self) -> int:
        return self.key[3]


@dataclass
class FusedSample:
    """Audit trail of one multimodal prediction's fused input."""

    fused: np.ndarray  # (1024,) float32
    level_used: int
    level_source: str

    @property
    def visual(self) -> np.ndarray:
        return self.fused[:EMBED_DIM]

    @property
    def text_prior(self) -> np.ndarray:
        return self.fused[EMBED_DIM:]


@dataclass(frozen=True)
class Prediction:
    age: float
    leaf_count: float


def aggregate_views(views) -> np.ndarray:
    """Element-wise mean of the provided view embeddings, in list order.

    Accepts a 2-D ``(n, d)`` array or a sequence of equal-length vectors.
    Summation runs in float64 before the float32 cast, so any permutation
    of the same views agrees to well under 1e-5 per coordinate, and a
    fixed order reproduces bit-exactly. Fewer than 24 views are averaged
    over what is present; that is what makes missing views survivable.
    """
    try:
        array = np.asarray(views, dtype=np.float32)
    except ValueError:
        raise ValueError("views have mixed dimensions") from None
    if array.size == 0:
        raise ValueError("aggregate_views needs at least one view")
    if array.ndim != 2:
        raise ValueError(
            f"views must be a sequence of equal-length vectors, got shape "
            f"{array.shape}"
        )
    return array.mean(axis=0, dtype=np.float64).astype(np.float32)


def fuse(visual: np.ndarray, text_prior: np.ndarray) -> np.ndarray:
    """Concatenate visual features and a unit text prior, visual first."""
    visual = np.asarray(visual, dtype=np.float32)
    text_prior = np.asarray(text_prior, dtype=np.float32)
    if visual.shape != (EMBED_DIM,):
        raise ValueError(f"visual part has shape {visual.shape}, expected ({EMBED_DIM},)")
    if text_prior.shape != (EMBED_DIM,):
        raise ValueError(
            f"text prior has shape {text_prior.shape}, expected ({EMBED_DIM},)"
        )
    norm = float(np.linalg.norm(text_prior.astype(np.float64)))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise ValueError(f"text prior must be unit-norm, got norm {norm:.6f}")
    return np.concatenate([visual, text_prior])


def split_fused(fused: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recover (visual, text prior) from a fused vector, bit-exactly."""
    fused = np.asarray(fused)
    if fused.shape != (FUSED_DIM,):
        raise ValueError(f"fused vector has shape {fused.shape}, expected ({FUSED_DIM},)")
    return fused[:EMBED_DIM].copy(), fused[EMBED_DIM:].copy()


def _as_pred_array(preds, what: str) -> np.ndarray:
    if isinstance(preds, np.ndarray):
        array = preds.astype(np.float64)
    else:
        rows = []
        for p in preds:
            if isinstance(p, Prediction):
                rows.append((p.age, p.leaf_count))
            else:
                rows.append(tuple(p))
        array = np.asarray(rows, dtype=np.float64)
    if array.ndim != 2 or array.shape[1] != 2:
        raise ValueError(f"{what} must be (n, 2)-shaped, got {array.shape}")
    return array


def composite_loss(preds, targets) -> tuple[float, tuple[float, float]]:
    """Summed per-head MSE: MSE(age) + MSE(leaf_count).

    Returns the total and the two components for logging.
    """
    pred = _as_pred_array(preds, "predictions")
    target = _as_pred_array(targets, "targets")
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise ValueError("composite_loss on empty input")
    age_mse, _ = nn.mse_loss(pred[:, 0], target[:, 0])
    leaf_mse, _ = nn.mse_loss(pred[:, 1], target[:, 1])
    return age_mse + leaf_mse, (age_mse, leaf_mse)


def composite_loss_grad(
    pred: np.ndarray, target: np.ndarray
) -> tuple[float, dict, np.ndarray]:
    """Batch form used by the training loop; gradient is wrt predictions."""
    pred64 = pred.astype(np.float64)
    target64 = target.astype(np.float64)
    diff = pred64 - target64
    n = pred64.shape[0]
    age_mse = float(np.mean(diff[:, 0] ** 2))
    leaf_mse = float(np.mean(diff[:, 1] ** 2))
    grad = (2.0 * diff / n).astype(np.float32)
    return age_mse + leaf_mse, {"age_mse": age_mse, "leaf_mse": leaf_mse}, grad


def samples_from_cache(
    cache: store.EmbeddingCache, groups: Sequence[store.LevelGroup] | None = None
) -> list[AggregatedSample]:
    """Aggregate every level group of *cache* into training/eval samples.

    The age target is the group's day; the leaf target comes from the
    group's first record in angle order (annotations are per plant-day, so
    views agree except in upstream data errors).
    """
    if groups is None:
        groups = store.group_by_level(cache)
    by_row = {record.embedding_row: record for record in cache.records}
    samples = []
    for group in groups:
        first = by_row[group.rows[0]]
        samples.append(
            AggregatedSample(
                key=group.key,
                visual=aggregate_views(cache.matrix[group.rows]),
                view_count=len(group.rows),
                age=float(group.day),
                leaf_count=float(first.leaf_count),
            )
        )
    return samples


def fuse_with_metadata_level(
    samples: Sequence[AggregatedSample], prior_table: priors.PriorTable
) -> np.ndarray:
    """Fused training inputs, pairing each sample with its known level."""
    return np.stack(
        [
            fuse(sample.visual, priors.lookup_prior(prior_table, sample.level))
            for sample in samples
        ]
    )


def predict_unimodal(model: nn.MlpModel, embedding: np.ndarray) -> Prediction:
    """Run the image-only regressor on a single embedding."""
    embedding = np.asarray(embedding, dtype=np.float32)
    if model.spec.output_size != 2:
        raise ValueError(
            f"unimodal model must have 2 outputs, got {model.spec.output_size}"
        )
    output, _ = nn.forward(model, embedding)
    return Prediction(age=float(output[0]), leaf_count=float(output[1]))


def multimodal_forward(
    model: nn.MlpModel,
    mean_embedding: np.ndarray,
    level: int,
    prior_table: priors.PriorTable,
    level_source: str,
) -> tuple[Prediction, FusedSample]:
    """Fuse an aggregated embedding with its level prior and regress."""
    if model.spec.output_size != 2:
        raise ValueError(
            f"multimodal model must have 2 outputs, got {model.spec.output_size}"
        )
    fused = fuse(mean_embedding, priors.lookup_prior(prior_table, level))
    output, _ = nn.forward(model, fused)
    prediction = Prediction(age=float(output[0]), leaf_count=float(output[1]))
    return prediction, FusedSample(fused=fused, level_used=int(level), level_source=level_source)


def predict_multimodal(
    model: nn.MlpModel,
    group: store.LevelGroup,
    cache: store.EmbeddingCache,
    prior_table: priors.PriorTable,
    level_source: str = LEVEL_SOURCE_METADATA,
    level_model: nn.MlpModel | None = None,
    rows: Sequence[int] | None = None,
) -> tuple[Prediction, FusedSample]:
    """Full multimodal pipeline for one level group.

    ``aggregate -> level (metadata or regressor) -> prior lookup -> fuse ->
    forward``. *rows* restricts aggregation to a subset of the group's
    matrix rows (used by the view-removal harness); it defaults to all
    views. When the regressor path quantizes to the true level, the fused
    vector and prediction are bit-identical to the metadata path.
    """
    use_rows = list(group.rows) if rows is None else list(rows)
    if not use_rows:
        raise ValueError(f"group {group.key} has no views to aggregate")
    mean_embedding = aggregate_views(cache.matrix[use_rows])
    if level_source == LEVEL_SOURCE_METADATA:
        level = group.level
    elif level_source == LEVEL_SOURCE_REGRESSOR:
        if level_model is None:
            raise ValueError("level_source='regressor' requires a level_model")
        level = priors.predict_level(level_model, mean_embedding).quantized
    else:
        raise ValueError(f"unknown level_source {level_source!r}")
    return multimodal_forward(model, mean_embedding, level, prior_table, level_source)


def train_model(
    mode: str,
    cache: store.EmbeddingCache,
    config: TrainConfig,
    prior_table: priors.PriorTable | None = None,
    record_indices: Sequence[int] | None = None,
) -> tuple[nn.MlpModel, list[dict]]:
    """Train the unimodal or multimodal regressor on (part of) a cache.

    The unimodal model sees each image independently; the multimodal model
    sees one fused sample per level group, built with metadata levels
    (training-time levels are known). *record_indices* selects the training
    records (e.g. the train side of a plant split); level groups must be
    entirely inside the selection.

    Returns the trained model and the per-epoch loss history.
    """
    if record_indices is None:
        record_indices = range(len(cache.records))
    index_set = set(record_indices)
    if not index_set:
        raise ValueError("empty training set")

    if mode == "unimodal":
        rows = [cache.records[i].embedding_row for i in sorted(index_set)]
        inputs = cache.matrix[rows]
        targets = np.array(
            [
                (cache.records[i].day, cache.records[i].leaf_count)
                for i in sorted(index_set)
            ],
            dtype=np.float32,
        )
        spec = nn.MlpSpec(UNIMODAL_LAYERS)
    elif mode == "multimodal":
        if prior_table is None:
            raise ValueError("multimodal training requires a prior table")
        selected_rows = {cache.records[i].embedding_row for i in index_set}
        groups = []
        for group in store.group_by_level(cache):
            inside = sum(1 for r in group.rows if r in selected_rows)
            if inside == len(group.rows):
                groups.append(group)
            elif inside != 0:
                raise ValueError(
                    f"group {group.key} is split by record_indices; plant "
                    "splits must keep groups whole"
                )
        samples = samples_from_cache(cache, groups)
        if not samples:
            raise ValueError("empty training set")
        inputs = fuse_with_metadata_level(samples, prior_table)
        targets = np.array(
            [(s.age, s.leaf_count) for s in samples], dtype=np.float32
        )
        spec = nn.MlpSpec(MULTIMODAL_LAYERS)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    model = nn.init_params(spec, config.seed)
    history = nn.fit(
        model,
        inputs,
        targets,
        composite_loss_grad,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        epochs=config.epochs,
        seed=config.seed,
        shuffle=config.shuffle,
    )
    return model, history
