"""Per-location multi-class segmentation trained on sampled points only.

The classifier is a hidden-ReLU-(C+1) per-location network over features
augmented with a per-image global descriptor (the L2-normalized spatial mean
of the unit feature grid, replicated at every location). Training touches
only the sparse sampled points; it never sees ground-truth masks. Growing the
class universe re-instantiates and retrains just this head, leaving all
localization models alone.

Label spaces: sampled points carry class ids with -1 for background; the
model maps ids onto output indices via its ordered class universe, with
background always the last index.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .localization import (
    LocalizationModel,
    LocConfig,
    LocTrainResult,
    score_image,
    train_localizer,
)
from .nn import (
    AdamState,
    LinearLayer,
    adam_step,
    init_linear,
    linear_backward,
    linear_fwd,
    masked_ce_loss_and_grad,
    relu,
    relu_backward,
)
from .rng import Rng, derive_seed
from .sampling import (
    BACKGROUND,
    SampledPoint,
    SamplingConfig,
    SupervisionRecord,
    sample_image,
)
from .tensor import FeatureGrid, Grid, NormState, l2_normalize_locations


@dataclass(frozen=True)
class AugmentedFeatureGrid:
    """Unit feature grid with the image-level descriptor appended per location."""

    grid: Grid  # depth = base depth + global_dim
    global_dim: int

    @property
    def base_depth(self) -> int:
        return self.grid.depth - self.global_dim


def augment_with_global(f: FeatureGrid) -> AugmentedFeatureGrid:
    """Append the image's normalized mean feature vector at every location."""
    if f.norm_state != NormState.UNIT:
        raise DataError("augment_with_global expects unit-normalized features")
    locs = f.grid.locations().astype(np.float64)
    mean = locs.mean(axis=0)
    unit_mean, _ = l2_normalize_locations(mean[None, :])
    tiled = np.broadcast_to(unit_mean[0], (locs.shape[0], locs.shape[1]))
    stacked = np.concatenate([locs, tiled], axis=1).astype(np.float32)
    h, w, d = f.grid.height, f.grid.width, f.grid.depth
    return AugmentedFeatureGrid(
        grid=Grid(stacked.reshape(h, w, 2 * d)), global_dim=d
    )


@dataclass
class SegmentationModel:
    class_ids: tuple[int, ...]  # ordered foreground universe
    hidden_layer: LinearLayer
    out_layer: LinearLayer
    global_dim: int
    seed: int

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def background_index(self) -> int:
        return self.n_classes

    def params(self) -> list[np.ndarray]:
        return self.hidden_layer.params() + self.out_layer.params()

    def set_params(self, params: list[np.ndarray]) -> None:
        self.hidden_layer.set_params(params[:2])
        self.out_layer.set_params(params[2:])

    def label_to_index(self, label: int) -> int:
        if label == BACKGROUND:
            return self.background_index
        try:
            return self.class_ids.index(label)
        except ValueError:
            raise DataError(f"label {label} not in class universe {self.class_ids}")


@dataclass(frozen=True)
class SegConfig:
    hidden: int = 128
    lr: float = 1e-3
    epochs: int = 2
    batch_size: int = 100


@dataclass
class SegTrainResult:
    model: SegmentationModel
    epoch_losses: list[float]
    wall_seconds: float


def new_segmentation_model(class_ids, in_dim: int, global_dim: int,
                           config: SegConfig, seed: int) -> SegmentationModel:
    rng = Rng(seed)
    return SegmentationModel(
        class_ids=tuple(class_ids),
        hidden_layer=init_linear(rng, in_dim, config.hidden),
        out_layer=init_linear(rng, config.hidden, len(class_ids) + 1),
        global_dim=global_dim,
        seed=seed,
    )


def train_segmentation(
    points: list[SampledPoint],
    features_by_image: dict[str, AugmentedFeatureGrid],
    class_ids,
    config: SegConfig,
    seed: int,
) -> SegTrainResult:
    """Train the per-location head on the pooled point set.

    Points are gathered into one (n, D) matrix, shuffled with the seeded
    stream each epoch, and consumed in batches of config.batch_size under
    mean softmax cross-entropy. Ground-truth masks are not an input.
    """
    if not points:
        raise DataError("train_segmentation: empty point set")
    started = time.perf_counter()
    missing = sorted({p.image_id for p in points} - set(features_by_image))
    if missing:
        raise DataError(f"points reference images without features: {missing[:5]}")

    first = next(iter(features_by_image.values()))
    in_dim = first.grid.depth
    model = new_segmentation_model(
        class_ids, in_dim, first.global_dim, config, derive_seed(seed, 0x5E6)
    )

    x = np.empty((len(points), in_dim), dtype=np.float64)
    y = np.empty(len(points), dtype=np.int64)
    for i, p in enumerate(points):
        x[i] = features_by_image[p.image_id].grid.locations()[p.loc]
        y[i] = model.label_to_index(p.label)

    rng = Rng(derive_seed(seed, 0x5EC0))
    state = AdamState(lr=config.lr)
    epoch_losses = []
    for _ in range(config.epochs):
        order = list(range(len(points)))
        rng.shuffle(order)
        total = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            loss = _seg_step(model, x[batch], y[batch], state)
            if not np.isfinite(loss):
                raise NumericError(f"segmentation loss non-finite at batch {n_batches}")
            total += loss
            n_batches += 1
        epoch_losses.append(total / n_batches)
    return SegTrainResult(
        model=model,
        epoch_losses=epoch_losses,
        wall_seconds=time.perf_counter() - started,
    )


def _seg_step(model: SegmentationModel, xb: np.ndarray, yb: np.ndarray,
              state: AdamState) -> float:
    h1 = linear_fwd(model.hidden_layer, xb)
    a1 = relu(h1)
    logits = linear_fwd(model.out_layer, a1)
    lv = masked_ce_loss_and_grad(logits, [(i, int(c)) for i, c in enumerate(yb)])
    dlogits = lv.grads["logits"]
    dw2, db2, da1 = linear_backward(model.out_layer, a1, dlogits)
    dh1 = relu_backward(h1, da1)
    dw1, db1, _ = linear_backward(model.hidden_layer, xb, dh1)
    model.set_params(adam_step(model.params(), [dw1, db1, dw2, db2], state))
    return lv.loss


def predict(model: SegmentationModel, af: AugmentedFeatureGrid
            ) -> tuple[np.ndarray, Grid]:
    """Dense prediction: (H, W) argmax label indices (background = C, ties to
    the lowest index) and the (H, W, C+1) softmax probability grid."""
    g = af.grid
    if g.depth != model.hidden_layer.in_dim:
        raise DataError(
            f"predict: feature depth {g.depth} != model input {model.hidden_layer.in_dim}"
        )
    x = g.locations().astype(np.float64)
    logits = linear_fwd(model.out_layer, relu(linear_fwd(model.hidden_layer, x)))
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    labels = probs.argmax(axis=1).reshape(g.height, g.width)
    prob_grid = Grid(
        probs.reshape(g.height, g.width, model.n_classes + 1).astype(np.float32)
    )
    return labels, prob_grid


# ---------------------------------------------------------------------------
# incremental class addition


@dataclass
class AddClassResult:
    class_ids: tuple[int, ...]
    loc_result: LocTrainResult
    new_points: list[SampledPoint]
    merged_points: list[SampledPoint]
    seg_result: SegTrainResult


def add_class(
    new_class_id: int,
    new_data: list[SupervisionRecord],
    loc_models: dict[int, LocalizationModel],
    existing_points: list[SampledPoint],
    features_by_image: dict[str, AugmentedFeatureGrid],
    class_ids,
    loc_config: LocConfig,
    sampling_config: SamplingConfig,
    seg_config: SegConfig,
    seed: int,
) -> AddClassResult:
    """Extend the system with one class: train that class's localizer on the
    new images, sample its points (plus background) there, merge with the
    existing point pool, and retrain only the segmentation head with one more
    output. Existing localization models are not touched.
    """
    if new_class_id in class_ids:
        raise DataError(f"class {new_class_id} already registered")
    if new_class_id in loc_models:
        raise DataError(f"class {new_class_id} already has a localization model")

    loc_result = train_localizer(
        new_class_id,
        [(rec.features, rec.tags) for rec in new_data],
        loc_config,
        seed=derive_seed(seed, 0xADD0 + new_class_id),
    )

    new_points: list[SampledPoint] = []
    new_features: dict[str, AugmentedFeatureGrid] = {}
    for index, rec in enumerate(new_data):
        if new_class_id not in rec.tags:
            continue
        maps = {
            new_class_id: score_image(
                loc_result.model, rec.features, image_id=rec.image_id
            )
        }
        rng = Rng(derive_seed(seed, 0xADD5A3F + index))
        new_points.extend(sample_image(rec, maps, sampling_config, {}, rng))
        new_features[rec.image_id] = augment_with_global(rec.features)

    merged = list(existing_points) + new_points
    all_features = dict(features_by_image)
    all_features.update(new_features)
    seg_result = train_segmentation(
        merged,
        all_features,
        tuple(class_ids) + (new_class_id,),
        seg_config,
        seed=derive_seed(seed, 0xADD5E6),
    )
    return AddClassResult(
        class_ids=tuple(class_ids) + (new_class_id,),
        loc_result=loc_result,
        new_points=new_points,
        merged_points=merged,
        seg_result=seg_result,
    )


def save_seg_checkpoint(path, result: SegTrainResult, config: SegConfig) -> None:
    from .nn import save_checkpoint

    m = result.model
    save_checkpoint(
        path,
        arrays={
            "hidden_w": m.hidden_layer.weights,
            "hidden_b": m.hidden_layer.bias,
            "out_w": m.out_layer.weights,
            "out_b": m.out_layer.bias,
        },
        meta={
            "kind": "segmentation",
            "class_ids": list(m.class_ids),
            "in_dim": m.hidden_layer.in_dim,
            "hidden": m.hidden_layer.out_dim,
            "global_dim": m.global_dim,
            "seed": m.seed,
            "lr": config.lr,
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "epoch_losses": result.epoch_losses,
        },
    )


def load_seg_checkpoint(path) -> SegmentationModel:
    from .nn import load_checkpoint

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "segmentation":
        raise DataError(f"{path}: not a segmentation checkpoint")
    return SegmentationModel(
        class_ids=tuple(int(c) for c in meta["class_ids"]),
        hidden_layer=LinearLayer(
            weights=arrays["hidden_w"].astype(np.float64),
            bias=arrays["hidden_b"].astype(np.float64),
        ),
        out_layer=LinearLayer(
            weights=arrays["out_w"].astype(np.float64),
            bias=arrays["out_b"].astype(np.float64),
        ),
        global_dim=int(meta["global_dim"]),
        seed=int(meta["seed"]),
    )
