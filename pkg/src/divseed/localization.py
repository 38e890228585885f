"""Per-class localization scorers trained from image-level tags.

Each foreground class gets its own two-layer per-location network producing
a foreground score map and a background score map. Training sees only
image-level presence labels: the maps are pooled to one probability per
image ("pixel" or "global" softmax pooling, see nn) and pushed through
binary cross-entropy. Adding a class later never touches other classes'
models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .nn import (
    AdamState,
    LinearLayer,
    LossValue,
    PoolingTrace,
    adam_step,
    bce_loss_and_grad,
    global_softmax_prob,
    init_linear,
    linear_backward,
    linear_fwd,
    pixel_softmax_prob,
    relu,
    relu_backward,
)
from .rng import Rng, derive_seed
from .tensor import FeatureGrid, NormState

POOLING_MODES = ("global", "pixel")


@dataclass(frozen=True)
class TagSet:
    """Image-level labels: which foreground classes appear somewhere."""

    image_id: str
    present: frozenset[int]

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.present


@dataclass(frozen=True)
class ScoreMap:
    """Foreground / background score maps for one (image, class) pair."""

    class_id: int
    image_id: str
    fg: np.ndarray  # (H, W) float32
    bg: np.ndarray  # (H, W) float32

    def __post_init__(self):
        if self.fg.shape != self.bg.shape:
            raise DataError("ScoreMap fg/bg shapes differ")
        if not (np.all(np.isfinite(self.fg)) and np.all(np.isfinite(self.bg))):
            raise NumericError("non-finite score map")

    def fg_flat(self) -> np.ndarray:
        return self.fg.astype(np.float64).ravel()

    def bg_flat(self) -> np.ndarray:
        return self.bg.astype(np.float64).ravel()


@dataclass
class LocalizationModel:
    """hidden-ReLU-2 per-location network; output channel 0 is the foreground
    score, channel 1 the background score."""

    class_id: int
    layer1: LinearLayer
    layer2: LinearLayer
    pooling: str
    seed: int

    def params(self) -> list[np.ndarray]:
        return self.layer1.params() + self.layer2.params()

    def set_params(self, params: list[np.ndarray]) -> None:
        self.layer1.set_params(params[:2])
        self.layer2.set_params(params[2:])


@dataclass(frozen=True)
class LocConfig:
    hidden: int = 64
    # (epochs, learning rate) pairs run in order: two epochs, then a 10x lr
    # drop for one more, batch of one image. Magnitudes are set for unit-norm
    # features at desk scale; pass your own schedule for other feature scales.
    lr_schedule: tuple[tuple[int, float], ...] = ((2, 2e-2), (1, 2e-3))
    pooling: str = "global"
    # max-pooled training occasionally collapses both score channels onto one
    # profile and flatlines at the ln(2) loss plateau; such runs are restarted
    # from a derived seed (deterministic), up to max_restarts times
    restart_loss_threshold: float = 0.5
    max_restarts: int = 4

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise DataError(f"unknown pooling mode {self.pooling!r}")


@dataclass
class LocTrainResult:
    model: LocalizationModel
    epoch_losses: list[float]
    negative_ids: list[str]  # the sampled balanced negatives, for the log
    clamp_events: int = 0
    restarts: int = 0


def new_localization_model(class_id: int, in_dim: int, config: LocConfig, seed: int
                           ) -> LocalizationModel:
    rng = Rng(seed)
    return LocalizationModel(
        class_id=class_id,
        layer1=init_linear(rng, in_dim, config.hidden),
        layer2=init_linear(rng, config.hidden, 2),
        pooling=config.pooling,
        seed=seed,
    )


def _forward_scores(model: LocalizationModel, x: np.ndarray):
    """x: (N, D) float64 -> (h1 pre-act, hidden act, (N, 2) scores)."""
    h1 = linear_fwd(model.layer1, x)
    a1 = relu(h1)
    y = linear_fwd(model.layer2, a1)
    return h1, a1, y


def score_image(model: LocalizationModel, f: FeatureGrid, image_id: str = "") -> ScoreMap:
    """Deterministic forward pass to fg/bg maps at feature-grid resolution."""
    _require_unit(f)
    g = f.grid
    _, _, y = _forward_scores(model, g.locations().astype(np.float64))
    fg = y[:, 0].reshape(g.height, g.width).astype(np.float32)
    bg = y[:, 1].reshape(g.height, g.width).astype(np.float32)
    return ScoreMap(class_id=model.class_id, image_id=image_id, fg=fg, bg=bg)


def pooled_probability(model_pooling: str, fg: np.ndarray, bg: np.ndarray
                       ) -> tuple[float, PoolingTrace]:
    if model_pooling == "pixel":
        return pixel_softmax_prob(fg, bg)
    if model_pooling == "global":
        return global_softmax_prob(fg, bg)
    raise DataError(f"unknown pooling mode {model_pooling!r}")


def image_probability(model: LocalizationModel, f: FeatureGrid) -> float:
    """Image-level presence probability for the model's class."""
    sm = score_image(model, f)
    p, _ = pooled_probability(model.pooling, sm.fg_flat(), sm.bg_flat())
    return p


def _require_unit(f: FeatureGrid) -> None:
    if f.norm_state != NormState.UNIT:
        raise DataError(f"expected unit-normalized features, got {f.norm_state.value}")


def train_localizer(
    class_id: int,
    dataset: list[tuple[FeatureGrid, TagSet]],
    config: LocConfig,
    seed: int,
) -> LocTrainResult:
    """Train one class's localizer on its positives plus an equal number of
    randomly sampled negatives (batch = one image, Adam, staged lr).

    Negatives are drawn without replacement when enough exist, otherwise with
    replacement up to the positive count. Same seed and data give a
    bit-identical model. A run that never leaves the chance-level loss
    plateau is retrained from a derived seed (see LocConfig). Raises
    DataError without at least one positive and one negative; raises
    NumericError (with the step) if the loss goes non-finite.
    """
    result = _train_localizer_once(class_id, dataset, config, seed)
    attempt = 0
    while (
        result.epoch_losses[-1] > config.restart_loss_threshold
        and attempt < config.max_restarts
    ):
        attempt += 1
        result = _train_localizer_once(
            class_id, dataset, config, derive_seed(seed, 0x7E57A47 + attempt)
        )
    result.restarts = attempt
    return result


def _train_localizer_once(
    class_id: int,
    dataset: list[tuple[FeatureGrid, TagSet]],
    config: LocConfig,
    seed: int,
) -> LocTrainResult:
    for f, _ in dataset:
        _require_unit(f)
    positives = [(f, t) for f, t in dataset if class_id in t]
    negative_pool = [(f, t) for f, t in dataset if class_id not in t]
    if not positives:
        raise DataError(f"class {class_id}: no positive images")
    if not negative_pool:
        raise DataError(f"class {class_id}: no negative images")

    rng = Rng(derive_seed(seed, 0x10C))
    n_pos = len(positives)
    if len(negative_pool) >= n_pos:
        chosen = rng.sample_indices(len(negative_pool), n_pos)
    else:
        chosen = [rng.randint(len(negative_pool)) for _ in range(n_pos)]
    negatives = [negative_pool[i] for i in chosen]

    in_dim = dataset[0][0].grid.depth
    model = new_localization_model(class_id, in_dim, config, derive_seed(seed, 0x1417))

    batches = [(f, 1) for f, _ in positives] + [(f, 0) for f, _ in negatives]
    epoch_losses: list[float] = []
    clamp_events = 0
    step = 0
    state: AdamState | None = None
    for epochs, lr in config.lr_schedule:
        for _ in range(epochs):
            # keep accumulated moments across the lr drop, like a lr scheduler
            if state is None:
                state = AdamState(lr=lr)
            else:
                state.lr = lr
            order = list(range(len(batches)))
            rng.shuffle(order)
            total = 0.0
            for bi in order:
                f, label = batches[bi]
                loss_value = _loc_step(model, f, label, state)
                step += 1
                if not np.isfinite(loss_value.loss):
                    raise NumericError(
                        f"class {class_id}: non-finite loss at step {step}"
                    )
                clamp_events += loss_value.clamp_events
                total += loss_value.loss
            epoch_losses.append(total / len(batches))
    return LocTrainResult(
        model=model,
        epoch_losses=epoch_losses,
        negative_ids=[t.image_id for _, t in negatives],
        clamp_events=clamp_events,
    )


def _loc_step(model: LocalizationModel, f: FeatureGrid, label: int,
              state: AdamState) -> LossValue:
    """One image: forward, pooled BCE, manual backward, Adam update."""
    x = f.grid.locations().astype(np.float64)
    h1, a1, y = _forward_scores(model, x)
    p, trace = pooled_probability(model.pooling, y[:, 0], y[:, 1])
    lv = bce_loss_and_grad(p, label, trace, n_locations=x.shape[0])
    dy = np.stack([lv.grads["fg"], lv.grads["bg"]], axis=1)
    dw2, db2, da1 = linear_backward(model.layer2, a1, dy)
    dh1 = relu_backward(h1, da1)
    dw1, db1, _ = linear_backward(model.layer1, x, dh1)
    new_params = adam_step(model.params(), [dw1, db1, dw2, db2], state)
    model.set_params(new_params)
    return lv


def save_loc_checkpoint(path, result: LocTrainResult) -> None:
    """Checkpoint directory: params as DSTN tensors + JSON sidecar."""
    from .nn import save_checkpoint

    m = result.model
    save_checkpoint(
        path,
        arrays={
            "layer1_w": m.layer1.weights,
            "layer1_b": m.layer1.bias,
            "layer2_w": m.layer2.weights,
            "layer2_b": m.layer2.bias,
        },
        meta={
            "kind": "localization",
            "class_id": m.class_id,
            "pooling": m.pooling,
            "in_dim": m.layer1.in_dim,
            "hidden": m.layer1.out_dim,
            "seed": m.seed,
            "epoch_losses": result.epoch_losses,
            "negative_ids": result.negative_ids,
            "clamp_events": result.clamp_events,
        },
    )


def load_loc_checkpoint(path) -> LocalizationModel:
    from .nn import load_checkpoint

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "localization":
        raise DataError(f"{path}: not a localization checkpoint")
    return LocalizationModel(
        class_id=int(meta["class_id"]),
        layer1=LinearLayer(
            weights=arrays["layer1_w"].astype(np.float64),
            bias=arrays["layer1_b"].astype(np.float64),
        ),
        layer2=LinearLayer(
            weights=arrays["layer2_w"].astype(np.float64),
            bias=arrays["layer2_b"].astype(np.float64),
        ),
        pooling=meta["pooling"],
        seed=int(meta["seed"]),
    )
