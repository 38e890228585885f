"""Per-location neural net machinery with hand-derived gradients.

Everything here operates on (N, dim) float64 arrays where N is the number of
grid locations; receptive field is always 1x1, so a "layer" is a plain affine
map applied at every location. Losses return a LossValue carrying the scalar
loss and gradients w.r.t. their direct inputs; training loops chain those
through linear_backward / relu_backward by hand.

Numeric conventions:
  - parameters and loss math are float64; float32 only at storage boundaries
  - max-pooling subgradient: all gradient to the lowest-linear-index argmax
  - ReLU subgradient at exactly 0 is 0
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .rng import Rng
from .tensor import Grid, load_tensor, save_tensor

PROB_CLAMP = 1e-7


@dataclass
class LinearLayer:
    """Affine map applied per location: y = W x + b."""

    weights: np.ndarray  # (out_dim, in_dim) float64
    bias: np.ndarray  # (out_dim,) float64

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def set_params(self, params: list[np.ndarray]) -> None:
        self.weights, self.bias = params


def init_linear(rng: Rng, in_dim: int, out_dim: int) -> LinearLayer:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero bias.

    Weights are drawn row-major over (out, in) so layouts are reproducible.
    """
    a = math.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform_array(out_dim * in_dim, -a, a).reshape(out_dim, in_dim)
    return LinearLayer(weights=w, bias=np.zeros(out_dim, dtype=np.float64))


def linear_fwd(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    """x: (N, in_dim) -> (N, out_dim)."""
    if x.shape[1] != layer.in_dim:
        raise DataError(f"linear: input depth {x.shape[1]} != in_dim {layer.in_dim}")
    return x @ layer.weights.T + layer.bias


def linear_backward(
    layer: LinearLayer, x: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dW, db, dx) for upstream gradient dy of shape (N, out_dim)."""
    dw = dy.T @ x
    db = dy.sum(axis=0)
    dx = dy @ layer.weights
    return dw, db, dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0.0)


def linear_forward(layer: LinearLayer, x: Grid) -> Grid:
    """Grid-level affine application (same H, W; depth in_dim -> out_dim)."""
    if x.depth != layer.in_dim:
        raise DataError(f"linear_forward: depth {x.depth} != in_dim {layer.in_dim}")
    y = linear_fwd(layer, x.locations().astype(np.float64))
    return Grid(y.reshape(x.height, x.width, layer.out_dim).astype(np.float32))


# ---------------------------------------------------------------------------
# image-level pooling of score maps


@dataclass(frozen=True)
class PoolingTrace:
    """Where the pooled probability came from, for gradient routing.

    fg_loc / bg_loc are flat location indices; the per-pixel scheme routes
    both through one location, the global scheme through two.
    """

    mode: str  # "pixel" | "global"
    fg_loc: int
    bg_loc: int


def _sigmoid(u: float) -> float:
    # saturates to exactly 0.0 / 1.0 in float64 beyond |u| ~ 36.7; the BCE
    # clamp downstream keeps the log finite there
    if u >= 0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


def pixel_softmax_prob(fg: np.ndarray, bg: np.ndarray) -> tuple[float, PoolingTrace]:
    """Max over locations of the per-location two-way softmax probability.

    Since sigmoid is monotone this equals sigmoid(max_i (fg_i - bg_i)),
    which is how it is computed; the argmax of the difference is the single
    location gradients flow through.
    """
    f, b = _check_score_pair(fg, bg)
    diffs = f - b
    i = int(np.argmax(diffs))  # first index on ties
    return _sigmoid(float(diffs[i])), PoolingTrace(mode="pixel", fg_loc=i, bg_loc=i)


def global_softmax_prob(fg: np.ndarray, bg: np.ndarray) -> tuple[float, PoolingTrace]:
    """Two-way softmax of the separate maxima of the fg and bg score maps.

    Equals sigmoid(max_i fg_i - max_l bg_l); gradients flow through the two
    argmax locations.
    """
    f, b = _check_score_pair(fg, bg)
    i = int(np.argmax(f))
    l = int(np.argmax(b))
    return _sigmoid(float(f[i] - b[l])), PoolingTrace(mode="global", fg_loc=i, bg_loc=l)


def _check_score_pair(fg: np.ndarray, bg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(fg, dtype=np.float64).ravel()
    b = np.asarray(bg, dtype=np.float64).ravel()
    if f.size == 0:
        raise DataError("empty score map")
    if f.shape != b.shape:
        raise DataError(f"score map shapes differ: {fg.shape} vs {bg.shape}")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(b))):
        raise NumericError("non-finite scores in pooling")
    return f, b


@dataclass
class LossValue:
    """Scalar loss plus gradients w.r.t. the op's direct inputs."""

    loss: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    clamp_events: int = 0

    def __post_init__(self):
        if not math.isfinite(self.loss):
            raise NumericError(f"non-finite loss {self.loss}")


def bce_loss_and_grad(p: float, label: int, trace: PoolingTrace, n_locations: int) -> LossValue:
    """Binary cross-entropy on a pooled probability, routed back to score maps.

    Returns gradients d_fg / d_bg over the flattened maps: for either pooling
    scheme dL/du = p - label at the pooled logit u, placed at the traced
    argmax locations and zero elsewhere. p is clamped away from {0, 1} for
    the log only; clamp events are counted.
    """
    clamped = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
    events = int(clamped != p)
    loss = -(label * math.log(clamped) + (1 - label) * math.log(1.0 - clamped))
    g = p - label  # d loss / d pooled-logit, exact for unclamped sigmoid
    d_fg = np.zeros(n_locations, dtype=np.float64)
    d_bg = np.zeros(n_locations, dtype=np.float64)
    d_fg[trace.fg_loc] += g
    d_bg[trace.bg_loc] -= g
    return LossValue(loss=loss, grads={"fg": d_fg, "bg": d_bg}, clamp_events=events)


def masked_ce_loss_and_grad(logits: np.ndarray, labels: list[tuple[int, int]]) -> LossValue:
    """Mean softmax cross-entropy over labeled locations only.

    logits: (N, C+1); labels: (location, class) pairs, duplicates allowed and
    counted toward the mean. Gradient rows at unlabeled locations are exactly
    zero. An empty label set gives loss 0 and an all-zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, n_classes = logits.shape
    grad = np.zeros_like(logits)
    if not labels:
        return LossValue(loss=0.0, grads={"logits": grad})
    locs = np.array([loc for loc, _ in labels], dtype=np.int64)
    cls = np.array([c for _, c in labels], dtype=np.int64)
    if locs.min() < 0 or locs.max() >= n:
        raise DataError("masked CE: location index out of range")
    if cls.min() < 0 or cls.max() >= n_classes:
        raise DataError("masked CE: class index out of range")
    rows = logits[locs]
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    m = len(labels)
    loss = -float(log_probs[np.arange(m), cls].mean())
    row_grad = np.exp(log_probs)
    row_grad[np.arange(m), cls] -= 1.0
    np.add.at(grad, locs, row_grad / m)  # accumulates duplicates
    return LossValue(loss=loss, grads={"logits": grad})


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam state over a list of parameter arrays."""

    lr: float
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
) -> list[np.ndarray]:
    """One update; returns new parameter arrays and advances the state."""
    if len(params) != len(grads):
        raise DataError("adam_step: params/grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DataError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
    state.t += 1
    t = state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / (1 - state.beta1 ** t)
        v_hat = state.v[i] / (1 - state.beta2 ** t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(loss_fn, params: list[np.ndarray], rng: Rng, n_coords: int = 100,
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn(params) must return (loss, grads) with grads shaped like params.
    Checks a random subsample of at least n_coords coordinates (all of them
    if fewer exist); rel err = |ga - gf| / max(|ga|, |gf|, 1e-8).
    """
    loss0, analytic = loss_fn(params)
    if not math.isfinite(loss0):
        raise NumericError("grad_check: non-finite loss")
    sizes = [p.size for p in params]
    total = sum(sizes)
    if total <= n_coords:
        coords = list(range(total))
    else:
        coords = rng.sample_indices(total, n_coords)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in coords:
        pi = int(np.searchsorted(offsets, flat, side="right")) - 1
        j = flat - offsets[pi]
        idx = np.unravel_index(j, params[pi].shape)

        def eval_at(delta):
            bumped = [p.copy() for p in params]
            bumped[pi][idx] += delta
            loss, _ = loss_fn(bumped)
            return loss

        fd = (eval_at(step) - eval_at(-step)) / (2 * step)
        ga = float(analytic[pi][idx])
        err = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints: one DSTN file per parameter array + a JSON sidecar


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write a checkpoint directory: params/<name>.dstn plus meta.json."""
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    for name, arr in arrays.items():
        save_tensor(arr, os.path.join(path, "params", f"{name}.dstn"))
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(path, "meta.json")) as fh:
        meta = json.load(fh)
    params_dir = os.path.join(path, "params")
    arrays = {}
    for name in sorted(os.listdir(params_dir)):
        if name.endswith(".dstn"):
            arrays[name[: -len(".dstn")]] = load_tensor(os.path.join(params_dir, name))
    return arrays, meta
