"""Patch-level illuminant estimation with a small convolutional network.

Architecture, for the default configuration: a 32x32x3 linear-light patch
goes through 240 pointwise (1x1x3) convolution filters, an 8x8 disjoint max
pool (so 4x4x240), a fully connected layer of 40 ReLU units, and a final
fully connected layer producing 3 raw outputs. No nonlinearity sits between
the convolution and the pool. Default sizing carries 154,723 parameters.

Everything here is plain numpy, float64 end to end in memory; files store
float32. Training is SGD with momentum on the squared Euclidean distance
between raw outputs and the ground-truth illuminant direction. The raw
triplet only becomes an estimate after the shared clamp-and-normalize step.

Patches are preprocessed with a joint histogram stretch: one min and one max
over all three channels together, so ratios between channels survive. A patch
with no dynamic range stretches to all zeros and is flagged low_contrast.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError
from .imaging import (
    DEFAULT_PATCH_SIZE,
    EstimateMap,
    IlluminantEstimate,
    LinearImage,
    Patch,
    clamp_normalize,
    extract_patches,
)

_MODEL_MAGIC = b"ILCN"
_MODEL_VERSION = 1


@dataclass(frozen=True)
class CnnConfig:
    patch_size: int = DEFAULT_PATCH_SIZE
    conv_filters: int = 240
    pool_field: int = 8
    hidden_units: int = 40

    def __post_init__(self):
        for name in ("patch_size", "conv_filters", "pool_field", "hidden_units"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.patch_size % self.pool_field != 0:
            raise ValueError(
                f"pool_field {self.pool_field} must divide patch_size {self.patch_size}"
            )

    @property
    def pooled_side(self) -> int:
        return self.patch_size // self.pool_field

    @property
    def feature_dim(self) -> int:
        """Length of the flattened pooled tensor feeding the first FC layer."""
        return self.conv_filters * self.pooled_side * self.pooled_side


def param_count(config: CnnConfig) -> int:
    """Total learnable parameters (weights and biases of all three layers)."""
    conv = config.conv_filters * 3 + config.conv_filters
    fc1 = config.feature_dim * config.hidden_units + config.hidden_units
    fc2 = config.hidden_units * 3 + 3
    return conv + fc1 + fc2


@dataclass(eq=False)
class CnnModel:
    """Weights in float64. Shapes:

    conv_w (filters, 3), conv_b (filters,)
    fc1_w (feature_dim, hidden), fc1_b (hidden,)
    fc2_w (hidden, 3), fc2_b (3,)

    The pooled tensor flattens cell-major: feature index = cell * filters + f
    where cell walks the pooled grid row-major.
    """

    config: CnnConfig
    conv_w: np.ndarray
    conv_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray

    _PARAMS = ("conv_w", "conv_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")

    def __post_init__(self):
        c = self.config
        expected = {
            "conv_w": (c.conv_filters, 3),
            "conv_b": (c.conv_filters,),
            "fc1_w": (c.feature_dim, c.hidden_units),
            "fc1_b": (c.hidden_units,),
            "fc2_w": (c.hidden_units, 3),
            "fc2_b": (3,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            setattr(self, name, arr)

    def param_count(self) -> int:
        return param_count(self.config)

    def copy(self) -> "CnnModel":
        return CnnModel(self.config, *(getattr(self, n).copy() for n in self._PARAMS))


def init_model(config: CnnConfig, rng: np.random.Generator) -> CnnModel:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases.

    Draw order is fixed (conv_w, fc1_w, fc2_w) so a given seed always yields
    the same model.
    """

    def uniform(fan_in, fan_out, shape):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    c = config
    return CnnModel(
        config=c,
        conv_w=uniform(3, c.conv_filters, (c.conv_filters, 3)),
        conv_b=np.zeros(c.conv_filters),
        fc1_w=uniform(c.feature_dim, c.hidden_units, (c.feature_dim, c.hidden_units)),
        fc1_b=np.zeros(c.hidden_units),
        fc2_w=uniform(c.hidden_units, 3, (c.hidden_units, 3)),
        fc2_b=np.zeros(3),
    )


# ---------------------------------------------------------------------------
# Preprocessing

def stretch_pixels(pixels: np.ndarray) -> tuple[np.ndarray, bool]:
    """Joint min-max stretch over all three channels at once.

    Returns (stretched float64 array in [0, 1], low_contrast flag). A patch
    where max == min has nothing to stretch and comes back all zeros.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    lo = float(arr.min())
    hi = float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr), True
    return (arr - lo) / (hi - lo), False


def preprocess_patch(patch: Patch) -> Patch:
    stretched, flat = stretch_pixels(patch.pixels)
    return Patch(
        origin=patch.origin,
        size=patch.size,
        pixels=stretched.astype(np.float32),
        masked=patch.masked,
        low_contrast=flat,
    )


# ---------------------------------------------------------------------------
# Forward / backward

def _fold_cells(X: np.ndarray, config: CnnConfig) -> np.ndarray:
    """(B, S, S, 3) -> (B, cells, field*field, 3).

    Cells walk the pooled grid row-major; within a cell, pixels are row-major
    too, which makes argmax ties resolve to the first row-major position.
    """
    B = X.shape[0]
    P, C = config.pooled_side, config.pool_field
    folded = X.reshape(B, P, C, P, C, 3).transpose(0, 1, 3, 2, 4, 5)
    return folded.reshape(B, P * P, C * C, 3)


def _forward_batch(model: CnnModel, X: np.ndarray, want_cache: bool = False):
    """Run a (B, S, S, 3) float batch through the network.

    Returns (raw, hidden, cache). cache is None unless requested; it holds
    what the backward pass needs. Convolution activations are produced one
    pool cell at a time so the full pre-pool tensor is never materialized.
    """
    cfg = model.config
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1:] != (cfg.patch_size, cfg.patch_size, 3):
        raise ValueError(
            f"batch must be (B, {cfg.patch_size}, {cfg.patch_size}, 3), got {X.shape}"
        )
    B = X.shape[0]
    P = cfg.pooled_side
    F = cfg.conv_filters
    cells = P * P
    folded = _fold_cells(X, cfg)
    pooled = np.empty((B, cells, F))
    argidx = np.empty((B, cells, F), dtype=np.int64) if want_cache else None
    wT = model.conv_w.T  # (3, F)
    for cell in range(cells):
        act = folded[:, cell] @ wT + model.conv_b  # (B, field^2, F)
        idx = act.argmax(axis=1)
        pooled[:, cell] = np.take_along_axis(act, idx[:, None, :], axis=1)[:, 0, :]
        if want_cache:
            argidx[:, cell] = idx
    flat = pooled.reshape(B, cfg.feature_dim)
    h_pre = flat @ model.fc1_w + model.fc1_b
    h = np.maximum(h_pre, 0.0)
    raw = h @ model.fc2_w + model.fc2_b
    cache = None
    if want_cache:
        cache = {"folded": folded, "argidx": argidx, "flat": flat, "h_pre": h_pre, "h": h}
    return raw, h, cache


def _backward_batch(model: CnnModel, cache: dict, grad_raw: np.ndarray) -> dict:
    """Gradients of the batch loss w.r.t. every parameter.

    Max pooling routes each cell's incoming gradient entirely to the argmax
    pixel recorded in the cache, so per cell the routed gradients sum to the
    incoming one.
    """
    h = cache["h"]
    grads = {
        "fc2_w": h.T @ grad_raw,
        "fc2_b": grad_raw.sum(axis=0),
    }
    dh = grad_raw @ model.fc2_w.T
    dh_pre = np.where(cache["h_pre"] > 0, dh, 0.0)
    grads["fc1_w"] = cache["flat"].T @ dh_pre
    grads["fc1_b"] = dh_pre.sum(axis=0)
    dflat = dh_pre @ model.fc1_w.T
    cfg = model.config
    B = dflat.shape[0]
    cells = cfg.pooled_side * cfg.pooled_side
    F = cfg.conv_filters
    dpooled = dflat.reshape(B * cells, F)
    folded = cache["folded"].reshape(B * cells, cfg.pool_field**2, 3)
    idx = cache["argidx"].reshape(B * cells, F)
    winners = folded[np.arange(B * cells)[:, None], idx]  # (B*cells, F, 3)
    grads["conv_w"] = np.einsum("nf,nfc->fc", dpooled, winners)
    grads["conv_b"] = dpooled.sum(axis=0)
    return grads


def loss_and_grad(model: CnnModel, X: np.ndarray, Y: np.ndarray):
    """Mean squared Euclidean distance between raw outputs and targets,
    plus its gradient for every parameter."""
    Y = np.asarray(Y, dtype=np.float64)
    raw, _, cache = _forward_batch(model, X, want_cache=True)
    if Y.shape != raw.shape:
        raise ValueError(f"targets must be {raw.shape}, got {Y.shape}")
    diff = raw - Y
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grad_raw = (2.0 / X.shape[0]) * diff
    return loss, _backward_batch(model, cache, grad_raw)


def predict_batch(model: CnnModel, X: np.ndarray) -> np.ndarray:
    """Raw (unclamped, unnormalized) outputs for a batch."""
    raw, _, _ = _forward_batch(model, X)
    return raw


def forward(model: CnnModel, patch: Patch) -> IlluminantEstimate:
    """Estimate for a single already-preprocessed patch."""
    raw = predict_batch(model, patch.pixels[None].astype(np.float64))
    return clamp_normalize(raw[0])


def hidden_activations(model: CnnModel, X: np.ndarray) -> np.ndarray:
    """(B, hidden_units) post-ReLU activations for a preprocessed batch."""
    _, h, _ = _forward_batch(model, X)
    return h


# ---------------------------------------------------------------------------
# Estimate maps

def estimate_map(
    model: CnnModel, image: LinearImage, batch_size: int = 512
) -> EstimateMap:
    """Tile the image with disjoint patches and estimate each one.

    Grid cells whose patch overlaps the exclusion mask are marked invalid;
    their values are left as the unit-gray direction but must not be used.
    """
    ps = model.config.patch_size
    patches = extract_patches(image, ps, stride=ps)
    grid_h = (image.height - ps) // ps + 1
    grid_w = (image.width - ps) // ps + 1
    values = np.full((grid_h * grid_w, 3), 1.0 / np.sqrt(3.0))
    validity = np.empty(grid_h * grid_w, dtype=bool)
    X = np.empty((len(patches), ps, ps, 3))
    for i, patch in enumerate(patches):
        X[i], _ = stretch_pixels(patch.pixels)
        validity[i] = not patch.masked
    for start in range(0, len(patches), batch_size):
        raw = predict_batch(model, X[start : start + batch_size])
        clamped = np.maximum(raw, 1e-6)
        values[start : start + raw.shape[0]] = clamped / np.linalg.norm(
            clamped, axis=1, keepdims=True
        )
    return EstimateMap(
        values.reshape(grid_h, grid_w, 3), validity.reshape(grid_h, grid_w), ps
    )


def top_activating_patches(
    model: CnnModel, patches: Sequence[Patch], unit: int, k: int
) -> list[tuple[Patch, float]]:
    """The k patches that drive one hidden unit hardest.

    Patches are preprocessed internally; the originals are returned, paired
    with the activation, strongest first (ties keep input order).
    """
    if not 0 <= unit < model.config.hidden_units:
        raise ValueError(f"unit must be in [0, {model.config.hidden_units})")
    if k < 1:
        raise ValueError("k must be positive")
    if not patches:
        raise ValueError("no patches given")
    acts = np.empty(len(patches))
    chunk = 512
    for start in range(0, len(patches), chunk):
        block = patches[start : start + chunk]
        X = np.stack([stretch_pixels(p.pixels)[0] for p in block])
        acts[start : start + len(block)] = hidden_activations(model, X)[:, unit]
    order = np.argsort(-acts, kind="stable")[:k]
    return [(patches[i], float(acts[i])) for i in order]


# ---------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    patches_per_image: int = 64
    lr_decay: float | None = None  # per-epoch multiplier; None picks a default
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patches_per_image < 1:
            raise ValueError("epochs, batch_size and patches_per_image must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.lr_decay is not None and not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")

    def resolved_decay(self) -> float:
        """Default decay spreads three decades of learning-rate drop evenly
        across the run: 10 ** (-3 / epochs) per epoch."""
        if self.lr_decay is not None:
            return self.lr_decay
        return 10.0 ** (-3.0 / self.epochs)


class PatchDataset:
    """Images paired with per-image ground truth, sampled as random patches.

    Sampling rejects windows that touch excluded pixels (bounded retries per
    image). Every draw goes through one Generator in image order, so a seed
    pins the whole epoch.
    """

    def __init__(
        self,
        images: Sequence[LinearImage],
        truths: Sequence[IlluminantEstimate],
        patch_size: int = DEFAULT_PATCH_SIZE,
    ):
        if len(images) != len(truths):
            raise ValueError("one ground truth per image required")
        if not images:
            raise ValueError("dataset is empty")
        for img in images:
            if img.height < patch_size or img.width < patch_size:
                raise DataError(
                    f"image {img.width}x{img.height} smaller than patch size {patch_size}"
                )
        self.images = list(images)
        self.truths = list(truths)
        self.patch_size = patch_size

    def __len__(self) -> int:
        return len(self.images)

    def sample(
        self, rng: np.random.Generator, patches_per_image: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw preprocessed patches: (N, S, S, 3) inputs, (N, 3) unit targets."""
        ps = self.patch_size
        xs: list[np.ndarray] = []
        ys: list[np.ndarray] = []
        for img, truth in zip(self.images, self.truths):
            excl = img.excluded()
            row_max = img.height - ps
            col_max = img.width - ps
            drawn = 0
            for _ in range(patches_per_image * 20):
                if drawn >= patches_per_image:
                    break
                r = int(rng.integers(0, row_max + 1))
                c = int(rng.integers(0, col_max + 1))
                if excl[r : r + ps, c : c + ps].any():
                    continue
                stretched, _ = stretch_pixels(img.data[r : r + ps, c : c + ps])
                xs.append(stretched)
                ys.append(truth.rgb)
                drawn += 1
        if not xs:
            raise DataError("could not sample any unmasked patches")
        return np.stack(xs), np.stack(ys)


@dataclass
class TrainResult:
    model: CnnModel
    history: list[dict]
    best_epoch: int


def _eval_loss(model: CnnModel, X: np.ndarray, Y: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    for start in range(0, len(X), chunk):
        raw = predict_batch(model, X[start : start + chunk])
        diff = raw - Y[start : start + chunk]
        total += float(np.sum(diff * diff))
    return total / len(X)


def train(
    train_data: PatchDataset,
    config: TrainConfig,
    val_data: PatchDataset | None = None,
    model_config: CnnConfig | None = None,
) -> TrainResult:
    """SGD with momentum over freshly sampled patches each epoch.

    When validation data is given, its patches are drawn once up front and
    the returned model is the epoch snapshot with the lowest validation
    loss; otherwise the final weights are returned. A non-finite loss or
    gradient aborts with NumericError rather than silently continuing.
    """
    rng = np.random.default_rng(config.seed)
    model = init_model(model_config or CnnConfig(), rng)
    val_set = None
    if val_data is not None:
        val_rng = np.random.default_rng(config.seed + 1)
        val_set = val_data.sample(val_rng, config.patches_per_image)
    velocity = {n: np.zeros_like(getattr(model, n)) for n in CnnModel._PARAMS}
    decay = config.resolved_decay()
    history: list[dict] = []
    best_val = np.inf
    best_state: CnnModel | None = None
    best_epoch = config.epochs - 1
    for epoch in range(config.epochs):
        lr = config.learning_rate * decay**epoch
        X, Y = train_data.sample(rng, config.patches_per_image)
        order = rng.permutation(len(X))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            sel = order[start : start + config.batch_size]
            loss, grads = loss_and_grad(model, X[sel], Y[sel])
            if not np.isfinite(loss):
                raise NumericError(
                    f"training diverged at epoch {epoch}: batch loss {loss}"
                )
            for name in CnnModel._PARAMS:
                g = grads[name]
                if not np.all(np.isfinite(g)):
                    raise NumericError(
                        f"training diverged at epoch {epoch}: non-finite gradient in {name}"
                    )
                velocity[name] = config.momentum * velocity[name] - lr * g
                getattr(model, name)[...] += velocity[name]
            batch_losses.append(loss)
        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(batch_losses))}
        if val_set is not None:
            val_loss = _eval_loss(model, *val_set)
            entry["val_loss"] = val_loss
            if val_loss < best_val:
                best_val = val_loss
                best_state = model.copy()
                best_epoch = epoch
        history.append(entry)
    if best_state is not None:
        model = best_state
    return TrainResult(model, history, best_epoch)


# ---------------------------------------------------------------------------
# Serialization
#
# Layout (little-endian): magic "ILCN", u32 version, u32 x4 config
# (patch_size, conv_filters, pool_field, hidden_units), then the six tensors
# as float32 in declaration order. A JSON sidecar at <path>.json carries
# caller metadata; nothing time-dependent is ever written.

def save_model(path, model: CnnModel, metadata: dict | None = None) -> None:
    path = Path(path)
    c = model.config
    blob = bytearray()
    blob += _MODEL_MAGIC
    blob += struct.pack(
        "<5I", _MODEL_VERSION, c.patch_size, c.conv_filters, c.pool_field, c.hidden_units
    )
    for name in CnnModel._PARAMS:
        blob += getattr(model, name).astype("<f4").tobytes()
    path.write_bytes(bytes(blob))
    sidecar = {"kind": "patch-cnn", "parameters": model.param_count()}
    sidecar.update(metadata or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_model(path) -> CnnModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    if raw[:4] != _MODEL_MAGIC:
        raise DataError(f"{path}: not a patch-cnn model file")
    version, ps, filters, pool, hidden = struct.unpack_from("<5I", raw, 4)
    if version != _MODEL_VERSION:
        raise DataError(f"{path}: unsupported model version {version}")
    try:
        config = CnnConfig(ps, filters, pool, hidden)
    except ValueError as exc:
        raise DataError(f"{path}: inconsistent model header: {exc}") from exc
    shapes = [
        (filters, 3),
        (filters,),
        (config.feature_dim, hidden),
        (hidden,),
        (hidden, 3),
        (3,),
    ]
    offset = 24
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        if len(raw) - offset < 4 * n:
            raise DataError(f"{path}: model file truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        arrays.append(arr.astype(np.float64).reshape(shape))
        offset += 4 * n
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes after model payload")
    return CnnModel(config, *arrays)
