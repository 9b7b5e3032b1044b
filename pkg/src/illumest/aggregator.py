"""Local-to-global aggregation: pooled map features and the SVR regressor.

A patch estimate map is smoothed with a small Gaussian (normalized over the
valid cells, so invalid ones neither contribute nor spread), then summarized
by a fixed 57-dimensional vector:

    27  per-region means  (3x3 grid of regions, R/G/B each)
    27  per-region standard deviations (population, same regions)
     3  global per-channel medians

One epsilon-SVR per output channel maps standardized features to the
illuminant. Hyperparameters (shared across channels) are picked on a
validation split by the median angular error of the assembled estimates,
then the three regressors are refit on everything with the winning triple.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, DegenerateEstimateError
from .imaging import EstimateMap, IlluminantEstimate, clamp_normalize
from .metrics import angular_error_rows
from .svr import SvrModel, fit_epsilon_svr, predict

FEATURE_DIM = 57

_AGG_MAGIC = b"ILAG"
_AGG_VERSION = 1

#: Hyperparameter search space: (C values, gamma values, epsilon values).
DEFAULT_GRID = ((1.0, 10.0, 100.0), (0.01, 0.1, 1.0), (0.001, 0.01))


@dataclass(eq=False)
class PooledFeatures:
    """The 57-vector, plus which regions (if any) had no valid cells and
    borrowed their statistics from the nearest populated region."""

    vector: np.ndarray
    copied_regions: tuple[int, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.shape != (FEATURE_DIM,):
            raise ValueError(f"feature vector must have {FEATURE_DIM} entries")
        self.vector = v


def _gauss_kernel_5x5(sigma: float) -> np.ndarray:
    g = np.exp(-0.5 * (np.arange(-2, 3, dtype=np.float64) / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def smooth_map(emap: EstimateMap, sigma: float = 1.0) -> np.ndarray:
    """5x5 Gaussian smoothing of the map, normalized over valid cells.

    Returns (h, w, 3); entries at invalid cells are meaningless and must be
    ignored by the caller (validity does not grow or shrink here).
    """
    kernel = _gauss_kernel_5x5(sigma)
    valid = emap.validity.astype(np.float64)
    den = ndimage.convolve(valid, kernel, mode="constant", cval=0.0)
    out = np.zeros_like(emap.values)
    for ch in range(3):
        num = ndimage.convolve(
            emap.values[:, :, ch] * valid, kernel, mode="constant", cval=0.0
        )
        np.divide(num, den, out=out[:, :, ch], where=den > 0)
    return out


def _region_slices(length: int) -> list[slice]:
    # same partition as np.array_split: the first (length % 3) parts get
    # the extra cells
    base, extra = divmod(length, 3)
    slices = []
    start = 0
    for part in range(3):
        size = base + (1 if part < extra else 0)
        slices.append(slice(start, start + size))
        start += size
    return slices


def pool_features(emap: EstimateMap, smoothing_sigma: float = 1.0) -> PooledFeatures:
    """Summarize an estimate map as the fixed 57-dimensional vector.

    The grid must be at least 3x3 with at least one valid cell. Regions with
    no valid cells copy the statistics of the nearest populated region
    (center distance, lower region index on ties) and are reported in
    copied_regions.
    """
    h, w = emap.grid_h, emap.grid_w
    if h < 3 or w < 3:
        raise DataError(f"estimate map {w}x{h} is too small to pool (need 3x3)")
    if not emap.validity.any():
        raise DataError("estimate map has no valid cells")
    smoothed = smooth_map(emap, smoothing_sigma)
    row_parts = _region_slices(h)
    col_parts = _region_slices(w)
    means = np.zeros((9, 3))
    stds = np.zeros((9, 3))
    counts = np.zeros(9, dtype=int)
    centers = np.zeros((9, 2))
    for rr in range(3):
        for cc in range(3):
            region = rr * 3 + cc
            rs, cs = row_parts[rr], col_parts[cc]
            centers[region] = ((rs.start + rs.stop - 1) / 2.0, (cs.start + cs.stop - 1) / 2.0)
            sel = emap.validity[rs, cs]
            counts[region] = int(np.count_nonzero(sel))
            if counts[region] == 0:
                continue
            block = smoothed[rs, cs][sel]  # (k, 3)
            means[region] = block.mean(axis=0)
            stds[region] = block.std(axis=0)  # population std
    copied = []
    populated = np.flatnonzero(counts > 0)
    for region in np.flatnonzero(counts == 0):
        dists = np.linalg.norm(centers[populated] - centers[region], axis=1)
        donor = populated[int(np.argmin(dists))]  # argmin ties: lowest index
        means[region] = means[donor]
        stds[region] = stds[donor]
        copied.append(int(region))
    medians = np.median(smoothed[emap.validity], axis=0)
    vector = np.concatenate([means.ravel(), stds.ravel(), medians])
    return PooledFeatures(vector, tuple(copied))


def median_pool_baseline(emap: EstimateMap) -> IlluminantEstimate:
    """Per-channel median of the valid (raw) estimates, as an estimate."""
    vals = emap.valid_values()
    if vals.shape[0] == 0:
        raise DataError("estimate map has no valid cells")
    return clamp_normalize(np.median(vals, axis=0))


# ---------------------------------------------------------------------------
# The regressor

@dataclass(eq=False)
class AggregatorModel:
    channels: tuple[SvrModel, SvrModel, SvrModel]
    feat_mean: np.ndarray
    feat_scale: np.ndarray
    C: float
    gamma: float
    epsilon: float
    validation_median_deg: float

    def __post_init__(self):
        self.feat_mean = np.asarray(self.feat_mean, dtype=np.float64).reshape(-1)
        self.feat_scale = np.asarray(self.feat_scale, dtype=np.float64).reshape(-1)
        if self.feat_mean.shape != self.feat_scale.shape:
            raise ValueError("feature mean/scale shape mismatch")


def _standardizer(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def _predict_rows(
    channels, feats_std: np.ndarray
) -> np.ndarray:
    cols = [predict(ch, feats_std) for ch in channels]
    return np.stack(cols, axis=1)


def _assemble(raw_rows: np.ndarray) -> np.ndarray:
    clamped = np.maximum(raw_rows, 1e-6)
    return clamped / np.linalg.norm(clamped, axis=1, keepdims=True)


def fit_aggregator(
    features,
    targets,
    val_features=None,
    val_targets=None,
    grid=DEFAULT_GRID,
    tol: float = 1e-5,
) -> AggregatorModel:
    """Select hyperparameters on a validation split, refit on everything.

    features: (n, 57) pooled vectors (or PooledFeatures). targets: (n, 3)
    illuminants (any scale, rows are normalized). When no validation pairs
    are given, every fourth sample (indices 3, 7, 11, ...) is held out for
    selection. The selection score is the median angular error of the
    assembled estimates; ties keep the earlier grid entry (C, then gamma,
    then epsilon order).
    """
    F = _as_feature_matrix(features)
    T = _as_target_matrix(targets, F.shape[0])
    if val_features is not None:
        VF = _as_feature_matrix(val_features)
        VT = _as_target_matrix(val_targets, VF.shape[0])
        train_F, train_T = F, T
    else:
        if F.shape[0] < 8:
            raise DataError("need at least 8 samples to split off validation")
        idx = np.arange(F.shape[0])
        val_idx = idx[3::4]
        tr_idx = np.setdiff1d(idx, val_idx)
        VF, VT = F[val_idx], T[val_idx]
        train_F, train_T = F[tr_idx], T[tr_idx]
    all_F = np.vstack([train_F, VF])
    all_T = np.vstack([train_T, VT])
    mean, scale = _standardizer(all_F)
    if np.all(all_F.std(axis=0) == 0):
        raise DataError("features have zero variance in every dimension")
    trs = (train_F - mean) / scale
    vls = (VF - mean) / scale
    best = None
    for C, gamma, epsilon in itertools.product(*grid):
        channels = tuple(
            fit_epsilon_svr(trs, train_T[:, ch], C=C, epsilon=epsilon, gamma=gamma, tol=tol)
            for ch in range(3)
        )
        est = _assemble(_predict_rows(channels, vls))
        median = float(np.median(angular_error_rows(est, VT)))
        if best is None or median < best[0]:
            best = (median, C, gamma, epsilon)
    median, C, gamma, epsilon = best
    als = (all_F - mean) / scale
    channels = tuple(
        fit_epsilon_svr(als, all_T[:, ch], C=C, epsilon=epsilon, gamma=gamma, tol=tol)
        for ch in range(3)
    )
    return AggregatorModel(channels, mean, scale, C, gamma, epsilon, median)


def _as_feature_matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray) and features.ndim == 2:
        mat = features.astype(np.float64)
    else:
        rows = [
            f.vector if isinstance(f, PooledFeatures) else np.asarray(f, dtype=np.float64)
            for f in features
        ]
        mat = np.stack(rows)
    if mat.shape[1] != FEATURE_DIM:
        raise ValueError(f"expected {FEATURE_DIM}-dimensional features")
    if not np.all(np.isfinite(mat)):
        raise DataError("features contain non-finite values")
    return mat


def _as_target_matrix(targets, n: int) -> np.ndarray:
    if targets is None:
        raise ValueError("targets are required")
    rows = [
        t.rgb if isinstance(t, IlluminantEstimate) else np.asarray(t, dtype=np.float64)
        for t in (targets if not isinstance(targets, np.ndarray) else targets)
    ]
    T = np.stack(rows).astype(np.float64)
    if T.shape != (n, 3):
        raise ValueError(f"targets must be ({n}, 3)")
    norms = np.linalg.norm(T, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero target illuminant")
    return T / norms


def predict_global(model: AggregatorModel, emap: EstimateMap) -> IlluminantEstimate:
    """Pool an estimate map and regress the scene illuminant."""
    feats = pool_features(emap)
    std = (feats.vector - model.feat_mean) / model.feat_scale
    raw = np.array([predict(ch, std[None, :])[0] for ch in model.channels])
    if not np.all(np.isfinite(raw)):
        raise DegenerateEstimateError("regressor produced non-finite output")
    return clamp_normalize(raw)


# ---------------------------------------------------------------------------
# Serialization: float64 throughout so a save/load round trip reproduces
# predictions bit for bit. Layout (little-endian): magic "ILAG", u32 version,
# u32 feature dim, f64 C, gamma, epsilon, validation median, f64 mean and
# scale vectors, then per channel: u32 sv count, f64 bias, f64 coefficients,
# f64 support vectors (row-major).

def save_aggregator(path, model: AggregatorModel, metadata: dict | None = None) -> None:
    path = Path(path)
    d = model.feat_mean.size
    blob = bytearray()
    blob += _AGG_MAGIC
    blob += struct.pack("<2I", _AGG_VERSION, d)
    blob += struct.pack(
        "<4d", model.C, model.gamma, model.epsilon, model.validation_median_deg
    )
    blob += model.feat_mean.astype("<f8").tobytes()
    blob += model.feat_scale.astype("<f8").tobytes()
    for ch in model.channels:
        m = ch.support_vectors.shape[0]
        if ch.support_vectors.shape != (m, d):
            raise DataError("support vector dimension does not match features")
        blob += struct.pack("<I", m)
        blob += struct.pack("<d", ch.bias)
        blob += ch.coefficients.astype("<f8").tobytes()
        blob += ch.support_vectors.astype("<f8").tobytes()
    path.write_bytes(bytes(blob))
    sidecar = {
        "kind": "map-aggregator",
        "hyperparameters": {"C": model.C, "gamma": model.gamma, "epsilon": model.epsilon},
        "validation_median_deg": model.validation_median_deg,
    }
    sidecar.update(metadata or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_aggregator(path) -> AggregatorModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read aggregator {path}: {exc}") from exc
    if raw[:4] != _AGG_MAGIC:
        raise DataError(f"{path}: not an aggregator model file")
    version, d = struct.unpack_from("<2I", raw, 4)
    if version != _AGG_VERSION:
        raise DataError(f"{path}: unsupported aggregator version {version}")
    offset = 12
    C, gamma, epsilon, val_median = struct.unpack_from("<4d", raw, offset)
    offset += 32

    def take_f64(count):
        nonlocal offset
        if len(raw) - offset < 8 * count:
            raise DataError(f"{path}: aggregator file truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return arr.astype(np.float64)

    mean = take_f64(d)
    scale = take_f64(d)
    channels = []
    for _ in range(3):
        (m,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        (bias,) = struct.unpack_from("<d", raw, offset)
        offset += 8
        coeff = take_f64(m)
        svs = take_f64(m * d).reshape(m, d)
        channels.append(SvrModel(svs, coeff, float(bias), float(gamma)))
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes after aggregator payload")
    return AggregatorModel(
        tuple(channels), mean, scale, float(C), float(gamma), float(epsilon), float(val_median)
    )
