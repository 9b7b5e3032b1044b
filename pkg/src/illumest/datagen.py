"""Synthetic data: diagonal-model scene rendering, multi-illuminant
relighting of single-illuminant images, and dataset indexing with the
three-fold rotation used for training and evaluation.

All randomness flows through numpy Generators. Set writers derive one child
seed per image from (seed, image index), so any image can be regenerated
alone and the set is identical no matter how it is chunked.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .imaging import (
    DEFAULT_PATCH_SIZE,
    IlluminantEstimate,
    LinearImage,
    von_kries_correct,
)
from . import io


@dataclass(frozen=True)
class SceneConfig:
    """Random rectangle scenes under the diagonal reflection model.

    num_surfaces counts the reflectance rectangles; the first one spans the
    whole canvas so every pixel is covered. Gaussian sensor noise (noise_std,
    linear units) is added after the illuminant multiplies the reflectance,
    and the result is clamped at zero.
    """

    width: int = 256
    height: int = 192
    num_surfaces: int = 20
    reflectance_lo: float = 0.05
    reflectance_hi: float = 0.95
    noise_std: float = 0.0

    def __post_init__(self):
        if self.width < DEFAULT_PATCH_SIZE or self.height < DEFAULT_PATCH_SIZE:
            raise ValueError(f"scene dimensions must be at least {DEFAULT_PATCH_SIZE}")
        if self.num_surfaces < 1:
            raise ValueError("num_surfaces must be >= 1")
        if not 0 <= self.reflectance_lo < self.reflectance_hi <= 1:
            raise ValueError("reflectance range must satisfy 0 <= lo < hi <= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def render_scene(
    config: SceneConfig, illuminant: IlluminantEstimate, rng: np.random.Generator
) -> LinearImage:
    """Paint random reflectance rectangles and light them.

    Rectangle sides are 8..45% of the respective canvas side, positions
    uniform with the rectangle fully inside. Per-rectangle draw order is
    fixed (width, height, x, y, color) so streams are reproducible.
    """
    w, h = config.width, config.height
    lo, hi = config.reflectance_lo, config.reflectance_hi
    reflect = np.empty((h, w, 3), dtype=np.float64)
    reflect[:] = rng.uniform(lo, hi, size=3)
    for _ in range(config.num_surfaces - 1):
        rw = max(1, round(float(rng.uniform(0.08, 0.45)) * w))
        rh = max(1, round(float(rng.uniform(0.08, 0.45)) * h))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        reflect[y0 : y0 + rh, x0 : x0 + rw] = rng.uniform(lo, hi, size=3)
    radiance = reflect * illuminant.rgb
    if config.noise_std > 0:
        radiance = radiance + rng.normal(0.0, config.noise_std, size=radiance.shape)
    return LinearImage(np.maximum(radiance, 0.0).astype(np.float32))


def sample_illuminant(rng: np.random.Generator, spread: float = 0.4) -> IlluminantEstimate:
    """A random illuminant direction: components uniform in 1 +- spread."""
    if not 0 <= spread < 1:
        raise ValueError("spread must be in [0, 1)")
    return IlluminantEstimate(rng.uniform(1.0 - spread, 1.0 + spread, size=3))


# ---------------------------------------------------------------------------
# Relighting

@dataclass(frozen=True)
class RelightConfig:
    num_illuminants: int = 2
    min_separation_frac: float = 1.0 / 3.0  # of min(width, height)
    smoothing_sigma: float | None = None  # None: min(width, height) / 12
    max_redraws: int = 1000

    def __post_init__(self):
        if self.num_illuminants < 1:
            raise ValueError("num_illuminants must be >= 1")
        if self.min_separation_frac < 0:
            raise ValueError("min_separation_frac must be >= 0")
        if self.smoothing_sigma is not None and self.smoothing_sigma <= 0:
            raise ValueError("smoothing_sigma must be positive")
        if self.max_redraws < 1:
            raise ValueError("max_redraws must be >= 1")


@dataclass(eq=False)
class RelightResult:
    image: LinearImage
    truth_field: np.ndarray  # (H, W, 3) float64, unit rows
    centers: np.ndarray  # (k, 2) as (row, col)
    illuminants: list[IlluminantEstimate]


def _draw_centers(
    rng: np.random.Generator, k: int, h: int, w: int, min_sep: float, max_redraws: int
) -> np.ndarray:
    for _ in range(max_redraws):
        pts = rng.uniform(size=(k, 2)) * np.array([h, w], dtype=np.float64)
        ok = True
        for a in range(k):
            for b in range(a + 1, k):
                if float(np.linalg.norm(pts[a] - pts[b])) < min_sep:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return pts
    raise DataError(
        f"could not place {k} centers at least {min_sep:.1f}px apart "
        f"in a {w}x{h} image after {max_redraws} draws"
    )


def relight(
    image: LinearImage,
    truth: IlluminantEstimate,
    pool,
    config: RelightConfig,
    rng: np.random.Generator,
) -> RelightResult:
    """Turn a single-illuminant image into a multi-illuminant one.

    The original cast is divided out first (so the scene is balanced), then
    k illuminants drawn from the pool without replacement are anchored at
    random centers (pairwise at least min_separation_frac * min(w, h) apart),
    every pixel takes its nearest center's illuminant, and the resulting
    field is Gaussian-smoothed and renormalized per pixel before multiplying
    the balanced image. The smoothed field is the per-pixel ground truth.
    """
    k = config.num_illuminants
    pool = list(pool)
    if len(pool) < k:
        raise DataError(f"pool has {len(pool)} illuminants, need {k}")
    h, w = image.height, image.width
    balanced = von_kries_correct(image, truth)
    chosen_idx = rng.choice(len(pool), size=k, replace=False)
    chosen = [pool[int(i)] for i in chosen_idx]
    min_sep = config.min_separation_frac * min(w, h)
    centers = _draw_centers(rng, k, h, w, min_sep, config.max_redraws)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    dist2 = np.stack(
        [(rows - cy) ** 2 + (cols - cx) ** 2 for cy, cx in centers], axis=0
    )
    labels = np.argmin(dist2, axis=0)
    palette = np.stack([ill.rgb for ill in chosen])
    field = palette[labels]  # (H, W, 3)
    sigma = config.smoothing_sigma if config.smoothing_sigma is not None else min(w, h) / 12.0
    for ch in range(3):
        field[:, :, ch] = ndimage.gaussian_filter(
            field[:, :, ch], sigma=sigma, mode="reflect", truncate=3.0
        )
    field /= np.linalg.norm(field, axis=2, keepdims=True)
    relit = (balanced.data.astype(np.float64) * field).astype(np.float32)
    return RelightResult(LinearImage(relit, image.mask), field, centers, chosen)


# ---------------------------------------------------------------------------
# Dataset indexing and fold rotation

@dataclass(frozen=True)
class IndexEntry:
    image: str  # path relative to the index root
    illum: str  # ground-truth sidecar, relative to the index root
    fold: int


@dataclass
class DatasetIndex:
    root: Path
    entries: list[IndexEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, i: int) -> Path:
        return self.root / self.entries[i].image

    def load_entry(self, i: int):
        """(LinearImage, truth) where truth is a triplet or a field."""
        entry = self.entries[i]
        image = io.load_image(self.root / entry.image)
        truth = io.load_ground_truth_file(self.root / entry.illum)
        if isinstance(truth, np.ndarray) and truth.shape[:2] != image.data.shape[:2]:
            raise DataError(
                f"{entry.illum}: ground-truth field {truth.shape[:2]} does not "
                f"match image {image.data.shape[:2]}"
            )
        return image, truth


@dataclass
class FoldSplit:
    run: int
    train: list[IndexEntry]
    val: list[IndexEntry]
    test: list[IndexEntry]


def load_index(path) -> DatasetIndex:
    """Read index.json (path may be the file or its directory)."""
    path = Path(path)
    index_file = path / "index.json" if path.is_dir() else path
    try:
        payload = json.loads(index_file.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read index {index_file}: {exc}") from exc
    entries_raw = payload.get("entries")
    if not isinstance(entries_raw, list) or not entries_raw:
        raise DataError(f"{index_file}: 'entries' must be a nonempty list")
    root = index_file.parent
    entries = []
    for pos, item in enumerate(entries_raw):
        try:
            image = item["image"]
            fold = int(item["fold"])
            illum = item.get("illum", str(Path(image).with_suffix("")) + ".illum.json")
        except (TypeError, KeyError, ValueError) as exc:
            raise DataError(f"{index_file}: bad entry {pos}: {exc}") from exc
        if not (root / image).exists():
            raise DataError(f"{index_file}: entry {pos}: missing image {image}")
        if not (root / illum).exists():
            raise DataError(f"{index_file}: entry {pos}: missing ground truth {illum}")
        entries.append(IndexEntry(image, illum, fold))
    return DatasetIndex(root, entries)


def save_index(index: DatasetIndex) -> None:
    payload = {
        "entries": [
            {"image": e.image, "illum": e.illum, "fold": e.fold} for e in index.entries
        ]
    }
    (index.root / "index.json").write_text(json.dumps(payload, indent=2) + "\n")


def three_folds(index: DatasetIndex) -> list[FoldSplit]:
    """The three-run rotation: run r tests fold r, validates fold (r+1) % 3,
    trains on the remaining fold."""
    folds = sorted({e.fold for e in index.entries})
    if folds != [0, 1, 2]:
        raise DataError(f"expected folds 0, 1, 2; index has {folds}")
    by_fold = {f: [e for e in index.entries if e.fold == f] for f in (0, 1, 2)}
    splits = []
    for run in range(3):
        test_f = run
        val_f = (run + 1) % 3
        train_f = (run + 2) % 3
        splits.append(
            FoldSplit(run, by_fold[train_f], by_fold[val_f], by_fold[test_f])
        )
    return splits


def _child_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, i]))


def generate_scene_set(
    out_dir,
    count: int,
    config: SceneConfig = SceneConfig(),
    seed: int = 0,
    illuminant_spread: float = 0.4,
) -> DatasetIndex:
    """Write `count` rendered scenes with truth sidecars, folds i % 3."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        rng = _child_rng(seed, i)
        truth = sample_illuminant(rng, illuminant_spread)
        image = render_scene(config, truth, rng)
        name = f"scene_{i:04d}.pfm"
        io.save_image(out / name, image)
        io.save_ground_truth(out / name, truth)
        entries.append(IndexEntry(name, f"scene_{i:04d}.illum.json", i % 3))
    index = DatasetIndex(out, entries)
    save_index(index)
    manifest = {"kind": "scenes", "count": count, "seed": seed,
                "illuminant_spread": illuminant_spread, "config": asdict(config)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return index


def generate_relit_set(
    out_dir,
    source: DatasetIndex,
    config: RelightConfig = RelightConfig(),
    seed: int = 0,
) -> DatasetIndex:
    """Relight every source image against the pool of all source truths.

    Source entries must carry per-image (triplet) truth. Folds are inherited
    so the rotation stays aligned with the source set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truths = []
    for i in range(len(source)):
        truth = io.load_ground_truth_file(source.root / source.entries[i].illum)
        if not isinstance(truth, IlluminantEstimate):
            raise DataError(
                f"{source.entries[i].illum}: relighting needs per-image truth"
            )
        truths.append(truth)
    entries = []
    for i in range(len(source)):
        image, _ = source.load_entry(i)
        rng = _child_rng(seed, i)
        result = relight(image, truths[i], truths, config, rng)
        name = f"relit_{i:04d}.pfm"
        io.save_image(out / name, result.image)
        io.save_ground_truth(out / name, result.truth_field)
        entries.append(IndexEntry(name, f"relit_{i:04d}.illum.json", source.entries[i].fold))
    index = DatasetIndex(out, entries)
    save_index(index)
    manifest = {"kind": "relit", "count": len(source), "seed": seed,
                "config": asdict(config), "source": str(source.root)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return index
