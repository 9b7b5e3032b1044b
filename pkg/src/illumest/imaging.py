"""Core value types for linear images, illuminants, patches and estimate maps,
plus the geometric primitives built on them (patch extraction, von Kries
correction, map upsampling, resizing).

Images are linear-light RGB, channel order R,G,B, stored float32 with
nonnegative finite values. Masks mark pixels to *exclude* (True / nonzero =
excluded). Illuminant estimates are unit-norm nonnegative float64 triplets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import DataError, NumericError

#: Floor applied to estimate components before normalization, and the division
#: guard for von Kries correction.
ILLUM_EPS = 1e-6

#: Default side length of square patches fed to the patch estimator.
DEFAULT_PATCH_SIZE = 32


def _as_triplet(rgb) -> np.ndarray:
    arr = np.asarray(rgb, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"expected an RGB triplet, got shape {np.shape(rgb)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("illuminant components must be finite")
    if np.any(arr < 0):
        raise ValueError("illuminant components must be nonnegative")
    return arr


@dataclass(frozen=True)
class IlluminantEstimate:
    """A unit 2-norm, nonnegative RGB illuminant direction."""

    rgb: np.ndarray

    def __post_init__(self):
        arr = _as_triplet(self.rgb)
        n = float(np.linalg.norm(arr))
        if n == 0.0:
            raise ValueError("illuminant must have at least one positive component")
        arr = arr / n
        arr.flags.writeable = False
        object.__setattr__(self, "rgb", arr)

    @classmethod
    def from_rgb(cls, r: float, g: float, b: float) -> "IlluminantEstimate":
        return cls(np.array([r, g, b], dtype=np.float64))

    @classmethod
    def uniform(cls) -> "IlluminantEstimate":
        """The do-nothing illuminant: equal energy in all channels."""
        return cls(np.ones(3))

    def __iter__(self):
        return iter(self.rgb.tolist())

    def __repr__(self):
        r, g, b = self.rgb
        return f"IlluminantEstimate({r:.6f}, {g:.6f}, {b:.6f})"


def clamp_normalize(raw) -> IlluminantEstimate:
    """Clamp a raw RGB response to the ILLUM_EPS floor and normalize.

    This is the single place raw estimator outputs become estimates, so the
    floor-then-normalize convention is identical everywhere.
    """
    arr = np.asarray(raw, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"expected an RGB triplet, got shape {np.shape(raw)}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("estimator produced a non-finite response")
    return IlluminantEstimate(np.maximum(arr, ILLUM_EPS))


@dataclass(eq=False)
class LinearImage:
    """Linear RGB image with an optional exclusion mask.

    data: (H, W, 3) float32, nonnegative, finite.
    mask: (H, W) bool, True marks pixels excluded from all statistics.
    """

    data: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DataError(f"image must be (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError("image must have at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise DataError("image contains non-finite values")
        if np.any(arr < 0):
            raise DataError("image contains negative values; expected linear light")
        self.data = arr
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.shape != arr.shape[:2]:
                raise DataError(
                    f"mask shape {m.shape} does not match image {arr.shape[:2]}"
                )
            self.mask = m.astype(bool)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def excluded(self) -> np.ndarray:
        """Boolean (H, W) exclusion map, all-False when there is no mask."""
        if self.mask is None:
            return np.zeros(self.data.shape[:2], dtype=bool)
        return self.mask


@dataclass(eq=False)
class Patch:
    """A square window cut from an image.

    origin is (row, col) of the top-left pixel. ``masked`` is set when the
    window overlaps any excluded pixel; ``low_contrast`` is set by the
    histogram stretch when the window had no dynamic range at all.
    """

    origin: tuple[int, int]
    size: int
    pixels: np.ndarray
    masked: bool = False
    low_contrast: bool = False


@dataclass(eq=False)
class EstimateMap:
    """Grid of per-patch illuminant estimates.

    values: (grid_h, grid_w, 3) float64; rows are unit vectors where valid.
    validity: (grid_h, grid_w) bool, False where the source patch was masked.
    patch_size: side length of the source patches (grid cell footprint).
    """

    values: np.ndarray
    validity: np.ndarray
    patch_size: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"estimate map must be (h, w, 3), got {v.shape}")
        self.values = v
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.validity.shape != v.shape[:2]:
            raise ValueError("validity grid does not match value grid")

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    def valid_values(self) -> np.ndarray:
        """(n, 3) array of the valid estimates, row-major grid order."""
        return self.values[self.validity]


def extract_patches(
    image: LinearImage, patch_size: int = DEFAULT_PATCH_SIZE, stride: int | None = None
) -> list[Patch]:
    """Tile the image with square patches (row-major order).

    stride defaults to patch_size (disjoint tiling). Windows that would
    overrun the image are dropped, so a W x H image yields
    floor((W - size) / stride) + 1 columns and the analogous row count.
    Patches overlapping any excluded pixel are returned with masked=True.
    """
    if patch_size < 1:
        raise ValueError("patch_size must be positive")
    if stride is None:
        stride = patch_size
    if stride < 1:
        raise ValueError("stride must be positive")
    h, w = image.data.shape[:2]
    if h < patch_size or w < patch_size:
        raise DataError(
            f"image {w}x{h} is smaller than the {patch_size}x{patch_size} patch size"
        )
    excl = image.excluded()
    patches = []
    for r in range(0, h - patch_size + 1, stride):
        for c in range(0, w - patch_size + 1, stride):
            win = image.data[r : r + patch_size, c : c + patch_size]
            hit = bool(excl[r : r + patch_size, c : c + patch_size].any())
            patches.append(Patch((r, c), patch_size, win.copy(), masked=hit))
    return patches


def resize_max_side(image: LinearImage, target: int = 1200) -> LinearImage:
    """Downscale so max(width, height) == target, bilinear; never upscales.

    The mask, when present, is resized nearest-neighbor and any touched
    pixel stays excluded.
    """
    if target < 1:
        raise ValueError("target must be positive")
    h, w = image.data.shape[:2]
    longest = max(h, w)
    if longest <= target:
        return image
    scale = target / longest
    new_w = max(1, round(w * scale))
    new_h = max(1, round(h * scale))
    data = cv2.resize(image.data, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    data = np.maximum(data, 0.0)
    mask = None
    if image.mask is not None:
        m = cv2.resize(
            image.mask.astype(np.uint8), (new_w, new_h), interpolation=cv2.INTER_NEAREST
        )
        mask = m.astype(bool)
    return LinearImage(data, mask)


def _illum_field(illuminant, shape: tuple[int, int]) -> np.ndarray:
    """Broadcast any accepted illuminant form to a (H, W, 3) float64 field."""
    h, w = shape
    if isinstance(illuminant, IlluminantEstimate):
        return np.broadcast_to(illuminant.rgb, (h, w, 3))
    if isinstance(illuminant, EstimateMap):
        return upsample_estimate_map(illuminant, (h, w))
    arr = np.asarray(illuminant, dtype=np.float64)
    if arr.shape == (3,):
        return np.broadcast_to(IlluminantEstimate(arr).rgb, (h, w, 3))
    if arr.shape == (h, w, 3):
        return arr
    raise ValueError(
        f"illuminant must be a triplet, an EstimateMap, or a {(h, w, 3)} field; "
        f"got shape {arr.shape}"
    )


def von_kries_correct(image: LinearImage, illuminant) -> LinearImage:
    """Divide out an illuminant channel-wise (diagonal correction).

    Accepts a single estimate, a per-pixel field, or an EstimateMap (which is
    upsampled to pixel resolution first). Every illuminant component involved
    must exceed the division guard; otherwise the correction is refused.
    """
    field_arr = _illum_field(illuminant, image.data.shape[:2])
    if not np.all(np.isfinite(field_arr)):
        raise NumericError("illuminant field contains non-finite values")
    if float(field_arr.min()) <= ILLUM_EPS:
        raise NumericError(
            "illuminant has a component at or below the division guard "
            f"({ILLUM_EPS}); refusing to divide"
        )
    out = image.data.astype(np.float64) / field_arr
    return LinearImage(out.astype(np.float32), image.mask)


def upsample_estimate_map(emap: EstimateMap, shape: tuple[int, int]) -> np.ndarray:
    """Bilinearly upsample a patch-grid estimate map to pixel resolution.

    Invalid cells are filled with the per-channel median of the valid cells
    before interpolation so they do not drag the field toward zero. Returns a
    (H, W, 3) float64 field of unit vectors (rows re-normalized after
    interpolation).
    """
    h, w = shape
    if not emap.validity.any():
        raise DataError("estimate map has no valid cells to upsample")
    values = emap.values.copy()
    if not emap.validity.all():
        fill = np.median(emap.valid_values(), axis=0)
        values[~emap.validity] = fill
    out = cv2.resize(
        values.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR
    ).astype(np.float64)
    norms = np.linalg.norm(out, axis=2, keepdims=True)
    if float(norms.min()) <= 0.0:
        raise NumericError("upsampled estimate field collapsed to zero norm")
    return out / norms
