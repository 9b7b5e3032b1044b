"""Multi-illuminant detection from a patch estimate map.

The valid estimates are projected to the chromaticity plane (R/G, B/G), a
2D Gaussian kernel density estimate is evaluated on a square grid, and the
density's modes are found with a scale-space sweep: local maxima of the
finest grid must survive a series of Gaussian blurrings (sigma doubling per
level) to count as modes. Weak modes are dropped relative to the strongest,
each surviving mode becomes an RGB direction (r, 1, b), and the scene is
called "multiple" when any pair of modes is farther apart than the angular
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, NumericError
from .imaging import EstimateMap, IlluminantEstimate
from .metrics import angular_error

#: Chromaticity points need a green component above this to be projectable.
GREEN_FLOOR = 1e-6


@dataclass(frozen=True)
class DetectorConfig:
    resolution: int = 256
    retention_ratio: float = 0.5  # keep modes with density >= ratio * strongest
    angle_threshold_deg: float = 3.0
    scale_levels: int = 5

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8")
        if not 0 < self.retention_ratio <= 1:
            raise ValueError("retention_ratio must be in (0, 1]")
        if self.angle_threshold_deg <= 0:
            raise ValueError("angle_threshold_deg must be positive")
        if self.scale_levels < 1:
            raise ValueError("scale_levels must be >= 1")


@dataclass(frozen=True)
class ChromaticityPoint:
    r: float  # R / G
    b: float  # B / G


@dataclass(eq=False)
class DensityGrid:
    """KDE evaluated on a regular grid.

    values[i, j] is the density at r-axis cell i, b-axis cell j (cell
    centers). bounds is (r_min, r_max, b_min, b_max); bandwidth (h_r, h_b).
    """

    values: np.ndarray
    bounds: tuple[float, float, float, float]
    bandwidth: tuple[float, float]

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def cell_size(self) -> tuple[float, float]:
        r0, r1, b0, b1 = self.bounds
        n = self.resolution
        return (r1 - r0) / n, (b1 - b0) / n

    def cell_center(self, i: int, j: int) -> ChromaticityPoint:
        r0, _, b0, _ = self.bounds
        dr, db = self.cell_size()
        return ChromaticityPoint(r0 + (i + 0.5) * dr, b0 + (j + 0.5) * db)


@dataclass
class Mode:
    point: ChromaticityPoint
    density: float

    def rgb(self) -> np.ndarray:
        """Back-projection to an RGB direction with unit green."""
        return np.array([self.point.r, 1.0, self.point.b])


@dataclass
class DetectionResult:
    decision: str  # "single" or "multiple"
    modes: list[Mode]
    max_pairwise_angle_deg: float

    @property
    def multiple(self) -> bool:
        return self.decision == "multiple"


def project_chromaticity(emap: EstimateMap) -> tuple[np.ndarray, int]:
    """Valid estimates as (n, 2) chromaticity points, plus the dropped count.

    Estimates whose green component sits at or below the floor cannot be
    divided through and are dropped (counted, not errored: a handful of
    saturated patches should not kill the detector).
    """
    vals = emap.valid_values()
    if vals.shape[0] == 0:
        raise DataError("estimate map has no valid cells to project")
    green = vals[:, 1]
    keep = green > GREEN_FLOOR
    dropped = int(np.count_nonzero(~keep))
    vals = vals[keep]
    if vals.shape[0] == 0:
        raise DataError("all estimates had zero green; chromaticity undefined")
    points = np.stack([vals[:, 0] / vals[:, 1], vals[:, 2] / vals[:, 1]], axis=1)
    return points, dropped


def _silverman(points_1d: np.ndarray) -> float:
    n = points_1d.size
    if n < 2:
        return 0.0
    sd = float(np.std(points_1d, ddof=1))
    return 1.06 * sd * n ** (-0.2)


def kde_2d(points: np.ndarray, config: DetectorConfig = DetectorConfig()) -> DensityGrid:
    """Gaussian product-kernel density on a resolution^2 grid.

    Bandwidth per axis is Silverman's rule, floored at two grid cells so the
    density is never narrower than the grid can represent. Bounds pad the
    data by three bandwidths (fallback pad 0.05 when an axis has no spread).
    The grid integrates to ~1 over its own extent.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a nonempty (n, 2) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("chromaticity points must be finite")
    n = pts.shape[0]
    res = config.resolution
    h = np.array([_silverman(pts[:, 0]), _silverman(pts[:, 1])])
    pad = np.where(h > 0, 3.0 * h, 0.05)
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    cell = (hi - lo) / res
    h = np.maximum(h, 2.0 * cell)  # floor: two grid cells per axis
    centers_r = lo[0] + (np.arange(res) + 0.5) * cell[0]
    centers_b = lo[1] + (np.arange(res) + 0.5) * cell[1]
    # separable evaluation: (res, n) kernel matrices per axis
    kr = np.exp(-((centers_r[:, None] - pts[None, :, 0]) ** 2) / (2.0 * h[0] ** 2))
    kb = np.exp(-((centers_b[:, None] - pts[None, :, 1]) ** 2) / (2.0 * h[1] ** 2))
    values = (kr @ kb.T) / (n * 2.0 * np.pi * h[0] * h[1])
    return DensityGrid(
        values=values,
        bounds=(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])),
        bandwidth=(float(h[0]), float(h[1])),
    )


def _local_maxima(values: np.ndarray) -> list[tuple[int, int]]:
    """Cells strictly greater than all 8 neighbors, row-major order.

    A perfectly flat grid has no strict maxima; the global argmax (first in
    row-major order) then stands in so at least one candidate always exists.
    """
    padded = np.pad(values, 1, mode="constant", constant_values=-np.inf)
    center = padded[1:-1, 1:-1]
    strict = np.ones_like(values, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            strict &= center > padded[1 + di : padded.shape[0] - 1 + di,
                                      1 + dj : padded.shape[1] - 1 + dj]
    coords = np.argwhere(strict)
    if coords.size == 0:
        flat = int(np.argmax(values))
        return [(flat // values.shape[1], flat % values.shape[1])]
    return [tuple(c) for c in coords]


def _hill_climb(values: np.ndarray, start: tuple[int, int]) -> tuple[int, int]:
    """Steepest-ascent walk to a local maximum; deterministic neighbor order."""
    h, w = values.shape
    i, j = start
    for _ in range(h * w):
        best = values[i, j]
        best_pos = (i, j)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and values[ni, nj] > best:
                    best = values[ni, nj]
                    best_pos = (ni, nj)
        if best_pos == (i, j):
            return i, j
        i, j = best_pos
    return i, j


def find_modes(grid: DensityGrid, config: DetectorConfig = DetectorConfig()) -> list[Mode]:
    """Scale-space mode finding.

    Candidates are the strict local maxima of the finest grid. For each blur
    level (sigma = 1, 2, 4, ... grid cells) every candidate hill-climbs on
    the blurred grid; candidates arriving at the same attractor merge, the
    one with the highest finest-grid density surviving (row-major first on
    ties). Survivors keep their finest-grid position and density. Modes
    weaker than retention_ratio times the strongest are dropped, and the
    result is sorted by density, strongest first.
    """
    values = grid.values
    candidates = _local_maxima(values)
    # densities on the finest grid decide merges and retention
    survivors = {(i, j): values[i, j] for (i, j) in candidates}
    sigma = 1.0
    for _level in range(config.scale_levels):
        blurred = ndimage.gaussian_filter(values, sigma=sigma, mode="reflect", truncate=3.0)
        attractors: dict[tuple[int, int], tuple[int, int]] = {}
        merged: dict[tuple[int, int], tuple[int, int]] = {}
        for pos in sorted(survivors):  # row-major order makes merging deterministic
            basin = _hill_climb(blurred, pos)
            held = merged.get(basin)
            if held is None or survivors[pos] > survivors[held]:
                merged[basin] = pos
            attractors[pos] = basin
        survivors = {pos: survivors[pos] for pos in merged.values()}
        sigma *= 2.0
    peak = max(survivors.values())
    if peak <= 0:
        raise NumericError("density grid is nonpositive everywhere")
    modes = [
        Mode(grid.cell_center(i, j), float(d))
        for (i, j), d in survivors.items()
        if d >= config.retention_ratio * peak
    ]
    modes.sort(key=lambda m: (-m.density, m.point.r, m.point.b))
    return modes


def detect_multiple(
    emap: EstimateMap, config: DetectorConfig = DetectorConfig()
) -> DetectionResult:
    """Single-vs-multiple decision for an estimate map.

    "multiple" exactly when at least two retained modes subtend more than
    the angular threshold; one mode is always "single".
    """
    points, _dropped = project_chromaticity(emap)
    grid = kde_2d(points, config)
    modes = find_modes(grid, config)
    max_angle = 0.0
    for a in range(len(modes)):
        for b in range(a + 1, len(modes)):
            max_angle = max(max_angle, angular_error(modes[a].rgb(), modes[b].rgb()))
    decision = "multiple" if max_angle > config.angle_threshold_deg else "single"
    return DetectionResult(decision, modes, max_angle)


def mode_estimates(result: DetectionResult) -> list[IlluminantEstimate]:
    """Retained modes as normalized illuminant estimates, strongest first."""
    return [IlluminantEstimate(m.rgb()) for m in result.modes]
