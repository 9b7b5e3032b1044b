"""Angular error between illuminants and summary statistics over error sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def angular_error(estimate, truth) -> float:
    """Angle in degrees between two RGB directions.

    Both vectors must be nonzero, nonnegative, and finite; magnitudes do not
    matter. The cosine is clamped to [-1, 1] before arccos so parallel
    vectors come out at exactly 0.
    """
    a = np.asarray(estimate, dtype=np.float64).reshape(-1)
    b = np.asarray(truth, dtype=np.float64).reshape(-1)
    if a.shape != (3,) or b.shape != (3,):
        raise ValueError("angular_error expects RGB triplets")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("angular_error expects finite vectors")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("angular_error expects nonnegative vectors")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("angular_error is undefined for zero vectors")
    cos = float(np.dot(a, b)) / (na * nb)
    cos = min(1.0, max(-1.0, cos))
    return float(np.degrees(np.arccos(cos)))


def angular_error_rows(A, B) -> np.ndarray:
    """Row-wise angular error in degrees between two (n, 3) arrays."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise ValueError("expected matching (n, 3) arrays")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("angular error is undefined for zero vectors")
    cos = np.clip(np.sum(A * B, axis=1) / (na * nb), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def pixelwise_angular_error(estimate_field, truth_field) -> np.ndarray:
    """(H, W) map of angular errors in degrees between two (H, W, 3) fields."""
    E = np.asarray(estimate_field, dtype=np.float64)
    T = np.asarray(truth_field, dtype=np.float64)
    if E.shape != T.shape or E.ndim != 3 or E.shape[2] != 3:
        raise ValueError("expected matching (H, W, 3) fields")
    h, w = E.shape[:2]
    return angular_error_rows(E.reshape(-1, 3), T.reshape(-1, 3)).reshape(h, w)


@dataclass(frozen=True)
class ErrorStats:
    count: int
    mean: float
    median: float
    pct90: float
    max: float

    def as_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "median": self.median,
            "pct90": self.pct90,
            "max": self.max,
        }


def error_stats(errors) -> ErrorStats:
    """Summary statistics (degrees) over a nonempty collection of errors."""
    e = np.asarray(list(errors), dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    if not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite")
    return ErrorStats(
        count=int(e.size),
        mean=float(e.mean()),
        median=float(np.median(e)),
        pct90=float(np.percentile(e, 90)),
        max=float(e.max()),
    )


def error_histogram(errors, bin_width: float = 0.25):
    """Fixed-width histogram of errors starting at 0 degrees.

    Returns (edges, counts) where edges has len(counts) + 1 entries. The last
    bin is stretched to include the maximum so every error lands in a bin.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    e = np.asarray(list(errors), dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("no errors to histogram")
    top = max(float(e.max()), bin_width)
    nbins = int(np.ceil(top / bin_width))
    edges = np.arange(nbins + 1, dtype=np.float64) * bin_width
    edges[-1] = max(edges[-1], top)
    counts, _ = np.histogram(e, bins=edges)
    return edges, counts
