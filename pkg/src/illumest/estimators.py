"""Classical statistics-based illuminant estimators.

One three-parameter family covers them all: smooth the image with a Gaussian
(sigma), take the gradient magnitude of a given order (0 = raw values,
1 = first, 2 = second derivatives), then Minkowski-pool each channel with
exponent p over the unmasked pixels. The pooled triplet, clamped and
normalized, is the estimate.

Named configurations:

    GW    gray world            order 0, p 1,   sigma 0
    WP    white patch           order 0, p inf, sigma 0
    SoG   shades of gray        order 0, p 4,   sigma 0
    gGW   general gray world    order 0, p 9,   sigma 9
    GE1   gray edge             order 1, p 1,   sigma 6
    GE2   second-order edge     order 2, p 1,   sigma 1
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateEstimateError
from .imaging import IlluminantEstimate, LinearImage, clamp_normalize

#: Gaussian kernels are cut at 3 sigma (radius int(3*sigma + 0.5)).
GAUSS_TRUNCATE = 3.0


@dataclass(frozen=True)
class EstimatorConfig:
    """Parameters of the statistics family.

    minkowski_p may be math.inf for max pooling. sigma is in pixels;
    sigma == 0 skips smoothing entirely.
    """

    derivative_order: int = 0
    minkowski_p: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.derivative_order not in (0, 1, 2):
            raise ValueError("derivative_order must be 0, 1 or 2")
        if not (self.minkowski_p >= 1):  # also rejects NaN
            raise ValueError("minkowski_p must be >= 1 (math.inf allowed)")
        if not (self.sigma >= 0) or math.isinf(self.sigma):
            raise ValueError("sigma must be finite and >= 0")


NAMED_ESTIMATORS: dict[str, EstimatorConfig] = {
    "GW": EstimatorConfig(0, 1.0, 0.0),
    "WP": EstimatorConfig(0, math.inf, 0.0),
    "SoG": EstimatorConfig(0, 4.0, 0.0),
    "gGW": EstimatorConfig(0, 9.0, 9.0),
    "GE1": EstimatorConfig(1, 1.0, 6.0),
    "GE2": EstimatorConfig(2, 1.0, 1.0),
}


def _smooth(channel: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return channel
    return ndimage.gaussian_filter(
        channel, sigma=sigma, mode="reflect", truncate=GAUSS_TRUNCATE
    )


def _derivative_magnitude(channel: np.ndarray, order: int) -> np.ndarray:
    """Gradient magnitude of the requested order.

    First order: sqrt(gx^2 + gy^2) with central differences (one-sided at the
    borders). Second order: Frobenius norm of the Hessian, all four entries,
    built by differentiating the first-order fields the same way.
    """
    if order == 0:
        return np.abs(channel)
    gy, gx = np.gradient(channel)
    if order == 1:
        return np.sqrt(gx * gx + gy * gy)
    gyy, gyx = np.gradient(gy)
    gxy, gxx = np.gradient(gx)
    return np.sqrt(gxx * gxx + gxy * gxy + gyx * gyx + gyy * gyy)


def _minkowski_pool(values: np.ndarray, p: float) -> float:
    if math.isinf(p):
        return float(values.max())
    if p == 1.0:
        return float(values.mean())
    return float(np.mean(values.astype(np.float64) ** p) ** (1.0 / p))


def estimate_illuminant(
    image: LinearImage, config: EstimatorConfig
) -> IlluminantEstimate:
    """Run one member of the statistics family on an image.

    Masked pixels are excluded from pooling (but still participate in the
    smoothing and derivative stencils of their neighbors). An image whose
    pooled statistics are zero in every channel has no usable content for
    this estimator and raises DegenerateEstimateError.
    """
    keep = ~image.excluded()
    if not keep.any():
        raise DegenerateEstimateError("every pixel is masked")
    response = np.empty(3, dtype=np.float64)
    for ch in range(3):
        plane = image.data[:, :, ch].astype(np.float64)
        plane = _smooth(plane, config.sigma)
        mag = _derivative_magnitude(plane, config.derivative_order)
        response[ch] = _minkowski_pool(mag[keep], config.minkowski_p)
    if float(np.linalg.norm(response)) == 0.0:
        raise DegenerateEstimateError(
            "pooled statistics are zero in all channels (flat or empty content)"
        )
    return clamp_normalize(response)


def estimate_named(image: LinearImage, name: str) -> IlluminantEstimate:
    """Run one of the named estimators (GW, WP, SoG, gGW, GE1, GE2)."""
    try:
        config = NAMED_ESTIMATORS[name]
    except KeyError:
        known = ", ".join(sorted(NAMED_ESTIMATORS))
        raise ValueError(f"unknown estimator {name!r} (known: {known})") from None
    return estimate_illuminant(image, config)


def do_nothing() -> IlluminantEstimate:
    """The no-correction baseline: a uniform illuminant."""
    return IlluminantEstimate.uniform()
