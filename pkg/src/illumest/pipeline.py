"""End-to-end estimation: patch map, single/multiple branch, correction.

The full pipeline runs the patch network over the image, asks the detector
whether the map carries one illuminant or several, and then either regresses
one global estimate (single) or upsamples the map into a per-pixel field
(multiple). Correction divides the image by the chosen illuminant with its
green component rescaled to 1, so overall exposure is preserved and only the
color cast moves.

The evaluation harness walks a dataset index, runs any mix of methods, and
reports angular-error statistics. Scalar-vs-scalar comparisons use the plain
angular error; as soon as either side is per-pixel, the error is the mean
per-pixel angle over unmasked pixels.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .aggregator import AggregatorModel, median_pool_baseline, predict_global
from .cnn import CnnModel, estimate_map
from .detector import DetectionResult, DetectorConfig, detect_multiple
from .errors import DataError
from .estimators import NAMED_ESTIMATORS, estimate_named
from .imaging import (
    EstimateMap,
    IlluminantEstimate,
    LinearImage,
    resize_max_side,
    upsample_estimate_map,
    von_kries_correct,
)
from .metrics import (
    ErrorStats,
    angular_error,
    error_histogram,
    error_stats,
    pixelwise_angular_error,
)

MODES = ("auto", "force-single", "force-multiple", "oracle")


@dataclass
class PipelineConfig:
    cnn: CnnModel
    aggregator: AggregatorModel | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    mode: str = "auto"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(eq=False)
class PipelineResult:
    decision: str  # "single" or "multiple"
    map: EstimateMap
    detection: DetectionResult | None
    global_estimate: IlluminantEstimate | None
    local_field: np.ndarray | None  # (H, W, 3) unit rows when multiple
    corrected: LinearImage


def _green_preserving(illum: np.ndarray) -> np.ndarray:
    """Rescale an illuminant (or field) so its green component is 1."""
    if illum.ndim == 1:
        return illum / illum[1]
    return illum / illum[:, :, 1:2]


def _truth_says_multiple(truth, threshold_deg: float, sample_side: int = 48) -> bool:
    """Oracle decision: does the ground truth carry more than one illuminant?

    Per-image truth is single by definition. A truth field counts as multiple
    when the widest angle over a subsampled pixel grid exceeds the threshold.
    """
    if isinstance(truth, IlluminantEstimate):
        return False
    field_arr = np.asarray(truth, dtype=np.float64)
    h, w = field_arr.shape[:2]
    ri = np.unique(np.linspace(0, h - 1, min(h, sample_side)).astype(int))
    ci = np.unique(np.linspace(0, w - 1, min(w, sample_side)).astype(int))
    V = field_arr[np.ix_(ri, ci)].reshape(-1, 3)
    V = V / np.linalg.norm(V, axis=1, keepdims=True)
    min_cos = float(np.clip(V @ V.T, -1.0, 1.0).min())
    return float(np.degrees(np.arccos(min_cos))) > threshold_deg


def run_pipeline(
    image: LinearImage, config: PipelineConfig, truth=None
) -> PipelineResult:
    """Estimate and correct one image.

    truth is only consulted in oracle mode (and is then required). The
    single branch uses the aggregator when one is configured and falls back
    to median pooling otherwise.
    """
    emap = estimate_map(config.cnn, image)
    detection = None
    if config.mode == "auto":
        detection = detect_multiple(emap, config.detector)
        multiple = detection.multiple
    elif config.mode == "force-single":
        multiple = False
    elif config.mode == "force-multiple":
        multiple = True
    else:  # oracle
        if truth is None:
            raise DataError("oracle mode needs ground truth")
        multiple = _truth_says_multiple(truth, config.detector.angle_threshold_deg)
    h, w = image.height, image.width
    if multiple:
        local = upsample_estimate_map(emap, (h, w))
        corrected = von_kries_correct(image, _green_preserving(local))
        return PipelineResult("multiple", emap, detection, None, local, corrected)
    if config.aggregator is not None:
        est = predict_global(config.aggregator, emap)
    else:
        est = median_pool_baseline(emap)
    scaled = _green_preserving(est.rgb)
    corrected = von_kries_correct(image, np.broadcast_to(scaled, (h, w, 3)))
    return PipelineResult("single", emap, detection, est, None, corrected)


# ---------------------------------------------------------------------------
# Evaluation harness

#: Everything evaluate() understands, beyond the named classical estimators.
EXTRA_METHODS = ("DN", "cnn-median", "cnn-global", "pipeline")


def _entry_error(estimate, truth, excluded: np.ndarray) -> float:
    """Angular error between an estimate and truth of any combination.

    estimate/truth: IlluminantEstimate or (H, W, 3) field. Field against
    scalar broadcasts the scalar; any field involvement means the result is
    the mean per-pixel error over unmasked pixels.
    """
    est_scalar = isinstance(estimate, IlluminantEstimate)
    tru_scalar = isinstance(truth, IlluminantEstimate)
    if est_scalar and tru_scalar:
        return angular_error(estimate.rgb, truth.rgb)
    h, w = excluded.shape
    e_field = (
        np.broadcast_to(estimate.rgb, (h, w, 3)) if est_scalar else np.asarray(estimate)
    )
    t_field = (
        np.broadcast_to(truth.rgb, (h, w, 3)) if tru_scalar else np.asarray(truth)
    )
    err = pixelwise_angular_error(e_field, t_field)
    keep = ~excluded
    if not keep.any():
        raise DataError("every pixel is masked; nothing to evaluate")
    return float(err[keep].mean())


def _resize_truth_field(truth: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if truth.shape[:2] == shape:
        return truth
    h, w = shape
    out = cv2.resize(
        truth.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR
    ).astype(np.float64)
    return out / np.linalg.norm(out, axis=2, keepdims=True)


@dataclass
class EvaluationReport:
    methods: list[str]
    per_image: list[dict]  # image, fold, errors {method: deg}, decisions
    stats: dict[str, ErrorStats]

    def summary_lines(self) -> list[str]:
        width = max(len(m) for m in self.methods)
        lines = [f"{'method'.ljust(width)}  median    mean     p90     max"]
        for m in self.methods:
            s = self.stats[m]
            lines.append(
                f"{m.ljust(width)}  {s.median:6.2f}  {s.mean:6.2f}  {s.pct90:6.2f}  {s.max:6.2f}"
            )
        return lines


def evaluate(
    index,
    methods,
    cnn: CnnModel | None = None,
    aggregator: AggregatorModel | None = None,
    detector: DetectorConfig | None = None,
    mode: str = "auto",
    resize_to: int | None = 1200,
    threads: int = 1,
    entries=None,
) -> EvaluationReport:
    """Run methods over a dataset index and summarize angular errors.

    methods: names from the classical family (GW, WP, ...), "DN",
    "cnn-median", "cnn-global", or "pipeline" (whose branch behavior follows
    `mode`). Images are downscaled to resize_to on the long side first,
    matching the training-side protocol. `entries` restricts evaluation to a
    subset (e.g. one fold's test entries).
    """
    methods = list(methods)
    for m in methods:
        if m not in NAMED_ESTIMATORS and m not in EXTRA_METHODS:
            raise ValueError(f"unknown method {m!r}")
    needs_cnn = {"cnn-median", "cnn-global", "pipeline"}
    if needs_cnn.intersection(methods) and cnn is None:
        raise DataError("cnn model required for map-based methods")
    if "cnn-global" in methods and aggregator is None:
        raise DataError("aggregator model required for cnn-global")
    det_cfg = detector or DetectorConfig()
    positions = (
        range(len(index.entries))
        if entries is None
        else [index.entries.index(e) for e in entries]
    )
    positions = list(positions)

    def one(pos: int) -> dict:
        image, truth = index.load_entry(pos)
        if resize_to is not None:
            image = resize_max_side(image, resize_to)
            if isinstance(truth, np.ndarray):
                truth = _resize_truth_field(truth, (image.height, image.width))
        excluded = image.excluded()
        emap = None
        if needs_cnn.intersection(methods):
            emap = estimate_map(cnn, image)
        row: dict = {"image": index.entries[pos].image, "fold": index.entries[pos].fold}
        errors: dict[str, float] = {}
        for m in methods:
            if m in NAMED_ESTIMATORS:
                est = estimate_named(image, m)
            elif m == "DN":
                est = IlluminantEstimate.uniform()
            elif m == "cnn-median":
                est = median_pool_baseline(emap)
            elif m == "cnn-global":
                est = predict_global(aggregator, emap)
            else:  # pipeline
                cfg = PipelineConfig(cnn, aggregator, det_cfg, mode)
                result = run_pipeline(image, cfg, truth)
                row["pipeline_decision"] = result.decision
                est = (
                    result.global_estimate
                    if result.decision == "single"
                    else result.local_field
                )
            errors[m] = _entry_error(est, truth, excluded)
        row["errors"] = errors
        return row

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_image = list(pool.map(one, positions))
    else:
        per_image = [one(pos) for pos in positions]
    stats = {
        m: error_stats([row["errors"][m] for row in per_image]) for m in methods
    }
    return EvaluationReport(methods, per_image, stats)


def write_report(report: EvaluationReport, out_dir, bin_width: float = 0.25) -> None:
    """errors.csv, stats.json, and one histogram CSV per method."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "errors.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "fold", "method", "error_deg"])
        for row in report.per_image:
            for m in report.methods:
                writer.writerow([row["image"], row["fold"], m, f"{row['errors'][m]:.6f}"])
    payload = {m: report.stats[m].as_dict() for m in report.methods}
    (out / "stats.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    for m in report.methods:
        edges, counts = error_histogram(
            [row["errors"][m] for row in report.per_image], bin_width
        )
        safe = m.replace("/", "_")
        with (out / f"hist_{safe}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_start_deg", "bin_end_deg", "count"])
            for k in range(len(counts)):
                writer.writerow([f"{edges[k]:.4f}", f"{edges[k + 1]:.4f}", int(counts[k])])
