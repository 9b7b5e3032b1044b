"""Illuminant estimation and white balance for linear RGB images.

The package covers the full path from pixels to corrected output: classical
statistics estimators, a patch-level convolutional estimator, detection of
multi-illuminant scenes from the patch estimates, regression of a single
global illuminant, per-pixel correction, synthetic data generation, and an
angular-error evaluation harness. The `illumest` command exposes all of it.
"""

from .errors import DataError, DegenerateEstimateError, NumericError
from .imaging import (
    DEFAULT_PATCH_SIZE,
    ILLUM_EPS,
    EstimateMap,
    IlluminantEstimate,
    LinearImage,
    Patch,
    clamp_normalize,
    extract_patches,
    resize_max_side,
    upsample_estimate_map,
    von_kries_correct,
)
from .io import (
    encode_preview,
    load_ground_truth,
    load_image,
    load_mask,
    load_pfm,
    load_png,
    save_ground_truth,
    save_image,
    save_mask,
    save_pfm,
    save_png,
    save_preview,
)
from .metrics import ErrorStats, angular_error, error_stats, pixelwise_angular_error
from .estimators import (
    NAMED_ESTIMATORS,
    EstimatorConfig,
    estimate_illuminant,
    estimate_named,
)
from .cnn import (
    CnnConfig,
    CnnModel,
    PatchDataset,
    TrainConfig,
    TrainResult,
    estimate_map,
    init_model,
    load_model,
    param_count,
    preprocess_patch,
    save_model,
    top_activating_patches,
    train,
)
from .detector import (
    DetectionResult,
    DetectorConfig,
    detect_multiple,
    find_modes,
    kde_2d,
    project_chromaticity,
)
from .svr import SvrModel, fit_epsilon_svr, rbf_kernel
from .aggregator import (
    AggregatorModel,
    PooledFeatures,
    fit_aggregator,
    load_aggregator,
    median_pool_baseline,
    pool_features,
    predict_global,
    save_aggregator,
)
from .datagen import (
    DatasetIndex,
    RelightConfig,
    SceneConfig,
    generate_relit_set,
    generate_scene_set,
    load_index,
    relight,
    render_scene,
    sample_illuminant,
    three_folds,
)
from .pipeline import (
    EvaluationReport,
    PipelineConfig,
    PipelineResult,
    evaluate,
    run_pipeline,
    write_report,
)

__version__ = "0.1.0"
