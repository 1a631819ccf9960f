"""Color-alignment losses with analytic gradients, plus a toy conditional flow.

The pieces compose in layers: soft per-channel histograms -> 1D optimal
transport distances -> an alignment loss on image pairs -> joint training
of a small invertible restoration network, with metrics, dataset helpers,
and a CLI on top. Everything is float64 numpy and deterministic under a
seed.
"""

from .dataset import (
    ManifestError,
    PairEntry,
    PairManifest,
    bilinear_upsample,
    load_manifest,
    load_pairs,
    make_reference,
    make_synthetic_dataset,
    sample_patches,
    save_manifest,
    synthesize_low,
)
from .flow import (
    CheckpointError,
    ConditionalFlow,
    FlowConfig,
    LatentOutput,
    load_checkpoint,
    save_checkpoint,
)
from .histogram import (
    HistogramGrid,
    KernelConfig,
    SoftHistogram,
    default_grid,
    make_grid,
    soft_hist,
    soft_hist_backward,
)
from .image import (
    Image,
    PngFormatError,
    UnsupportedBitDepthError,
    UnsupportedColorTypeError,
    clamp01,
    crop,
    load_png,
    quantize,
    save_png,
)
from .losses import (
    LossConfig,
    LossReport,
    alignment_report,
    cal_loss,
    per_channel_w1,
    total_loss,
)
from .metrics import MetricReport, evaluate_pair, psnr, ssim
from .optim import (
    GradCheckReport,
    LossRecord,
    NonFiniteGradientError,
    OptimizerState,
    PixelDescentResult,
    TrainConfig,
    TrainResult,
    adam_step,
    central_diff_grad,
    gradcheck_cal,
    gradcheck_flow,
    gradcheck_hist,
    held_out_w1,
    numerical_jacobian,
    optimize_pixels_cal,
    run_gradchecks,
    sgd_step,
    train_flow,
    write_loss_curve,
)
from .transport import TransportResult, ot_oracle, w1_cdf, wp_quantile

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConditionalFlow",
    "FlowConfig",
    "GradCheckReport",
    "HistogramGrid",
    "Image",
    "KernelConfig",
    "LatentOutput",
    "LossConfig",
    "LossRecord",
    "LossReport",
    "ManifestError",
    "MetricReport",
    "NonFiniteGradientError",
    "OptimizerState",
    "PairEntry",
    "PairManifest",
    "PixelDescentResult",
    "PngFormatError",
    "SoftHistogram",
    "TrainConfig",
    "TrainResult",
    "TransportResult",
    "UnsupportedBitDepthError",
    "UnsupportedColorTypeError",
    "adam_step",
    "alignment_report",
    "bilinear_upsample",
    "cal_loss",
    "central_diff_grad",
    "clamp01",
    "crop",
    "default_grid",
    "evaluate_pair",
    "gradcheck_cal",
    "gradcheck_flow",
    "gradcheck_hist",
    "held_out_w1",
    "load_checkpoint",
    "load_manifest",
    "load_pairs",
    "load_png",
    "make_grid",
    "make_reference",
    "make_synthetic_dataset",
    "numerical_jacobian",
    "optimize_pixels_cal",
    "ot_oracle",
    "per_channel_w1",
    "psnr",
    "quantize",
    "run_gradchecks",
    "sample_patches",
    "save_checkpoint",
    "save_manifest",
    "save_png",
    "sgd_step",
    "soft_hist",
    "soft_hist_backward",
    "ssim",
    "synthesize_low",
    "total_loss",
    "train_flow",
    "w1_cdf",
    "wp_quantile",
    "write_loss_curve",
]
