"""Dilated-convolution melanoma classifier: a self-contained numpy engine
for inference and desk-scale training, dataset tooling, latency benchmarks,
and a CLI (``melad``).

Quick start::

    from melad import builtin_config, init_weights, preprocess, forward

    arch = builtin_config("mela-d-lite")
    bundle = init_weights(arch, seed=0)
    prediction = forward(bundle, preprocess("lesion.png"))
    print(prediction.label, prediction.p_malignant)
"""

from .bench import BenchmarkReport, emit_report, parse_report, perf_ratio, time_inference
from .data import (
    DatasetManifest,
    IngestResult,
    RejectedRow,
    SampleRecord,
    bilinear_resize,
    combination_presets,
    combine,
    dataset_codes,
    default_aliases,
    ingest_csv,
    ingest_folders,
    load_alias_table,
    load_manifest,
    map_label,
    parse_combo,
    preprocess,
    save_manifest,
)
from .errors import DataError, MeladError
from .meld_format import (
    BadMagicError,
    ChecksumMismatchError,
    MeldFormatError,
    TruncatedStreamError,
    UnsupportedVersionError,
    load_weights,
    save_weights,
)
from .model import (
    ArchitectureConfig,
    ConfigError,
    LayerSpec,
    ParamCount,
    Prediction,
    WeightBundle,
    WeightError,
    builtin_config,
    count_flops,
    count_params,
    default_mela_d,
    forward,
    init_weights,
    load_config,
    receptive_field,
    run_layers,
    tensor_names_for,
    zero_weights,
)
from .tensor_core import (
    ConvParams,
    Tensor,
    batch_norm,
    conv2d_dilated,
    engine_threads,
    global_avg_pool,
    relu,
    softmax,
)
from .trainer import (
    AdamState,
    AugmentConfig,
    EpochStats,
    TrainConfig,
    TrainResult,
    adam_init,
    adam_step,
    augment,
    balance_50_50,
    balance_rng,
    save_history,
    synthetic_dataset,
    train,
)

__version__ = "1.0.0"

__all__ = [name for name in dir() if not name.startswith("_")]
