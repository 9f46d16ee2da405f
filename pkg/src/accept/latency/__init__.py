"""Sub-model latency prediction for heterogeneous devices."""
from .encoding import SubModelEncoding, all_submodels, encode_submodel, representative_indices, select_representative_submodels
from .evaluate import DHAT_SIZES, HeldOutResult, dhat_sweep, flop_baseline_accuracy, leave_one_device_out
from .predictor import (
    RECALIBRATE,
    STABLE,
    FlopLinearBaseline,
    LatencyPredictor,
    PredictorConfig,
    PredictorDivergedError,
    UntrainedPredictorError,
    accuracy_within,
    adaptive_update,
    drift_check,
    load_dataset_csv,
    load_predictor,
    pretrain,
    samples_to_arrays,
    save_dataset_csv,
    save_predictor,
)
from .synthetic import (
    HardwareProfile,
    LatencySample,
    LayerCost,
    SyntheticDevice,
    build_dataset,
    device_configs,
    device_samples,
    layer_costs,
    layer_flops,
    measure_profile,
    reference_model_specs,
    unseen_device,
)

__all__ = [name for name in dir() if not name.startswith("_")]
