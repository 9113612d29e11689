# Service modules
from .model_service import (
    ModelConfig,
    ModelParameters,
    init_parameters,
    forward,
    baseline_forward,
    run_model,
)
from .collocation_service import (
    match_temporal,
    match_spatial,
    aggregate_shots,
    bin_profile,
    unbin_profile,
    extract_patches,
    collocate,
    CollocationSummary,
)
from .synth_service import (
    SceneSpec,
    generate_scene,
    sample_track,
    shots_from_track,
    synth_scenes,
    make_patches,
)
from .training_service import (
    TrainConfig,
    masked_loss,
    split_dataset,
    train,
    predict,
    save_checkpoint,
    load_checkpoint,
)
from .evaluation_service import (
    ConfusionMatrix,
    MetricsReport,
    binarize,
    mask_metrics,
    phase_metrics,
    evaluate,
    evaluate_patches,
    render_report,
)
from .dataset_service import (
    DatasetSummary,
    summarize_patches,
)
