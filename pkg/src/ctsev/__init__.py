"""COVID severity prediction from chest CT volumes.

Pipeline: .mha volumes -> uniformly sampled, lung-windowed slice stacks ->
per-slice conv encoder with cross-slice max aggregation -> dual-probability
head -> probability averaging over TTA views, encoder variants and
independent stratified splits. Synthetic phantoms make the whole path
testable end to end in minutes.
"""

from .augment import AugConfig, AugSet, TtaView, mixup_pair, tta_views
from .ensemble import (
    EnsembleBundle,
    Prediction,
    ensemble_average,
    load_bundle,
    predict_batch,
    predict_subject,
    predict_with_tta,
)
from .metrics import ScoredCase, evaluate, evaluate_files, roc_auc
from .model import (
    EncoderConfig,
    ModelParams,
    encode_slices,
    init_params,
    load_checkpoint,
    max_aggregate,
    predict_stack,
    save_checkpoint,
)
from .phantom_gen import DatasetManifest, PhantomSpec, generate_case, generate_dataset
from .preprocess import (
    SliceStack,
    WindowSpec,
    preprocess_volume,
    resize_bilinear,
    uniform_sample_indices,
    window_hu,
)
from .training import (
    SplitPlan,
    TrainerConfig,
    balanced_weights,
    fit_bundle,
    make_splits,
    train_split,
    weighted_draw,
)
from .volume_io import (
    LabeledCase,
    Volume,
    VolumeFormatError,
    load_volume,
    parse_mha,
    read_labels,
    save_volume,
    write_labels,
    write_mha,
)

__version__ = "0.1.0"
