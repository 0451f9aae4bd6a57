"""Context-aware pedestrian detection with vision-language self-supervision.

Desk-scale pipeline: a deterministic toy encoder pair generates semantic
pseudo labels by cross-modal cosine mapping, an anchor-free center/scale
head detects pedestrians, and two self-supervised losses (score-map
regression and prototype contrast) train alongside detection. Evaluation
uses the log-average miss rate over FPPI.
"""

from .core import (
    BoundingBox,
    ContainerFormatError,
    RunConfig,
    iou,
    load_tensor_container,
    save_tensor_container,
)
from .cross_modal import (
    ClassPolicy,
    PolicyError,
    compact_classes,
    cosine_score_map,
    generate_pseudo_labels,
)
from .data import DatasetRecord, load_dataset, make_synthetic_dataset
from .detection import (
    DetectionTargets,
    HeadOutputs,
    build_targets,
    decode_boxes,
    detection_loss,
    nms,
)
from .encoders import (
    LinguisticVectors,
    StageFeatures,
    ToyVisualEncoder,
    encode_class_prompts,
    parameter_hash,
)
from .evaluation import (
    SUBSETS,
    EvalReport,
    SubsetSpec,
    UndefinedMetricError,
    filter_subset,
    log_average_miss_rate,
    match_detections,
)
from .model import VlpdModel
from .pipeline import (
    TrainingDivergedError,
    combined_loss,
    detect,
    evaluate_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .psc import (
    PrototypeBank,
    aggregate_prototypes,
    build_prototype_bank,
    psc_loss,
    temperature_softmax,
    upsample_scores,
)
from .vls import smooth_l1, vls_loss

__version__ = "0.1.0"
