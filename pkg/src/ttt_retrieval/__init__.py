"""Test-time training for cross-domain embedding retrieval.

A small, fully deterministic stack: a float64 autodiff tape, an MLP encoder
with a backbone / embedding / head parameter split, three self-supervised
adaptation objectives (rotation, jigsaw, decorrelation), nearest-neighbour
retrieval metrics under unseen-class protocols, and a synthetic
multi-domain benchmark to run it all on.
"""

from .autodiff import DTYPE, Tape, Tensor, grad_check
from .config import ExperimentConfig, load_config, make_ttt_config, save_config
from .datagen import (
    DatasetManifest,
    ImageSample,
    generate_dataset,
    load_manifest,
    load_samples,
    make_ucdr_split,
    save_manifest,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateBatchError,
    DivergenceError,
    Error,
    LabelError,
    ManifestError,
    PpmParseError,
    ProtocolError,
    ShapeError,
    TapeReuseError,
)
from .imaging import AugmentConfig, Image, Rng, augment, read_ppm, write_ppm
from .model import (
    ModelDims,
    ModelParams,
    TaskSpec,
    copy_params,
    embed,
    init_params,
    load_checkpoint,
    parameter_groups,
    save_checkpoint,
)
from .optimizer import LossTrace, TTTConfig, pretrain, run_ttt, sgd_step, strip_labels
from .retrieval import (
    EmbeddingIndex,
    MetricsReport,
    average_precision_at_k,
    cross_dataset_eval,
    embed_gallery,
    evaluate_protocol,
    precision_at_k,
    retrieve,
)
from .ssl_tasks import (
    PermutationSet,
    SslBatch,
    barlow_loss,
    generate_permutation_set,
    make_barlow_batch,
    make_jigsaw_batch,
    make_rotnet_batch,
)

__version__ = "0.1.0"
