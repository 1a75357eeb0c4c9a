"""Analytic class-incremental learning for sound-source DoA estimation."""

from .acoustic import (
    AudioSegmentBatch,
    MicArrayGeometry,
    PhaseDataset,
    generate_phase_splits,
    make_array_geometry,
    synthesize_segment_batch,
)
from .analytic import (
    AnalyticState,
    ExpansionMap,
    expand,
    incremental_update,
    init_expansion,
    joint_solve,
    predict,
    realign,
)
from .backbone import BackboneWeights, TrainConfig, embed, forward, init_backbone, train_base
from .config import ExperimentConfig, load_config
from .errors import (
    ChecksumError,
    DecodeError,
    FormatError,
    FrozenError,
    NotTrainedError,
    NumericalError,
    ParameterError,
    ProtocolError,
    ShapeError,
    SslCilError,
)
from .gcc import GccFeatureMatrix, extract_features, gcc_phat_pair
from .harness import CilRunRecord, MetricsReport, ablation_sweep, evaluate, run_cil, snr_sweep
from .labels import circular_error, decode_argmax, encode_gaussian, restrict_to_phase

__version__ = "0.1.0"
