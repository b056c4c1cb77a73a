"""latrack: a layer-adaptive one-stream ViT tracker, built from scratch.

Deep layers of small tracking transformers tend to produce near-duplicate
search features. This package runs the stack only up to that saturation depth
and then applies exactly one dynamically selected deeper layer, with the
profiling, training, evaluation and benchmarking machinery to verify the
mechanism end to end on synthetic sequences.
"""

from . import tensor
from .adaptation import (
    Adaptive,
    Direct,
    RedundancyReport,
    SelectionModule,
    build_target,
    choose_layer,
    cosine_similarity,
    detect_saturation,
    export_attention,
    extract_selector_input,
    profile_redundancy,
    select_probabilities,
    similarity_loss,
)
from .backbone import Backbone, BackboneConfig, LayerTrace, TokenSequence, paper_config, toy_config
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .harness import (
    AdamW,
    BenchReport,
    OPEResult,
    TrackResult,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    bench,
    bench_both,
    early_exit_iou,
    eval_pairs,
    eval_sim_loss,
    eval_suite,
    run_ope,
    track,
    train,
    train_suite,
)
from .head import BBox, CenterHead, HeadOutputs, LossWeights, decode, focal_loss, giou_loss, hanning_2d, total_loss
from .model import ModelConfig, TrackerModel, paper_model_config, toy_model_config
from .synth import ScenarioParams, SyntheticSequence, crop_pair, generate_sequence, search_crop, template_crop
from .tensor import Tensor, backward, finite_diff_check, no_grad, precision, set_precision

__version__ = "0.1.0"
