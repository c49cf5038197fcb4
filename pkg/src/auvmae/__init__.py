"""Knowledge-guided multi-label AU detection over video, desk scale.

The package pairs a toy masked video autoencoder with pairwise label
knowledge: empirical co-occurrence and transition statistics estimated from
training labels constrain the classifier's predictions through differentiable
losses. A synthetic generator with analytically known statistics closes the
loop for verification.
"""

from .errors import DataError, NumericError
from .knowledge import (
    InterKnowledge,
    IntraKnowledge,
    LearnedCooccurrence,
    estimate_inter_knowledge,
    estimate_intra_knowledge,
    learned_cooccurrence,
    load_knowledge,
    mean_state_tensor,
    save_knowledge,
    state_function,
    state_tensor,
)
from .labels import (
    AugmentPlan,
    LabelSequence,
    RateVector,
    WeightVector,
    augment_dataset,
    class_weights,
    load_label_sequences,
    occurrence_rates,
    save_label_sequences,
)
from .losses import (
    LossReport,
    LossWeights,
    inter_loss,
    intra_loss,
    reconstruction_loss,
    straight_through_threshold,
    total_loss,
    weighted_bce,
)
from .metrics import LearnedKnowledge, MetricReport, f1_scores, knowledge_divergence, learned_statistics
from .model import (
    Checkpoint,
    ModelConfig,
    PredictionBatch,
    finetune,
    load_checkpoint,
    predict,
    pretrain,
    save_checkpoint,
)
from .synth import (
    GeneratorSpec,
    RenderSpec,
    analytic_knowledge,
    default_generator_spec,
    default_render_spec,
    render_video,
    sample_dataset,
    sample_sequence,
)
from .video import VideoClip, load_video_clips, make_tube_mask, save_video_clips, temporal_downsample, tokenize

__version__ = "0.1.0"
