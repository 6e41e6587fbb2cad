"""Few-shot class-incremental learning at desk scale.

A base session trains a small embedding plus a cosine-prototype head
whose layout reserves space for classes that do not exist yet: trainable
virtual prototypes absorb instances under a masked loss, and mid-level
blends of cross-class pairs rehearse how unseen classes will land.  Later
sessions add one unit-normalized mean embedding per new class to the
frozen model, and inference marginalizes the class posterior over the
reserved prototypes.
"""

from .data import (
    Checkpoint,
    LabeledDataset,
    RunConfig,
    generate_gaussians,
    load_checkpoint,
    load_config,
    load_csv,
    save_checkpoint,
)
from .gradcheck import run_gradcheck
from .incremental import (
    InferConfig,
    SessionState,
    class_prototypes,
    expand_head,
    finetune_session,
    infer_fact,
    infer_protonet,
    kd_loss,
    kd_session,
)
from .losses import (
    ForecastLossResult,
    LossBreakdown,
    LossConfig,
    VirtualLossResult,
    forecast_loss,
    pseudo_known_label,
    pseudo_virtual_label,
    virtual_loss,
)
from .mixup import MixPair, make_pairs, manifold_mix
from .network import (
    AffineLayer,
    CosineHead,
    EmbeddingNet,
    GradBuffer,
    backward,
    cosine_logits,
)
from .numerics import Rng, finite_diff_grad, l2_normalize, masked_softmax, sample_beta
from .protocol import (
    SessionMetrics,
    SessionStream,
    assignment_matrix,
    build_stream,
    evaluate_session,
    harmonic_mean,
    performance_drop,
)
from .runner import run_base_training, run_sessions
from .trainer import TrainConfig, TrainReport, lr_schedule, sgd_step, train_base

__version__ = "0.1.0"
