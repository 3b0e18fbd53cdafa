"""Deep metric learning with dynamically grown embedding subspace learners.

Training carves the embedding into variable-size subspaces on validation
plateaus, guided by activation-times-gradient neuron scores; data is routed
to learners by K-means in the full embedding space. The attention module
that gates pooling doubles as a saliency map, and thresholded attention maps
serve as proxy labels for a weakly supervised segmenter.
"""

from .data import Dataset, SampleRecord
from .layout import SubspaceLayout, normalize_embedding, sub_embedding
from .model import (
    EmbeddingNet,
    ForwardOutput,
    SmallConvExtractor,
    build_attention_module,
    embed_dataset,
    reset_remainder,
)
from .losses import (
    BatchLoss,
    MarginLossParams,
    PairSet,
    build_batch,
    learner_loss_batch,
    margin_loss_pair,
    mine_pairs,
    pairwise_distance,
)
from .clustering import ClusterAssignment, assign_groups, kmeans
from .metrics import MetricReport, dice, evaluate_checkpoint, nmi, recall_at_k, retrieve
from .subspace import NeuronScoreVector, SplitRefused, score_neurons, split_learner
from .trainer import (
    ConfigError,
    TrainerConfig,
    TrainingDiverged,
    TrainingState,
    detect_plateau,
    finetune_full,
    should_recluster,
    train,
)
from .wss import (
    AttentionMap,
    ProxyMask,
    UNetSegmenter,
    bce_loss,
    binarize,
    extract_attention,
    segment,
    select_threshold,
    train_segmenter,
)
from .synthetic import SyntheticSpec, generate_synthetic
from .folder import load_image_folder
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataConfig, ExperimentConfig, WssConfig, load_config, save_config
from .experiment import export_embeddings, read_embeddings, run_experiment, run_single_seed

__version__ = "0.1.0"
