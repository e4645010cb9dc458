"""treedex: hierarchical retrieval indexing over two-tower item embeddings."""

from .codebooks import (
    AffinityPool,
    IndexTrainConfig,
    LevelCodebook,
    ResidualState,
    affinity,
    build_hierarchy,
    distance,
    finalize,
    flops_penalty,
    initial_residual_state,
    joint_train_step,
    pseudo_embedding,
    reconstruction_loss,
    residual_step,
    temperature,
    warmup_weight,
)
from .data import (
    InteractionDataset,
    batch_iterator,
    load_interactions,
    sample_negatives,
    save_interactions,
    synthetic_interactions,
)
from .em import EmConfig, e_step, em_build, kmeans_fit, m_step
from .metrics import (
    EvalReport,
    evaluate_retrieval,
    ndcg_at_k,
    normalized_entropy,
    recall_at_k,
)
from .model import (
    ModelConfig,
    ScorePrediction,
    TrainConfig,
    TwoTowerModel,
    distillation_loss,
    finetune_with_pairs,
    load_checkpoint,
    save_checkpoint,
    supervised_loss,
    total_loss,
    train,
)
from .tree import HierarchicalIndex, RetrievalResult
from .ttt import TttConfig, TttPairSet, extract_pairs, interest_rate, interest_set, run_ttt

__version__ = "0.1.0"
