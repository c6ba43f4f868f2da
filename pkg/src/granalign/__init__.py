"""Multi-granularity video-text retrieval scoring engine.

Scores pre-extracted video/query feature tensors at three alignment
levels (video-sentence, frame-sentence, patch-word), aggregates them with
interactive similarity aggregation, unifies the level score matrices with
Sinkhorn-Knopp marginal normalization, and trains the whole pipeline with
a symmetric contrastive objective.
"""

from .alignment import (
    LevelSimilarities,
    frame_sentence_vector,
    patch_word_matrix,
    temporal_encode,
    video_sentence_score,
)
from .container import read_container, write_container
from .diffmath import AffineParams, AttentionParams, affine, attention_block, cosine, grad_check, softmax
from .errors import DataError, GranalignError, NumericError, UsageError
from .evalmetrics import EvalReport, compute_metrics, rank_of
from .isa import IsaParams, LevelScores, aggregate_baseline, bi_isa, isa_aggregate, isa_over_axis
from .patchsel import (
    FrozenSelectionNoise,
    Selection,
    SelectorParams,
    gather_selected,
    perturbed_topk_indicator,
    saliency_scores,
    select_topk,
    soft_indicator,
)
from .store import (
    FeatureBundle,
    Manifest,
    ManifestEntry,
    QueryFeatures,
    gen_synthetic,
    load_bundle,
    load_dataset,
    load_query,
    save_bundle,
    save_query,
    write_dataset,
)
from .trainer import (
    ModelParams,
    TrainConfig,
    batch_scores,
    contrastive_loss,
    level_score_matrices,
    load_checkpoint,
    make_selection_bank,
    pair_similarities,
    save_checkpoint,
    score_pair,
    train,
    training_grad_errors,
)
from .unify import ScoreMatrix, SkBias, UnifyResult, apply_bias, sinkhorn_alpha_beta, sinkhorn_bias, unify_levels

__version__ = "0.1.0"
