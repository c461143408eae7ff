"""edgeleak: re-identification attack toolkit for edge-preserving anonymization.

Trains a contrastive identity encoder on (original, anonymized) image
pairs, retrieves identities by cosine similarity under three reference
protocols, mounts an edge-only black-box variant of the attack, and
audits edge similarity between originals and their anonymized versions.
"""

from . import backend
from .contrastive import cosine_similarity, nt_xent_loss, nt_xent_loss_and_grad, similarity_matrices
from .dataset import (
    ImageRecord,
    Manifest,
    NamingRule,
    PairSample,
    assign_splits,
    build_manifest,
    epoch_batches,
    sample_training_batch,
)
from .edgeops import (
    EdgeImage,
    EdgeModel,
    EdgeSimilarityRow,
    canny_edges,
    edge_similarity_report,
    learned_edges,
    load_edge_model,
    mean_l1,
    ssim,
)
from .models import EncoderSpec, Model, ProjectionSpec, load_checkpoint, save_checkpoint
from .retrieval import (
    EmbeddingDatabase,
    RetrievalReport,
    build_database,
    evaluate_protocol,
    query,
    random_baseline,
    select_references,
)
from .synth import SyntheticConfig, generate_synthetic_dataset
from .trainer import TrainConfig, TrainingLog, select_best, train, validate

__version__ = "0.1.0"

__all__ = [
    "backend",
    "cosine_similarity",
    "nt_xent_loss",
    "nt_xent_loss_and_grad",
    "similarity_matrices",
    "ImageRecord",
    "Manifest",
    "NamingRule",
    "PairSample",
    "assign_splits",
    "build_manifest",
    "epoch_batches",
    "sample_training_batch",
    "EdgeImage",
    "EdgeModel",
    "EdgeSimilarityRow",
    "canny_edges",
    "edge_similarity_report",
    "learned_edges",
    "load_edge_model",
    "mean_l1",
    "ssim",
    "EncoderSpec",
    "Model",
    "ProjectionSpec",
    "load_checkpoint",
    "save_checkpoint",
    "EmbeddingDatabase",
    "RetrievalReport",
    "build_database",
    "evaluate_protocol",
    "query",
    "random_baseline",
    "select_references",
    "SyntheticConfig",
    "generate_synthetic_dataset",
    "TrainConfig",
    "TrainingLog",
    "select_best",
    "train",
    "validate",
]
