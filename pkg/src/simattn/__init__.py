"""Similarity attention for deep metric learning, on a small numpy autograd engine."""

from .attention import (
    AttentionMap,
    MaskConfig,
    WeightVector,
    attention_map,
    attention_maps,
    mining_loss,
    sample_scores,
    soft_mask,
    total_loss,
    weights,
)
from .autograd import GraphError, NonFiniteError, Tensor, backward, grad
from .data import Dataset, SyntheticSpec, generate, load_dataset, save_dataset
from .evaluate import RetrievalIndex, attention_iou, one_shot_segment, recall_at_k
from .model import Encoder, EncoderConfig, encode, load_checkpoint, metric_loss, save_checkpoint
from .train import TrainConfig, fit, train_step

__version__ = "0.1.0"
