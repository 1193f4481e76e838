"""Desk-scale continual learning with convolutional prompt generation."""

from .autodiff import (GradCheckReport, Tensor, conv2d_valid, cosine_similarity,
                       cross_entropy, finite_diff_check, gelu, l1_distance,
                       layer_norm, matmul, no_grad, relu, softmax)
from .backbone import BackboneConfig, FrozenBackbone, PrefixSet
from .config import ExperimentConfig
from .data import StreamConfig, SyntheticTaskStream, generate_stream
from .prompts import DirectPrefixEngine, PromptConfig, PromptEngine
from .similarity import (AttributePool, AttributeRecord, SimilarityConfig,
                         TextEmbedder, num_generators, task_similarity)
from .trainer import (AccuracyMatrix, Adam, ClassifierHead, ContinualTrainer,
                      TrainConfig, average_accuracy, forgetting)

__version__ = "0.1.0"
