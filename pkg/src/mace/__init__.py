"""Concept extraction for explaining frozen convolutional classifiers."""

from .blackbox import BlackBox, BlackBoxSpec, ToyClassifier, TrainingError, toy_spec, train_toy_classifier
from .embedding import ConfigurationError
from .explainer import ExplanationBundle, explain
from .model import MaceModel
from .pruning import PruneConfig, PruneReport, PruningError, evaluate_pruning, prune_and_finetune
from .synthetic import LabeledImage, generate_synthetic_dataset, split_dataset
from .trainer import TrainConfig, TrainReport, train

__version__ = "0.1.0"
