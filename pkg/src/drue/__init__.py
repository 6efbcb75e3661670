"""Difference-reconstruction uncertainty estimation for image classifiers."""

from ._validation import ConfigurationError, ContractViolation, TrainingDivergedError, check_images
from .backbone import EncoderConfig, FeaturePair, ResidualClassifier
from .datasets import DatasetSplit, Sample, ShiftLadder, apply_corruption, build_ladder, generate_synthetic, load_external
from .decoders import DecoderPair, mirror_architecture
from .estimator import DRUEClassifier
from .evaluation import EvalReport, ScoreRecord, aupr, auc, run_ablation, run_ood_eval
from .training import CheckpointBundle, TrainConfig, train_classifier, train_g0, train_g1
from .uncertainty import drue_score, entropy_score, mc_dropout_score, rue_score, uncertainty_map

__version__ = "0.1.0"
