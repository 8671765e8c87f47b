"""Pseudo-recurrent feedback for occluded-object classification.

A single-layer convolutional K-means front end feeds a bank of linear SVMs;
at test time the pooled activity is iteratively merged with class-specific
cluster memories retrieved under the current class hypotheses.
"""

from .classifiers import HypothesisBank, LinearClassifier, train_bank, train_linear_svm
from .dataset import ImageRecord, OcclusionSpec, load_cifar10, load_split, occlude
from .features import Dictionary, encode_layer1, learn_dictionary, pool
from .feedback import FeedbackConfig, classify_recurrent, run_feedback
from .memory import ActivityStore, ClusterMemory, build_cluster_memory, build_store, nearest_center
from .rbm import RbmModel, gibbs_correct, train_rbm
from .toy import ToyWorld, toy_oracle

__all__ = [
    "ActivityStore", "ClusterMemory", "Dictionary", "FeedbackConfig", "HypothesisBank",
    "ImageRecord", "LinearClassifier", "OcclusionSpec", "RbmModel", "ToyWorld",
    "build_cluster_memory", "build_store", "classify_recurrent", "encode_layer1",
    "gibbs_correct", "learn_dictionary", "load_cifar10", "load_split", "nearest_center",
    "occlude", "pool", "run_feedback", "toy_oracle", "train_bank", "train_linear_svm", "train_rbm",
]
__version__ = "0.1.0"
