"""Intrinsic dimensionality estimation and DeepMDS dimensionality reduction."""

from .baselines import classical_mds, dae_fit, isomap_fit, pca_fit
from .deepmds import DistanceTarget, MdsNetwork, TrainConfig, init_network, train, transform
from .errors import DataError, DisconnectedGraphError, FeatureFormatError, NumericalError
from .evaluation import knn_classify, retrieve, similarity_heatmap, stress, verify
from .features import FeatureMatrix, Metric, distance_matrix, load_features, save_features
from .graph import build_knn_graph, geodesic_distances, is_connected
from .idest import build_distribution, correlation_dimension, fit_gaussian_id, fit_hypersphere_id, sweep_k
from .synthdata import ManifoldSpec, generate

__version__ = "0.1.0"
