"""Zero-day threat detection on network flows with a two-stage autoencoder.

A benign-trained anomaly detector gates flows; a novelty detector trained on
known attack classes (reconstruction plus triplet metric learning) separates
known attacks from zero-day threats and names the closest known attack type.
"""

from .flow_data import FEATURE_NAMES, FeatureVector, FlowRecord, assemble_features, parse_flow_csv
from .graph_features import GraphArtifacts, HostGraph, build_graph, compute_host_features, detect_communities, pagerank
from .pipeline import (
    AnomalyDetector,
    NoveltyDetector,
    Verdict,
    cata,
    fit_novelty_detector,
    infer,
    select_threshold,
    train_anomaly_detector,
)
from .bundle import load_bundle, save_bundle

__version__ = "0.1.0"
