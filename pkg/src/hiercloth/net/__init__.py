"""Graph network that predicts per-node accelerations for one simulation step."""
from .features import (BODY_EDGE_WIDTH, EDGE_WIDTH, FeatureSet, GarmentTopology, build_features, node_width,
                       skinned_accelerations, vertex_normals)
from .model import ClothNet, Mlp, NetConfig, StageError, check_gradients, integrate, parameter_gradients
from .normalizer import Normalizer
from .potential import potential_loss

__all__ = [
    "BODY_EDGE_WIDTH", "EDGE_WIDTH", "FeatureSet", "GarmentTopology", "build_features", "node_width",
    "skinned_accelerations", "vertex_normals", "ClothNet", "Mlp", "NetConfig", "StageError", "check_gradients",
    "integrate", "parameter_gradients", "Normalizer", "potential_loss",
]
