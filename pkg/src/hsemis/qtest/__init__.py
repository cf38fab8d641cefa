from .augment import AugmentationSpec, sample_strong_params, strong_augment, weak_augment
from .network import BaseNetwork, base_forward, l2_tanh_normalize, project
from .node import (
    NodeConfig, NodeModel, NodeResult, consistency_loss, consistency_weight, ema_update, node_forward,
    predict_proba, train_node,
)

__all__ = [
    "AugmentationSpec", "sample_strong_params", "strong_augment", "weak_augment", "BaseNetwork",
    "base_forward", "l2_tanh_normalize", "project", "NodeConfig", "NodeModel", "NodeResult",
    "consistency_loss", "consistency_weight", "ema_update", "node_forward", "predict_proba", "train_node",
]
