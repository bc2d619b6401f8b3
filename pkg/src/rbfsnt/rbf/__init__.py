from .cluster import (KMeansResult, Neighbor, kmeans, kmeans_init, one_hot,
                      similarity_query, solve_output_weights)
from .head import (METRIC_MODES, RbfHead, cluster_contributions, combined_loss,
                   metric_distance_sq, rbf_backward, rbf_forward, unsupervised_loss)
from .kernels import KERNEL_KINDS, KernelConfig, kernel_eval, kernel_with_grads

__all__ = [
    "KERNEL_KINDS", "KMeansResult", "KernelConfig", "METRIC_MODES", "Neighbor", "RbfHead",
    "cluster_contributions", "combined_loss", "kernel_eval", "kernel_with_grads", "kmeans",
    "kmeans_init", "metric_distance_sq", "one_hot", "rbf_backward", "rbf_forward",
    "similarity_query", "solve_output_weights", "unsupervised_loss",
]
