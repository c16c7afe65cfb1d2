"""Numerical kernel: MLP with manual backprop, optimizers, clustering, embeddings."""

from .cluster import (Clustering, kmeans_cluster, medoid_of, pairwise_distances,
                      silhouette_score)
from .embed import sinusoidal_embed
from .gradcheck import grad_check
from .mlp import ACTIVATIONS, MlpNet, gelu, gelu_grad
from .optim import OptimizerState, onecycle_lr, optimizer_step

__all__ = [
    "ACTIVATIONS", "Clustering", "MlpNet", "OptimizerState", "gelu", "gelu_grad",
    "grad_check", "kmeans_cluster", "medoid_of", "onecycle_lr", "optimizer_step",
    "pairwise_distances", "silhouette_score", "sinusoidal_embed",
]
