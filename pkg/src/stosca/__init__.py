"""Stochastic successive convex approximation (SCA) training for small MLPs."""

from .nn_core import MiniBatch, MlpModel, Topology, batch_gradient, forward, glorot_init, predict, weight_jacobian
from .objective import L1, L2, ElasticNet, GroupSparse, LossKind, Manifold, build_knn_graph, objective_value
from .sca_engine import ScaConfig, Schedule, train, train_baseline, verify_schedule

__version__ = "0.1.0"
