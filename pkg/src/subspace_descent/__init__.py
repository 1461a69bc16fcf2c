"""Low-rank subspace descent with online-PCA projections, plus tools to check it."""

from .experiment import ExperimentConfig, run, sweep, timing_bench
from .optimizers import OptimizerKind, adam, gd, lion, make_kind, momentum, optimizer_step
from .problems import logistic_regression, mlp_regression, quadratic, rosenbrock
from .projection import pca_loss, pca_loss_grad, update_projection
from .trainer import DYNAMIC, FULL_RANK, STATIC, create_trainer, train, train_step

__all__ = [
    "DYNAMIC", "FULL_RANK", "STATIC", "ExperimentConfig", "OptimizerKind", "adam", "create_trainer",
    "gd", "lion", "logistic_regression", "make_kind", "mlp_regression", "momentum", "optimizer_step",
    "pca_loss", "pca_loss_grad", "quadratic", "rosenbrock", "run", "sweep", "timing_bench", "train",
    "train_step", "update_projection",
]
