"""Multi-task network assembly, training, search and evaluation."""

from .losses import aux_loss, task_loss, total_loss
from .metrics import MetricsReport, boundary_f_measure, mean_angular_error, miou_from_confusion, rmse
from .model import ForwardOutput, ModelConfig, MultiTaskNet, build_model
from .tasks import ALL_TASKS, DEFAULT_WEIGHTS, TaskSpec, build_tasks
from .train import (
    NonFiniteLossError,
    SearchResult,
    SearchRun,
    TrainConfig,
    Trainer,
    alpha_lr_for,
    evaluate,
    load_model_weights,
    metrics_from_predictions,
    predict,
    run_search,
    search_once,
    train_model,
    uniform_arch,
)
