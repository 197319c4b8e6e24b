"""Unsupervised fusion of multi-channel time series with deep convolutional transform learning."""
from .ctl import CtlProblem, CtlState, Penalty, ctl_fit, ctl_objective, t_update, x_update
from .data import SampleSet, StockSeries, ingest_csv, make_labels, windowize
from .downstream import ForestModel, RidgeModel, forest_fit, forest_predict_proba, ridge_fit, ridge_predict
from .metrics import backtest_ar, classification_metrics, mae
from .model import (
    ChannelPipeline,
    DeconfuseModel,
    LatentFeatures,
    build_model,
    complexity_report,
    fusion_residual,
    infer_features,
    joint_objective,
    pipeline_forward,
)
from .optimizer import TrainConfig, gradcheck, joint_gradients, projected_adam_step, train
from .tensor_ops import FilterBank, conv1d, flatten, frobenius_sq, logdet_gradient, logdet_rect, maxpool1d, relu, selu

__version__ = "0.1.0"

__all__ = [
    "backtest_ar",
    "build_model",
    "ChannelPipeline",
    "classification_metrics",
    "complexity_report",
    "conv1d",
    "ctl_fit",
    "ctl_objective",
    "CtlProblem",
    "CtlState",
    "DeconfuseModel",
    "FilterBank",
    "flatten",
    "forest_fit",
    "forest_predict_proba",
    "ForestModel",
    "frobenius_sq",
    "fusion_residual",
    "gradcheck",
    "infer_features",
    "ingest_csv",
    "joint_gradients",
    "joint_objective",
    "LatentFeatures",
    "logdet_gradient",
    "logdet_rect",
    "mae",
    "make_labels",
    "maxpool1d",
    "Penalty",
    "pipeline_forward",
    "projected_adam_step",
    "relu",
    "ridge_fit",
    "ridge_predict",
    "RidgeModel",
    "SampleSet",
    "selu",
    "StockSeries",
    "t_update",
    "train",
    "TrainConfig",
    "windowize",
    "x_update",
]
