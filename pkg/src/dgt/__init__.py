"""Stock price forecasting with a differential graph transformer.

The package is a numpy library: a small reverse-mode autodiff engine
(:mod:`dgt.autodiff`), correlation graphs (:mod:`dgt.corr`), the model and
GRU baseline (:mod:`dgt.model`), training (:mod:`dgt.train`), backtesting
(:mod:`dgt.evaluate`), stock clustering (:mod:`dgt.cluster`) and a staged
pipeline (:mod:`dgt.pipeline`, driven by the ``dgt`` command).
"""
from .corr import GraphSet, build_graph_set, correlation_matrix, kendall_tau_b, top_correlated
from .evaluate import EvalReport, backtest, compare_clusters, mae, rmse
from .ingest import PricePanel, load_price_csv, prepare_dataset
from .model import ModelConfig, init_params, predict
from .train import TrainConfig, grid_search, train_model

__version__ = "0.1.0"

__all__ = [
    "GraphSet", "build_graph_set", "correlation_matrix", "kendall_tau_b", "top_correlated",
    "EvalReport", "backtest", "compare_clusters", "mae", "rmse",
    "PricePanel", "load_price_csv", "prepare_dataset",
    "ModelConfig", "init_params", "predict",
    "TrainConfig", "grid_search", "train_model",
]
