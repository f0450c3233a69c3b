"""Natural-gradient Gaussian variational approximation with factor covariance.

Bayesian DeepGLM and DeepGLMM models trained by stochastic natural-gradient
ascent of the variational lower bound, with adaptive group-lasso shrinkage
of the input-layer weights.
"""

from .datagen import (
    Dataset,
    Standardizer,
    gen_binary_sim,
    gen_continuous_sim,
    gen_panel_sim,
    load_table,
    split,
    split_panel,
    write_table,
)
from .deepglm import NetworkSpec, ParamLayout, ShrinkageState, assemble_h
from .deepglmm import MixedLayout, PanelData, assemble_h_glmm, laplace_mode, panel_predict
from .evalpredict import PredictionReport, accuracy, build_report, pps, predictive_draws
from .factor_gaussian import FactorGaussian, estimate_lb_gradient
from .model import FittedModel, fit_deepglm, fit_deepglmm
from .natural_gradient import CGConfig, fisher_vec_product, natgrad_cg, natgrad_rank1
from .trainer import TrainConfig, learning_rate, train

__version__ = "0.1.0"

__all__ = [
    "CGConfig",
    "Dataset",
    "FactorGaussian",
    "FittedModel",
    "MixedLayout",
    "NetworkSpec",
    "PanelData",
    "ParamLayout",
    "PredictionReport",
    "ShrinkageState",
    "Standardizer",
    "TrainConfig",
    "accuracy",
    "assemble_h",
    "assemble_h_glmm",
    "build_report",
    "estimate_lb_gradient",
    "fisher_vec_product",
    "fit_deepglm",
    "fit_deepglmm",
    "gen_binary_sim",
    "gen_continuous_sim",
    "gen_panel_sim",
    "laplace_mode",
    "learning_rate",
    "load_table",
    "natgrad_cg",
    "natgrad_rank1",
    "panel_predict",
    "pps",
    "predictive_draws",
    "split",
    "split_panel",
    "train",
    "write_table",
]
