"""High-level fitting entry points and the persisted model document."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datagen import Standardizer
from .deepglm import NetworkSpec, ParamLayout, ShrinkageState, assemble_h, family_loglik, forward
from .deepglmm import MixedLayout, PanelData, assemble_h_glmm, random_effect_eta, subject_modes
from .errors import ConfigurationError, DataError
from .evalpredict import point_prediction
from .factor_gaussian import FactorGaussian
from .trainer import TrainConfig, TrainResult, init_variational, train

SCHEMA = "nagvac-model/1"


@dataclass
class FittedModel:
    """Network spec, variational posterior and everything needed to predict.

    Covariates are standardised with ``x_scaler``; gaussian responses are
    modelled as ``(y - y_center) / y_scale``.  Mixed models keep their
    (standardised) training panel so that subject modes can be recomputed.
    """

    spec: NetworkSpec
    fg: FactorGaussian
    shrink: ShrinkageState
    x_scaler: Standardizer
    y_center: float = 0.0
    y_scale: float = 1.0
    random_effects: str | None = None
    train_panel: PanelData | None = None
    columns: list = field(default_factory=list)
    response: str = "y"
    subject_column: str | None = None
    summary: dict = field(default_factory=dict)
    result: TrainResult | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.layout = ParamLayout(self.spec)
        self.mixed = None if self.random_effects is None else MixedLayout(self.layout, self.random_effects)

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def is_mixed(self) -> bool:
        return self.mixed is not None

    # ------------------------------------------------------------ prediction

    def _check_X(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.spec.n_covariates:
            raise DataError(f"data has {X.shape[1]} covariates, model expects {self.spec.n_covariates}")
        return self.x_scaler.transform(X)

    def plugin_effects(self, theta, X, subject=None):
        """Per-row random effects (subject Laplace modes at ``theta``), or ``None``."""
        if not self.is_mixed:
            return None
        if subject is None:
            raise DataError("mixed model predictions need subject ids")
        modes = subject_modes(self.mixed, theta, self.train_panel)
        lookup = {s: i for i, s in enumerate(self.train_panel.subject_ids.tolist())}
        pos = np.array([lookup.get(s, -1) for s in np.asarray(subject).astype(str).tolist()], dtype=int)
        alpha = np.zeros((pos.size, self.mixed.q))
        alpha[pos >= 0] = modes[pos[pos >= 0]]
        return alpha

    def eta(self, theta, X, subject=None, *, alpha=None) -> np.ndarray:
        """Linear predictor on the model scale."""
        Xs = self._check_X(X)
        theta = np.asarray(theta, dtype=float)
        if not self.is_mixed:
            return np.atleast_1d(forward(self.spec, self.layout.unpack(theta[: self.layout.n_theta]), Xs)[1])
        if alpha is None:
            alpha = self.plugin_effects(theta, X, subject)
        return random_effect_eta(self.mixed, theta, Xs, alpha)

    def to_response(self, mean):
        """Map a model-scale conditional mean back to the response scale."""
        if self.family == "gaussian":
            return np.asarray(mean) * self.y_scale + self.y_center
        return mean

    def response_sd(self, theta) -> float | None:
        if self.family != "gaussian":
            return None
        return float(np.exp(0.5 * theta[self.layout.disp_idx])) * self.y_scale

    def predict(self, theta, X, subject=None) -> np.ndarray:
        return self.to_response(point_prediction(self.family, self.eta(theta, X, subject)))

    def loglik_rows(self, theta, X, y, subject=None) -> np.ndarray:
        """Per-row log density of ``y`` on its original scale."""
        y = np.asarray(y, dtype=float)
        eta = self.eta(theta, X, subject)
        log_disp = None
        ys = y
        if self.family == "gaussian":
            log_disp = float(theta[self.layout.disp_idx])
            ys = (y - self.y_center) / self.y_scale
        ll, _, _ = family_loglik(self.family, ys, eta, log_disp)
        if self.family == "gaussian":
            ll = ll - np.log(self.y_scale)
        return ll

    # --------------------------------------------------------- serialisation

    def to_dict(self) -> dict:
        s = self.spec
        doc = {
            "schema": SCHEMA,
            "spec": {
                "layer_sizes": list(s.layer_sizes),
                "family": s.family,
                "activation": s.activation,
                "linear_part_indices": list(s.linear_part_indices),
                "n_covariates": s.n_covariates,
            },
            "columns": list(self.columns),
            "response": self.response,
            "subject_column": self.subject_column,
            "x_scaler": self.x_scaler.to_dict(),
            "y_center": self.y_center,
            "y_scale": self.y_scale,
            "random_effects": self.random_effects,
            "variational": {
                "mu": self.fg.mu.tolist(),
                "B": self.fg.B.tolist(),
                "c": self.fg.c.tolist(),
            },
            "shrinkage": {
                "gamma": self.shrink.gamma.tolist(),
                "alpha_tau": self.shrink.alpha_tau.tolist(),
                "beta_tau": self.shrink.beta_tau.tolist(),
                "gamma_w": self.shrink.gamma_w,
                "m_first": self.shrink.m_first,
            },
            "summary": self.summary,
        }
        if self.train_panel is not None:
            p = self.train_panel
            doc["train_panel"] = {
                "X": p.X.tolist(),
                "y": p.y.tolist(),
                "subject": np.repeat(p.subject_ids, np.diff(p.offsets)).tolist(),
            }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedModel":
        if doc.get("schema") != SCHEMA:
            raise DataError(f"unsupported model schema {doc.get('schema')!r}; expected {SCHEMA!r}")
        sp = doc["spec"]
        spec = NetworkSpec(
            tuple(sp["layer_sizes"]),
            sp["family"],
            sp["activation"],
            tuple(sp["linear_part_indices"]) or None,
            sp["n_covariates"],
        )
        v = doc["variational"]
        fg = FactorGaussian(np.array(v["mu"]), np.array(v["B"]), np.array(v["c"]))
        sh = doc["shrinkage"]
        shrink = ShrinkageState(
            np.array(sh["gamma"]), np.array(sh["alpha_tau"]), np.array(sh["beta_tau"]), sh["gamma_w"], sh["m_first"]
        )
        panel = None
        if "train_panel" in doc:
            tp = doc["train_panel"]
            panel = PanelData.from_arrays(np.array(tp["X"]), np.array(tp["y"]), np.array(tp["subject"]).astype(str))
        return cls(
            spec, fg, shrink, Standardizer.from_dict(doc["x_scaler"]),
            doc["y_center"], doc["y_scale"], doc["random_effects"], panel,
            doc["columns"], doc["response"], doc["subject_column"], doc.get("summary", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "FittedModel":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: not a model file ({exc})") from None
        return cls.from_dict(doc)


def _summary(res: TrainResult) -> dict:
    tr = res.trace
    return {
        "iterations": tr.iterations,
        "stop_iter": tr.stop_iter,
        "best_iter": tr.best_iter,
        "best_lb_smoothed": tr.best_lb_smoothed,
        "cg_failures": tr.cg_failures,
    }


def _response_scaling(family, y, standardize_y):
    if standardize_y is None:
        standardize_y = family == "gaussian"
    if standardize_y and family != "gaussian":
        raise ConfigurationError("only gaussian responses can be standardised")
    if not standardize_y:
        return 0.0, 1.0
    sd = float(np.std(y))
    return float(np.mean(y)), sd if sd > 0 else 1.0


def fit_deepglm(
    X,
    y,
    spec: NetworkSpec,
    cfg: TrainConfig = TrainConfig(),
    *,
    standardize_y: bool | None = None,
    use_prior: bool = True,
    bias_var: float = 100.0,
    sink=None,
    columns=None,
    response: str = "y",
) -> FittedModel:
    """Standardise, build ``h``, initialise ``q`` and train a DeepGLM."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    scaler = Standardizer.fit(X)
    yc, ys = _response_scaling(spec.family, y, standardize_y)
    layout = ParamLayout(spec)
    obj = assemble_h(
        layout, scaler.transform(X), (y - yc) / ys,
        batch_size=cfg.batch_size, bias_var=bias_var, use_prior=use_prior,
    )
    fg0 = init_variational(layout, cfg.factors, np.random.default_rng(cfg.seed))
    res = train(obj, fg0, cfg, sink)
    return FittedModel(
        spec, res.fg, obj.shrink, scaler, yc, ys, None, None,
        list(columns) if columns is not None else [f"x{j + 1}" for j in range(X.shape[1])],
        response, None, _summary(res), res,
    )


def fit_deepglmm(
    X,
    y,
    subject,
    spec: NetworkSpec,
    cfg: TrainConfig = TrainConfig(),
    *,
    random_effects: str = "output",
    N: int = 20,
    a0: float = 1.0,
    b0: float = 0.1,
    standardize_y: bool | None = None,
    use_prior: bool = True,
    bias_var: float = 100.0,
    batch_subjects: int | None = None,
    sink=None,
    columns=None,
    response: str = "y",
    subject_column: str = "subject",
) -> FittedModel:
    """Fit a DeepGLMM to panel data with importance-sampled gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    scaler = Standardizer.fit(X)
    yc, ys = _response_scaling(spec.family, y, standardize_y)
    panel = PanelData.from_arrays(scaler.transform(X), (y - yc) / ys, np.asarray(subject).astype(str))
    base = ParamLayout(spec)
    mixed = MixedLayout(base, random_effects)
    obj = assemble_h_glmm(
        mixed, panel, N=N, a0=a0, b0=b0, bias_var=bias_var, use_prior=use_prior,
        seed=cfg.seed + 1, batch_subjects=batch_subjects,
    )
    fg0 = init_variational(base, cfg.factors, np.random.default_rng(cfg.seed), n_extra=mixed.q)
    res = train(obj, fg0, cfg, sink)
    summary = _summary(res)
    summary["laplace_failures"] = obj.laplace_failures
    return FittedModel(
        spec, res.fg, obj.shrink, scaler, yc, ys, random_effects, panel,
        list(columns) if columns is not None else [f"x{j + 1}" for j in range(X.shape[1])],
        response, subject_column, summary, res,
    )
