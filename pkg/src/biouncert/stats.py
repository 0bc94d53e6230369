"""Group-analysis and classification models with confidence integration.

Group analysis regresses the organ volume on age, sex, BMI and diabetes
status. Confidence enters either as an extra predictor (``variable``) or
as per-subject weights in weighted least squares (``instance``).
Classification predicts diabetes from the volume with logistic regression;
``interaction`` adds both the confidence and the volume x confidence
product.

Coefficient names follow fixed slots: ``beta_0`` intercept, ``beta_1`` age,
``beta_2`` sex, ``beta_3`` BMI, ``beta_4`` diabetes (group models) or
volume (classifiers), ``beta_5`` confidence, ``beta_vc`` the interaction.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit

from .confidence import clip_inv_cv
from .core import Cohort, ConfidenceKind

CONDITION_WARN = 1e8


class SingularDesignError(ValueError):
    """The (weighted) design matrix does not have full column rank."""


class ConvergenceWarning(UserWarning):
    pass


class ModelKind(str, enum.Enum):
    GROUP_BASE = "GroupBase"
    GROUP_VARIABLE = "GroupVariable"
    GROUP_INSTANCE = "GroupInstance"
    CLF_BASE = "ClfBase"
    CLF_VARIABLE = "ClfVariable"
    CLF_INTERACTION = "ClfInteraction"
    CLF_INSTANCE = "ClfInstance"

    @property
    def is_classifier(self) -> bool:
        return self.value.startswith("Clf")


class Variant(str, enum.Enum):
    BASE = "base"
    VARIABLE = "variable"
    INTERACTION = "interaction"
    INSTANCE = "instance"


COLUMN_SLOTS = {
    "intercept": "beta_0",
    "age": "beta_1",
    "sex": "beta_2",
    "bmi": "beta_3",
    "diabetes": "beta_4",
    "volume": "beta_4",
    "confidence": "beta_5",
    "v_times_c": "beta_vc",
}


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    x: np.ndarray
    columns: tuple[str, ...]
    y: np.ndarray
    weights: np.ndarray = None
    kind: ModelKind = ModelKind.GROUP_BASE

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        n, p = x.shape
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float).ravel()
        columns = tuple(self.columns)
        if len(columns) != p or len(set(columns)) != p:
            raise ValueError("need one unique name per design column")
        if y.size != n or w.size != n:
            raise ValueError("x, y and weights disagree on the number of rows")
        if "intercept" in columns and not np.all(x[:, columns.index("intercept")] == 1):
            raise ValueError("intercept column must be all ones")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("design and response must be finite")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        if np.count_nonzero(w > 0) < p + 1:
            raise ValueError(f"need at least {p + 1} rows with positive weight, got {np.count_nonzero(w > 0)}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "kind", ModelKind(self.kind))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def take(self, index) -> "DesignMatrix":
        index = np.asarray(index)
        return DesignMatrix(self.x[index], self.columns, self.y[index], self.weights[index], self.kind)

    def with_weights(self, weights) -> "DesignMatrix":
        return DesignMatrix(self.x, self.columns, self.y, weights, self.kind)


@dataclass(frozen=True, eq=False)
class ModelFit:
    model_kind: ModelKind
    columns: tuple[str, ...]
    beta: np.ndarray
    weights: np.ndarray
    converged: bool = True
    iterations: int = 0
    objective: float = float("nan")  # RSS for linear fits, log-likelihood for logistic
    condition_number: float = float("nan")

    @property
    def coefficients(self) -> dict[str, float]:
        return {COLUMN_SLOTS.get(c, c): float(b) for c, b in zip(self.columns, self.beta)}

    def coef(self, column: str) -> float:
        return float(self.beta[self.columns.index(column)])

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind.value,
            "coefficients": self.coefficients,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# --- linear models -------------------------------------------------------------


def _qr_solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares solve via column-pivoted QR; raises on rank deficiency."""
    q, r, piv = linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(a.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    if diag.size == 0 or diag[-1] <= tol:
        raise SingularDesignError("design matrix is rank deficient")
    cond = float(np.linalg.cond(r))
    if cond > CONDITION_WARN:
        warnings.warn(f"design is ill-conditioned (condition number {cond:.3g})", RuntimeWarning, stacklevel=3)
    sol = np.empty(a.shape[1])
    sol[piv] = linalg.solve_triangular(r, q.T @ b)
    return sol, cond


def fit_wls(design: DesignMatrix) -> ModelFit:
    """Minimise sum_i w_i (y_i - x_i . beta)^2 with the design's weights.

    Zero-weight rows are dropped before solving, so they cannot affect the
    estimate.
    """
    w = design.weights
    if not np.any(w > 0):
        raise SingularDesignError("all weights are zero")
    keep = w > 0
    sw = np.sqrt(w[keep])
    x, y = design.x[keep], design.y[keep]
    beta, cond = _qr_solve(x * sw[:, None], y * sw)
    resid = y - x @ beta
    return ModelFit(
        model_kind=design.kind,
        columns=design.columns,
        beta=beta,
        weights=w.copy(),
        converged=True,
        iterations=1,
        objective=float(np.sum(w[keep] * resid**2)),
        condition_number=cond,
    )


def fit_ols(design: DesignMatrix) -> ModelFit:
    """Unweighted least squares; any weights on ``design`` are ignored."""
    return fit_wls(design.with_weights(np.ones(design.n)))


# --- logistic regression ----------------------------------------------------------


def log_likelihood(beta, x, y, w) -> float:
    eta = x @ beta
    # log(sigmoid(eta)) = -log1p(exp(-eta)), stable for both signs
    return float(np.sum(w * (y * -np.logaddexp(0, -eta) + (1 - y) * -np.logaddexp(0, eta))))


def score(beta, x, y, w) -> np.ndarray:
    """Gradient of :func:`log_likelihood`: X^T (w * (y - p))."""
    return x.T @ (w * (y - expit(x @ beta)))


def fit_logistic(design: DesignMatrix, max_iter: int = 100, tol: float = 1e-8) -> ModelFit:
    """Weighted logistic regression by iteratively reweighted least squares.

    Each Newton step solves the weighted least-squares problem with working
    weights ``w p (1 - p)``; steps are halved while the log-likelihood
    drops. Convergence is declared once ``max |step| < tol``. Under perfect
    separation the coefficients run off to infinity: the last iterate is
    returned with ``converged=False`` and a :class:`ConvergenceWarning`.
    """
    y = design.y
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be 0/1")
    keep = design.weights > 0
    x, y, w = design.x[keep], y[keep], design.weights[keep]
    beta = np.zeros(x.shape[1])
    ll = log_likelihood(beta, x, y, w)
    converged = False
    cond = float("nan")
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(x @ beta)
        var = p * (1 - p)
        working = w * var
        if np.count_nonzero(working > 1e-300) < x.shape[1]:
            break
        sw = np.sqrt(working)
        # Newton step: (X^T W X) step = X^T w (y - p), as a least-squares problem in sqrt(W) X
        with np.errstate(divide="ignore", invalid="ignore"):
            rhs = np.where(working > 0, w * (y - p) / sw, 0.0)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                step, cond = _qr_solve(x * sw[:, None], rhs)
        except SingularDesignError:
            break
        t = 1.0
        while True:
            candidate = beta + t * step
            new_ll = log_likelihood(candidate, x, y, w)
            if new_ll >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = candidate, new_ll
        if np.max(np.abs(t * step)) < tol:
            converged = True
            break
    if converged and np.max(np.abs(y - expit(x @ beta))) < 1e-8:
        # fitted probabilities saturated at the labels: perfect separation
        converged = False
    if not converged:
        warnings.warn(
            f"logistic regression did not converge after {it} iterations (possible separation)",
            ConvergenceWarning,
            stacklevel=2,
        )
    return ModelFit(
        model_kind=design.kind,
        columns=design.columns,
        beta=beta,
        weights=design.weights.copy(),
        converged=converged,
        iterations=it,
        objective=ll,
        condition_number=cond,
    )


def predict_proba(fit: ModelFit, design: DesignMatrix) -> np.ndarray:
    if not fit.model_kind.is_classifier:
        raise ValueError(f"{fit.model_kind.value} is not a classification fit")
    if tuple(fit.columns) != tuple(design.columns):
        raise ValueError(f"column mismatch: fit has {fit.columns}, design has {design.columns}")
    return expit(design.x @ fit.beta)


def predict(fit: ModelFit, design: DesignMatrix, threshold: float = 0.5) -> np.ndarray:
    return (predict_proba(fit, design) >= threshold).astype(int)


# --- design assembly --------------------------------------------------------------


@dataclass(frozen=True)
class GroupModelSpec:
    variant: Variant = Variant.BASE
    confidence_kind: ConfidenceKind | None = None
    inv_cv_cap: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.INTERACTION:
            raise ValueError("group analysis has no interaction variant")
        _check_kind(self)

    @property
    def model_kind(self) -> ModelKind:
        return {
            Variant.BASE: ModelKind.GROUP_BASE,
            Variant.VARIABLE: ModelKind.GROUP_VARIABLE,
            Variant.INSTANCE: ModelKind.GROUP_INSTANCE,
        }[self.variant]


@dataclass(frozen=True)
class ClfModelSpec:
    variant: Variant = Variant.BASE
    confidence_kind: ConfidenceKind | None = None
    include_covariates: bool = False
    inv_cv_cap: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        _check_kind(self)

    @property
    def model_kind(self) -> ModelKind:
        return {
            Variant.BASE: ModelKind.CLF_BASE,
            Variant.VARIABLE: ModelKind.CLF_VARIABLE,
            Variant.INTERACTION: ModelKind.CLF_INTERACTION,
            Variant.INSTANCE: ModelKind.CLF_INSTANCE,
        }[self.variant]


def _check_kind(spec):
    if spec.confidence_kind is not None:
        object.__setattr__(spec, "confidence_kind", ConfidenceKind(spec.confidence_kind))
    elif spec.variant is not Variant.BASE:
        raise ValueError(f"variant {spec.variant.value!r} needs a confidence kind")


def confidence_values(cohort: Cohort, kind: ConfidenceKind, inv_cv_cap: float | None = None) -> np.ndarray:
    """Finite, nonnegative confidences ready for modelling (CV^-1 clipped)."""
    try:
        c = cohort.confidence(kind)
    except KeyError as exc:
        raise ValueError(f"missing confidence: {exc.args[0]}") from None
    if ConfidenceKind(kind) is ConfidenceKind.INVCV:
        c = clip_inv_cv(c, inv_cv_cap)
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ValueError(f"{ConfidenceKind(kind).value} confidences must be finite and nonnegative")
    return c


def build_design(cohort: Cohort, spec: GroupModelSpec | ClfModelSpec) -> DesignMatrix:
    n = len(cohort)
    cols = {"intercept": np.ones(n)}
    classify = isinstance(spec, ClfModelSpec)
    if not classify or spec.include_covariates:
        cols["age"] = cohort.column("age")
        cols["sex"] = cohort.column("sex")
        cols["bmi"] = cohort.column("bmi")
    volume = cohort.column("volume_mm3")
    if classify:
        cols["volume"] = volume
        response = cohort.raw("diabetes")
    else:
        cols["diabetes"] = cohort.column("diabetes")
        response = volume

    weights = np.ones(n)
    if spec.variant is not Variant.BASE:
        conf = confidence_values(cohort, spec.confidence_kind, spec.inv_cv_cap)
        if spec.variant is Variant.INSTANCE:
            weights = conf
        else:
            cols["confidence"] = conf
        if spec.variant is Variant.INTERACTION:
            cols["v_times_c"] = volume * conf
    return DesignMatrix(np.column_stack(list(cols.values())), tuple(cols), response, weights, spec.model_kind)


def fit_model(design: DesignMatrix, **kwargs) -> ModelFit:
    if design.kind.is_classifier:
        return fit_logistic(design, **kwargs)
    if design.kind is ModelKind.GROUP_INSTANCE:
        return fit_wls(design)
    return fit_ols(design)
