"""Datasets, loss models and gradient/Hessian aggregation.

Two convex losses are supported:

* squared loss   f(theta; x, y) = (y - x^T theta)^2 / 2
* logistic loss  f(theta; x, y) = log(1 + exp(x^T theta)) - y x^T theta

Every aggregate (full data, inverse-probability-weighted subsample, equally
weighted subsample) is a weighted sum of per-row terms, so the module exposes
one vectorised kernel, :func:`weighted_sums`, and thin wrappers around it.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class LossKind(enum.Enum):
    SQUARED = "linear"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class Dataset:
    """Finite population of N rows; ``response`` is None for mean estimation."""

    features: np.ndarray
    response: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-d array, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain NaN or Inf")
        X.flags.writeable = False
        object.__setattr__(self, "features", X)
        if self.response is not None:
            y = np.array(self.response, dtype=np.float64, copy=True).reshape(-1)
            if y.shape[0] != X.shape[0]:
                raise ValueError(f"response has {y.shape[0]} entries, expected {X.shape[0]}")
            if not np.all(np.isfinite(y)):
                raise ValueError("response contains NaN or Inf")
            y.flags.writeable = False
            object.__setattr__(self, "response", y)

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def scaled(self, c: float) -> "Dataset":
        """Copy with every feature column multiplied by ``c``."""
        return Dataset(self.features * c, self.response)

    @classmethod
    def from_csv(cls, path, has_response: bool = True) -> "Dataset":
        """Load a headerless CSV; the response is the last column when present."""
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        if has_response:
            if arr.shape[1] < 2:
                raise ValueError("need at least one feature column plus the response")
            return cls(arr[:, :-1], arr[:, -1])
        return cls(arr)

    def to_csv(self, path) -> None:
        arr = self.features if self.response is None else np.column_stack([self.features, self.response])
        np.savetxt(path, arr, delimiter=",", fmt="%.17g")


@dataclass(frozen=True)
class LossModel:
    kind: LossKind
    d: int = field(default=0)

    @classmethod
    def squared(cls, d: int = 0) -> "LossModel":
        return cls(LossKind.SQUARED, d)

    @classmethod
    def logistic(cls, d: int = 0) -> "LossModel":
        return cls(LossKind.LOGISTIC, d)

    @classmethod
    def from_name(cls, name: str, d: int = 0) -> "LossModel":
        return cls(LossKind(name), d)

    @property
    def name(self) -> str:
        return self.kind.value

    def check(self, data: Dataset) -> None:
        """Validate that this model can be evaluated on ``data``."""
        if self.d and self.d != data.d:
            raise ValueError(f"model dimension {self.d} does not match dataset dimension {data.d}")
        if data.response is None:
            if self.kind is LossKind.LOGISTIC:
                raise ValueError("logistic loss needs a response vector")
            if data.d != 1:
                raise ValueError("mean estimation without a response supports one column only")
            return
        if self.kind is LossKind.LOGISTIC and not np.all((data.response == 0) | (data.response == 1)):
            raise ValueError("logistic loss needs responses in {0, 1}")


def sigmoid(z):
    """Overflow-free logistic function."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _response(data: Dataset, rows=None):
    # mean estimation: f = (x - theta)^2 / 2 is squared loss with x := 1, y := x
    if data.response is None:
        y = data.features[:, 0]
        X = np.ones((data.N, 1))
    else:
        y = data.response
        X = data.features
    if rows is None:
        return X, y
    return X[rows], y[rows]


def design(data: Dataset):
    """Return the (X, y) pair the loss is evaluated on."""
    return _response(data)


def _link(model: LossModel, X, y, theta, with_loss=True):
    """Per-row (loss, first-derivative, second-derivative) in the linear predictor."""
    z = X @ theta
    if model.kind is LossKind.SQUARED:
        r = z - y
        return (0.5 * r * r if with_loss else None), r, np.ones_like(z)
    p = sigmoid(z)
    loss = np.logaddexp(0.0, z) - y * z if with_loss else None
    return loss, p - y, p * (1.0 - p)


def link_derivatives(model: LossModel, data: Dataset, theta, rows=None) -> np.ndarray:
    """Scalar factors r_i with grad f(theta; x_i) = r_i x_i."""
    X, y = _response(data, rows)
    return _link(model, X, y, np.asarray(theta, dtype=np.float64), with_loss=False)[1]


def row_grads(model: LossModel, data: Dataset, theta, rows=None) -> np.ndarray:
    """Gradients of the per-row loss stacked as a (rows, d) array."""
    X, _ = _response(data, rows)
    return link_derivatives(model, data, theta, rows)[:, None] * X


def risk_value(model: LossModel, X, y, w, theta) -> float:
    """sum_i w_i f(theta; x_i) alone; cheaper than :func:`weighted_sums` for line searches."""
    z = X @ np.asarray(theta, dtype=np.float64)
    if model.kind is LossKind.SQUARED:
        r = z - y
        return float(np.dot(w, 0.5 * r * r))
    return float(np.dot(w, np.logaddexp(0.0, z) - y * z))


def weighted_sums(model: LossModel, X, y, w, theta, need=("loss", "grad", "hess")):
    """Return sum_i w_i * {f, grad f, hess f}(theta; x_i) for the requested parts."""
    theta = np.asarray(theta, dtype=np.float64)
    loss, g1, g2 = _link(model, X, y, theta, with_loss="loss" in need)
    out = {}
    if "loss" in need:
        out["loss"] = float(np.dot(w, loss))
    if "grad" in need:
        out["grad"] = X.T @ (w * g1)
    if "hess" in need:
        H = X.T @ ((w * g2)[:, None] * X)
        out["hess"] = 0.5 * (H + H.T)
    return out


# --- per-point evaluators ---------------------------------------------------

def point_loss(model: LossModel, data: Dataset, theta, i: int) -> float:
    X, y = _response(data, [i])
    return float(_link(model, X, y, np.asarray(theta, dtype=np.float64))[0][0])


def point_grad(model: LossModel, data: Dataset, theta, i: int) -> np.ndarray:
    return row_grads(model, data, theta, [i])[0]


def point_hess(model: LossModel, data: Dataset, theta, i: int) -> np.ndarray:
    X, y = _response(data, [i])
    _, _, g2 = _link(model, X, y, np.asarray(theta, dtype=np.float64))
    x = X[0]
    return g2[0] * np.outer(x, x)


# --- aggregates -------------------------------------------------------------

def _full_weights(data: Dataset):
    return np.full(data.N, 1.0 / data.N)


def ipw_weights(N: int, pi_values) -> np.ndarray:
    """Per-draw weights 1 / (N n pi_i) of the inverse-probability-weighted risk."""
    pi = np.asarray(pi_values, dtype=np.float64)
    return 1.0 / (N * pi.shape[0] * pi)


def full_risk(model, data, theta) -> float:
    X, y = _response(data)
    return weighted_sums(model, X, y, _full_weights(data), theta, ("loss",))["loss"]


def full_grad(model, data, theta) -> np.ndarray:
    X, y = _response(data)
    return weighted_sums(model, X, y, _full_weights(data), theta, ("grad",))["grad"]


def full_hess(model, data, theta) -> np.ndarray:
    X, y = _response(data)
    return weighted_sums(model, X, y, _full_weights(data), theta, ("hess",))["hess"]


def weighted_grad(model, data, draw, theta) -> np.ndarray:
    X, y = _response(data, draw.indices)
    w = ipw_weights(data.N, draw.pi_values)
    return weighted_sums(model, X, y, w, theta, ("grad",))["grad"]


def weighted_hess(model, data, draw, theta) -> np.ndarray:
    X, y = _response(data, draw.indices)
    w = ipw_weights(data.N, draw.pi_values)
    return weighted_sums(model, X, y, w, theta, ("hess",))["hess"]


def equal_weight_grad(model, data, draw, theta) -> np.ndarray:
    X, y = _response(data, draw.indices)
    w = np.full(draw.n, 1.0 / draw.n)
    return weighted_sums(model, X, y, w, theta, ("grad",))["grad"]


def equal_weight_hess(model, data, draw, theta) -> np.ndarray:
    X, y = _response(data, draw.indices)
    w = np.full(draw.n, 1.0 / draw.n)
    return weighted_sums(model, X, y, w, theta, ("hess",))["hess"]
