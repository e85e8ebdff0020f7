"""Candidate activations for the recurrent cell.

Single-stream activations (``tanh``, ``sigmoid``, ``relu``, ``elu``) map one
pre-activation; the dual activations (``drelu``, ``delu``) take two
independently projected streams ``a`` and ``b`` and return ``g(a) - g(b)``.
At ``x == 0`` the rectifier derivatives use the zero branch.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Variable, as_variable, record_op

TAGS = ("tanh", "sigmoid", "relu", "elu", "drelu", "delu")
DUAL_TAGS = ("drelu", "delu")
# ops whose derivative is discontinuous at 0; gradient checks skip perturbations crossing it
KINKED_KINDS = frozenset({"relu", "elu", "drelu", "delu"})


def _check_alpha(alpha):
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")


def tanh(x: Variable) -> Variable:
    x = as_variable(x)
    y = np.tanh(x.value)
    return record_op(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Variable) -> Variable:
    x = as_variable(x)
    y = expit(x.value)
    return record_op(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Variable) -> Variable:
    x = as_variable(x)
    xv = x.value
    return record_op(np.maximum(xv, 0.0), "relu", (x,), lambda g: (g * (xv > 0),), saved=(xv,))


def _elu_value(x, alpha):
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def _elu_slope(x, alpha):
    return np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))


def elu(x: Variable, alpha: float = 1.0) -> Variable:
    _check_alpha(alpha)
    x = as_variable(x)
    xv = x.value
    return record_op(_elu_value(xv, alpha), "elu", (x,),
                     lambda g: (g * _elu_slope(xv, alpha),), saved=(xv,))


def _pair(a, b, name):
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape:
        raise DimensionError(f"{name}: a-stream {a.shape} and b-stream {b.shape} differ")
    return a, b


def drelu(a: Variable, b: Variable) -> Variable:
    """``max(0, a) - max(0, b)``: exactly zero when both streams are non-positive."""
    a, b = _pair(a, b, "drelu")
    av, bv = a.value, b.value
    ma, mb = av > 0, bv > 0
    y = np.where(ma, av, 0.0) - np.where(mb, bv, 0.0)
    return record_op(y, "drelu", (a, b), lambda g: (g * ma, -(g * mb)), saved=(av, bv))


def delu(a: Variable, b: Variable, alpha: float = 1.0) -> Variable:
    _check_alpha(alpha)
    a, b = _pair(a, b, "delu")
    av, bv = a.value, b.value
    y = _elu_value(av, alpha) - _elu_value(bv, alpha)
    return record_op(y, "delu", (a, b),
                     lambda g: (g * _elu_slope(av, alpha), -(g * _elu_slope(bv, alpha))),
                     saved=(av, bv))


@dataclass(frozen=True)
class ActivationKind:
    """Activation tag plus the ELU saturation ``alpha`` where relevant."""

    tag: str = "tanh"
    alpha: float = 1.0

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigError(f"unknown activation {self.tag!r}; expected one of {', '.join(TAGS)}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    @classmethod
    def parse(cls, tag: str, alpha: float = 1.0) -> "ActivationKind":
        return cls(tag.strip().lower(), float(alpha))

    @property
    def dual(self) -> bool:
        return self.tag in DUAL_TAGS

    @property
    def arity(self) -> int:
        return 2 if self.dual else 1

    def __call__(self, a: Variable, b: Variable = None) -> Variable:
        if self.dual != (b is not None):
            raise ContractError(f"{self.tag} takes {self.arity} pre-activation stream(s)")
        if self.tag == "tanh":
            return tanh(a)
        if self.tag == "sigmoid":
            return sigmoid(a)
        if self.tag == "relu":
            return relu(a)
        if self.tag == "elu":
            return elu(a, self.alpha)
        if self.tag == "drelu":
            return drelu(a, b)
        return delu(a, b, self.alpha)

    def __str__(self):
        return f"{self.tag}(alpha={self.alpha:g})" if self.tag in ("elu", "delu") else self.tag
