"""Global pooling operators: GAP, GMP, and the learnable Lehmer-mean pool.

The Lehmer pool of a nonnegative channel A^k with exponent l is

    F^k = sum(a^l) / sum(a^(l-1))     over a in A^k,

which reduces to the channel mean at l = 1 and approaches the channel max as
l grows. Both the derivative with respect to l and with respect to each input
element are computed analytically here; powers are evaluated in log space so
large exponents stay stable. Inputs are floored at a small eps before
exponentiation because the derivative involves ln(a).

This module is the plain-array reference; the trainable torch layer in
``model`` evaluates the same formula and is tested against this one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidInputError


@dataclass
class PPoolingLayer:
    """Learnable pooling exponent with its clamp policy.

    l is kept in [l_min, l_max] after every update; l_min >= 1 keeps the
    operator between mean and max on nonnegative inputs.
    """

    l: float = 3.0
    l_min: float = 1.0
    l_max: float = 20.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0:
            raise InvalidInputError(f"eps must be > 0, got {self.eps}")
        if self.l_min < 1.0:
            raise InvalidInputError(f"l_min must be >= 1, got {self.l_min}")
        if self.l_min > self.l_max:
            raise InvalidInputError(f"need l_min <= l_max, got [{self.l_min}, {self.l_max}]")
        self.clamp()

    def clamp(self) -> float:
        """Clamp l into [l_min, l_max] and return it."""
        self.l = float(min(max(self.l, self.l_min), self.l_max))
        return self.l


def _check_feature_map(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 3:
        raise InvalidInputError(f"feature map must be (C, H, W), got shape {A.shape}")
    if A.size == 0 or A.shape[1] == 0 or A.shape[2] == 0:
        raise InvalidInputError(f"feature map has an empty spatial extent: {A.shape}")
    return A


def gap(A) -> np.ndarray:
    """Per-channel arithmetic mean over the spatial extent."""
    A = _check_feature_map(A)
    return A.mean(axis=(1, 2))


def gmp(A) -> np.ndarray:
    """Per-channel maximum over the spatial extent."""
    A = _check_feature_map(A)
    return A.max(axis=(1, 2))


def _floored_log(A: np.ndarray, layer: PPoolingLayer) -> tuple[np.ndarray, np.ndarray]:
    """Validate nonnegativity, floor at eps, return (floored, log floored)."""
    if (A < 0).any():
        raise ContractViolationError(
            "pooling input has negative values; the upstream rectifier is missing"
        )
    floored = np.maximum(A, layer.eps)
    return floored, np.log(floored)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def ppool_forward(A, layer: PPoolingLayer) -> np.ndarray:
    """Lehmer-mean pool of every channel: sum(a^l) / sum(a^(l-1)).

    For l >= 1 the true value lies between the floored channel mean and max;
    the log-space evaluation can miss that interval by an ulp on
    near-constant channels, so the result is projected back into it.
    """
    A = _check_feature_map(A)
    floored, log_a = _floored_log(A, layer)
    if layer.l == 1.0:
        # The log-space round trip costs one ulp; at l = 1 the operator IS
        # the floored mean, so return it bit-exactly.
        return floored.mean(axis=(1, 2))
    t = log_a.reshape(A.shape[0], -1)
    log_num = _logsumexp(layer.l * t, axis=1)
    log_den = _logsumexp((layer.l - 1.0) * t, axis=1)
    value = np.exp(log_num - log_den)
    return np.clip(value, floored.mean(axis=(1, 2)), floored.max(axis=(1, 2)))


def _exp_weights(t: np.ndarray, p: float) -> np.ndarray:
    """Rows of softmax(p * t): the normalized weights a^p / sum(a^p)."""
    z = p * t
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


def ppool_grad_l(A, layer: PPoolingLayer) -> np.ndarray:
    """Analytic derivative of the pooled value with respect to the exponent.

    dF/dl = F * [ sum(a^l ln a)/sum(a^l) - sum(a^(l-1) ln a)/sum(a^(l-1)) ],
    evaluated as a difference of power-weighted means of ln a.
    """
    A = _check_feature_map(A)
    _, log_a = _floored_log(A, layer)
    t = log_a.reshape(A.shape[0], -1)
    f = ppool_forward(A, layer)
    mean_top = (_exp_weights(t, layer.l) * t).sum(axis=1)
    mean_bot = (_exp_weights(t, layer.l - 1.0) * t).sum(axis=1)
    return f * (mean_top - mean_bot)


def ppool_grad_input(A, layer: PPoolingLayer) -> np.ndarray:
    """Analytic derivative of each pooled value with respect to each input.

    With N = sum(a^l) and D = sum(a^(l-1)):

        dF/da_m = (a_m^(l-2) / D) * (l * a_m - (l-1) * F).

    Entries whose raw value sits below eps were detached by the floor and get
    gradient 0. Cross-channel derivatives are identically zero, so the result
    has the input's shape.
    """
    A = _check_feature_map(A)
    floored, log_a = _floored_log(A, layer)
    C = A.shape[0]
    t = log_a.reshape(C, -1)
    f = ppool_forward(A, layer)
    log_den = _logsumexp((layer.l - 1.0) * t, axis=1)

    a = floored.reshape(C, -1)
    # a^(l-2) / D in log space; the sign-carrying factor stays linear.
    scale = np.exp((layer.l - 2.0) * t - log_den[:, None])
    grad = scale * (layer.l * a - (layer.l - 1.0) * f[:, None])
    grad[A.reshape(C, -1) < layer.eps] = 0.0
    return grad.reshape(A.shape)
