"""Batch normalization with hand-derived gradients.

Inputs are ``(N, C)`` or ``(N, C, H, W)``. Statistics are per channel,
reduced over the batch axis and, for 4-D inputs, both spatial axes.

Two backward paths are provided for the standard affine tail:

* :func:`bn_backward` uses the closed form
  ``dX = gamma / sqrt(var + eps) * (dY - mean(dY) - X_hat * mean(dY * X_hat))``.
* :func:`bn_backward_reference` assembles the same gradient term by term
  through ``dL/dX_hat``, ``dL/dvar`` and ``dL/dmean`` without simplifying.
  It exists as a test oracle for the closed form.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, as_tensor, reduce_stats

# Std of max(0, z) for z ~ N(0, 1), rounded as used for input-norm scaling.
SIGMA_ACT_RELU = 0.58

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


class Variant(str, enum.Enum):
    STANDARD = "standard"
    A1 = "a1"
    A2 = "a2"
    RBN = "rbn"
    IEBN = "iebn"
    RBN_MINUS = "rbn-"
    IEBN_MINUS = "iebn-"

    @property
    def uses_sigmoid_scale(self) -> bool:
        return self in _SIGMOID_VARIANTS

    @property
    def uses_instance_stats(self) -> bool:
        return self in (Variant.RBN, Variant.IEBN)


_SIGMOID_VARIANTS = frozenset(
    {Variant.RBN, Variant.IEBN, Variant.RBN_MINUS, Variant.IEBN_MINUS})

# Initial sigmoid bias per variant family (scale starts at sigmoid(w_b)).
_W_B_INIT = {
    Variant.RBN: 1.0,
    Variant.RBN_MINUS: 1.0,
    Variant.IEBN: -1.0,
    Variant.IEBN_MINUS: -1.0,
}


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    variant: Variant = Variant.STANDARD
    gamma0: np.ndarray | None = None
    w_v: np.ndarray | None = None
    w_b: np.ndarray | None = None
    beta_frozen: bool = False
    # False until a training batch (or an explicit assignment) fills the
    # running statistics; eval-mode networks refuse to run before that.
    stats_ready: bool = False

    def __post_init__(self):
        self.variant = Variant(self.variant)
        # eps == 0 is accepted for exact hand checks; training code uses > 0
        if not self.eps >= 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")
        if not 0 < self.momentum <= 1:
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")
        if self.variant is Variant.A2 and self.gamma0 is None:
            raise ValueError("A2 variant needs gamma0")
        if self.variant.uses_sigmoid_scale and self.w_b is None:
            raise ValueError(f"{self.variant.value} variant needs w_b")
        if self.variant.uses_instance_stats and self.w_v is None:
            raise ValueError(f"{self.variant.value} variant needs w_v")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> dict[str, tuple[np.ndarray, str]]:
        """Learnable arrays keyed by name, each with its optimizer role."""
        params = {"gamma": (self.gamma, "bn_gamma"), "beta": (self.beta, "bn_beta")}
        if self.variant is Variant.A2:
            params["gamma0"] = (self.gamma0, "bn_aux")
        if self.variant.uses_instance_stats:
            params["w_v"] = (self.w_v, "bn_aux")
        if self.variant.uses_sigmoid_scale:
            params["w_b"] = (self.w_b, "bn_aux")
        return params


@dataclass
class BNCache:
    x: np.ndarray
    x_hat: np.ndarray
    batch_mean: np.ndarray
    batch_var: np.ndarray
    raw_input_gap: np.ndarray | None = None
    scale_s: np.ndarray | None = None


def make_bn_state(channels: int, gamma_init: float = 1.0,
                  variant: Variant | str = Variant.STANDARD,
                  eps: float = DEFAULT_EPS,
                  momentum: float = DEFAULT_MOMENTUM) -> BatchNormState:
    """Fresh BN state with gamma = gamma_init, beta = 0 and unit running var.

    Variant extras start at gamma0 = 1 (A2), w_v = 0 and w_b = +1 (RBN
    family) or w_b = -1 (IEBN family).
    """
    variant = Variant(variant)
    if channels < 1:
        raise ValueError(f"channels must be positive, got {channels}")
    kw = {}
    if variant is Variant.A2:
        kw["gamma0"] = np.ones(channels, dtype=DTYPE)
    if variant.uses_sigmoid_scale:
        kw["w_v"] = np.zeros(channels, dtype=DTYPE)
        kw["w_b"] = np.full(channels, _W_B_INIT[variant], dtype=DTYPE)
    return BatchNormState(
        gamma=np.full(channels, gamma_init, dtype=DTYPE),
        beta=np.zeros(channels, dtype=DTYPE),
        running_mean=np.zeros(channels, dtype=DTYPE),
        running_var=np.ones(channels, dtype=DTYPE),
        eps=eps, momentum=momentum, variant=variant, **kw)


def make_input_norm_bn(channels: int, gamma_init: float,
                       sigma_act: float = SIGMA_ACT_RELU,
                       eps: float = DEFAULT_EPS,
                       momentum: float = DEFAULT_MOMENTUM) -> BatchNormState:
    """BN used in place of dataset input normalization.

    No activation follows it, so its scale starts at ``sigma_act * gamma_init``
    to match the variance a ReLU would have left, and beta is pinned at 0.
    """
    if not 0 < gamma_init <= 1:
        raise ValueError(f"gamma_init must lie in (0, 1], got {gamma_init}")
    if not sigma_act > 0:
        raise ValueError(f"sigma_act must be positive, got {sigma_act}")
    state = make_bn_state(channels, sigma_act * gamma_init, eps=eps, momentum=momentum)
    state.beta_frozen = True
    return state


def _axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise ValueError(f"batchnorm expects a 2-D or 4-D input, got shape {x.shape}")


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _per_instance(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - 2))


def _gap(x: np.ndarray) -> np.ndarray:
    return x if x.ndim == 2 else x.mean(axis=(2, 3))


def _check_channels(x: np.ndarray, state: BatchNormState) -> None:
    if x.shape[1] != state.channels:
        raise ValueError(f"input has {x.shape[1]} channels, BN expects {state.channels}")


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _scale_s(x_hat: np.ndarray, raw_input: np.ndarray | None,
             state: BatchNormState) -> tuple[np.ndarray, np.ndarray | None]:
    """Sigmoid scale, shaped (N, C) for instance variants or (C,) otherwise."""
    v = state.variant
    if v.uses_instance_stats:
        if v is Variant.IEBN:
            if raw_input is None:
                raise ValueError("IEBN needs the raw (pre-normalization) input")
            source = raw_input
        else:
            source = x_hat
        gap = _gap(source)
        return sigmoid(state.w_v * gap + state.w_b), gap
    return sigmoid(state.w_b), None


def affine_apply_variant(x_hat: np.ndarray, raw_input: np.ndarray | None,
                         state: BatchNormState) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply the affine tail selected by ``state.variant``.

    Returns ``(Y, scale_s)``; ``scale_s`` is None for the variants without a
    sigmoid scale.
    """
    x_hat = as_tensor(x_hat)
    nd = x_hat.ndim
    g = _per_channel(state.gamma, nd)
    b = _per_channel(state.beta, nd)
    v = state.variant
    if v is Variant.STANDARD:
        return g * x_hat + b, None
    if v is Variant.A1:
        return g * (x_hat + b), None
    if v is Variant.A2:
        return g * (_per_channel(state.gamma0, nd) * x_hat + b), None
    s, _ = _scale_s(x_hat, raw_input, state)
    s_b = _per_instance(s, nd) if v.uses_instance_stats else _per_channel(s, nd)
    return g * s_b * x_hat + b, s


def affine_backward(dy: np.ndarray, x_hat: np.ndarray, raw_input: np.ndarray | None,
                    state: BatchNormState):
    """Backward companion of :func:`affine_apply_variant`.

    Returns ``(d_x_hat, d_raw_input, grads)`` where ``d_raw_input`` is only
    non-None for IEBN (its scale reads the raw input through GAP) and
    ``grads`` maps parameter names to gradients.
    """
    nd = x_hat.ndim
    axes = _axes(x_hat)
    g = _per_channel(state.gamma, nd)
    b = _per_channel(state.beta, nd)
    v = state.variant
    sum_dy = dy.sum(axis=axes)
    if v is Variant.STANDARD:
        return g * dy, None, {"gamma": (dy * x_hat).sum(axis=axes), "beta": sum_dy}
    if v is Variant.A1:
        return g * dy, None, {
            "gamma": (dy * (x_hat + b)).sum(axis=axes),
            "beta": state.gamma * sum_dy,
        }
    if v is Variant.A2:
        g0 = _per_channel(state.gamma0, nd)
        return g * g0 * dy, None, {
            "gamma": (dy * (g0 * x_hat + b)).sum(axis=axes),
            "gamma0": state.gamma * (dy * x_hat).sum(axis=axes),
            "beta": state.gamma * sum_dy,
        }

    s, gap = _scale_s(x_hat, raw_input, state)
    grads = {"beta": sum_dy}
    if v.uses_instance_stats:
        s_b = _per_instance(s, nd)
        d_s = (dy * g * x_hat)
        d_s = d_s if nd == 2 else d_s.sum(axis=(2, 3))       # (N, C)
        d_logit = d_s * s * (1.0 - s)
        grads["gamma"] = (dy * s_b * x_hat).sum(axis=axes)
        grads["w_v"] = (d_logit * gap).sum(axis=0)
        grads["w_b"] = d_logit.sum(axis=0)
        d_gap = d_logit * state.w_v
        spatial = 1 if nd == 2 else x_hat.shape[2] * x_hat.shape[3]
        d_source = np.broadcast_to(_per_instance(d_gap / spatial, nd), x_hat.shape)
        d_xhat = g * s_b * dy
        if v is Variant.RBN:
            return d_xhat + d_source, None, grads
        return d_xhat, np.array(d_source), grads

    s_b = _per_channel(s, nd)
    d_s = (dy * g * x_hat).sum(axis=axes)
    grads["gamma"] = s * (dy * x_hat).sum(axis=axes)
    grads["w_b"] = d_s * s * (1.0 - s)
    return g * s_b * dy, None, grads


def bn_forward_train(x: np.ndarray, state: BatchNormState) -> tuple[np.ndarray, BNCache]:
    """Training-mode forward with batch statistics; updates running stats."""
    x = as_tensor(x)
    axes = _axes(x)
    _check_channels(x, state)
    m = int(np.prod([x.shape[a] for a in axes]))
    if m < 2:
        raise ValueError(f"training BN needs at least 2 values per channel, got {m}")
    mean, var = reduce_stats(x, axes)
    x_hat = (x - _per_channel(mean, x.ndim)) / np.sqrt(_per_channel(var, x.ndim) + state.eps)
    y, s = affine_apply_variant(x_hat, x, state)

    # running var uses the same biased estimator as the batch var
    mom = state.momentum
    state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
    state.running_var = (1.0 - mom) * state.running_var + mom * var
    state.stats_ready = True

    gap = _gap(x) if state.variant is Variant.IEBN else None
    return y, BNCache(x=x, x_hat=x_hat, batch_mean=mean, batch_var=var,
                      raw_input_gap=gap, scale_s=s)


def bn_forward_eval(x: np.ndarray, state: BatchNormState) -> np.ndarray:
    """Eval-mode forward with running statistics; does not mutate ``state``."""
    x = as_tensor(x)
    _axes(x)
    _check_channels(x, state)
    nd = x.ndim
    x_hat = (x - _per_channel(state.running_mean, nd)) / np.sqrt(
        _per_channel(state.running_var, nd) + state.eps)
    y, _ = affine_apply_variant(x_hat, x, state)
    return y


def _check_backward(cache: BNCache, dy: np.ndarray) -> np.ndarray:
    dy = as_tensor(dy)
    if dy.shape != cache.x_hat.shape:
        raise ValueError(f"dY shape {dy.shape} does not match cache {cache.x_hat.shape}")
    return dy


def _normalize_backward(d_xhat: np.ndarray, cache: BNCache, eps: float) -> np.ndarray:
    """Gradient through X_hat = (X - mean) / sqrt(var + eps) given dL/dX_hat."""
    axes = _axes(d_xhat)
    nd = d_xhat.ndim
    inv_std = _per_channel(1.0 / np.sqrt(cache.batch_var + eps), nd)
    x_hat = cache.x_hat
    mean_d = _per_channel(d_xhat.mean(axis=axes), nd)
    mean_dx = _per_channel((d_xhat * x_hat).mean(axis=axes), nd)
    return inv_std * (d_xhat - mean_d - x_hat * mean_dx)


def bn_backward(cache: BNCache, state: BatchNormState, dy: np.ndarray):
    """Closed-form BN backward for the standard tail.

    Returns ``(dX, dGamma, dBeta)``.
    """
    if state.variant is not Variant.STANDARD:
        raise ValueError("bn_backward handles the standard variant; use bn_backward_variant")
    dy = _check_backward(cache, dy)
    axes = _axes(dy)
    nd = dy.ndim
    x_hat = cache.x_hat
    factor = _per_channel(gradient_factor(state, cache.batch_var), nd)
    mean_dy = _per_channel(dy.mean(axis=axes), nd)
    mean_dy_xhat = _per_channel((dy * x_hat).mean(axis=axes), nd)
    dx = factor * (dy - mean_dy - x_hat * mean_dy_xhat)
    return dx, (dy * x_hat).sum(axis=axes), dy.sum(axis=axes)


def bn_backward_reference(cache: BNCache, state: BatchNormState, dy: np.ndarray) -> np.ndarray:
    """Term-by-term chain rule for dL/dX (standard tail only)."""
    if state.variant is not Variant.STANDARD:
        raise ValueError("reference backward covers the standard variant only")
    dy = _check_backward(cache, dy)
    axes = _axes(dy)
    nd = dy.ndim
    m = int(np.prod([dy.shape[a] for a in axes]))
    mu = _per_channel(cache.batch_mean, nd)
    var_eps = _per_channel(cache.batch_var, nd) + state.eps
    xc = cache.x - mu

    d_xhat = dy * _per_channel(state.gamma, nd)
    d_var = (d_xhat * xc * -0.5 * var_eps ** -1.5).sum(axis=axes, keepdims=True)
    d_mu = ((d_xhat * (-1.0 / np.sqrt(var_eps))).sum(axis=axes, keepdims=True)
            + d_var * (-2.0 / m) * xc.sum(axis=axes, keepdims=True))

    dxhat_dx = 1.0 / np.sqrt(var_eps)
    dvar_dx = (2.0 / m) * xc
    dmu_dx = 1.0 / m
    return d_xhat * dxhat_dx + d_var * dvar_dx + d_mu * dmu_dx


def bn_backward_variant(cache: BNCache, state: BatchNormState, dy: np.ndarray):
    """BN backward for any variant. Returns ``(dX, grads)`` keyed by parameter name."""
    dy = _check_backward(cache, dy)
    if state.variant is Variant.STANDARD:
        dx, dgamma, dbeta = bn_backward(cache, state, dy)
        return dx, {"gamma": dgamma, "beta": dbeta}
    d_xhat, d_raw, grads = affine_backward(dy, cache.x_hat, cache.x, state)
    dx = _normalize_backward(d_xhat, cache, state.eps)
    if d_raw is not None:
        dx = dx + d_raw
    return dx, grads


def gradient_factor(state: BatchNormState, batch_var: np.ndarray) -> np.ndarray:
    """Per-channel ``gamma / sqrt(var + eps)`` multiplying the input gradient."""
    return state.gamma / np.sqrt(np.asarray(batch_var, dtype=DTYPE) + state.eps)


def rectified_gaussian_std(n_samples: int, rng: np.random.Generator) -> float:
    """Empirical std of ReLU(z) over ``n_samples`` unit-Gaussian draws."""
    z = rng.standard_normal(n_samples)
    return float(np.maximum(z, 0.0).std())
