"""Finite-difference gradient checks.

The BN oracle re-evaluates the normalization plus affine tail directly in
extended precision (``np.longdouble``), vectorized over all perturbations,
and never calls into :mod:`bninit.batchnorm`. Extended precision keeps the
central-difference round-off far below the checked tolerance even for
two-sample batches, where dL/dX shrinks to the order of eps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import batchnorm as bn
from . import nn

FD_STEP = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``, 0 when all three vanish.

    A positive ``floor`` keeps gradients that are exactly zero in theory
    (a bias feeding straight into BN) from scoring noise against noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros(x.shape, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def _bn_loss_ld(x, gamma, beta, eps, r):
    """Sum(r * BN(x)) for a stack of ``(P, m, C)`` inputs, in long double."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    y = gamma * (x - mu) / np.sqrt(var + eps) + beta
    return (y * r).sum(axis=(1, 2))


def bn_fd_gradients(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float,
                    dy: np.ndarray, h: float = FD_STEP):
    """Finite-difference (dX, dGamma, dBeta) of ``sum(dy * BN(x))`` for 2-D ``x``."""
    ld = np.longdouble
    m, c = x.shape
    xl, gl, bl, rl, el = (np.asarray(a, dtype=ld) for a in (x, gamma, beta, dy, eps))

    eye = np.eye(m * c, dtype=ld).reshape(m * c, m, c) * ld(h)
    xs = np.concatenate([xl + eye, xl - eye])
    lx = _bn_loss_ld(xs, gl, bl, el, rl)
    dx = ((lx[:m * c] - lx[m * c:]) / (2 * ld(h))).reshape(m, c)

    eye_c = np.eye(c, dtype=ld)[:, None, :] * ld(h)
    xr = np.broadcast_to(xl, (2 * c, m, c))
    lg = _bn_loss_ld(xr, np.concatenate([gl + eye_c, gl - eye_c]), bl, el, rl)
    lb = _bn_loss_ld(xr, gl, np.concatenate([bl + eye_c, bl - eye_c]), el, rl)
    dg = (lg[:c] - lg[c:]) / (2 * ld(h))
    db = (lb[:c] - lb[c:]) / (2 * ld(h))
    return dx.astype(np.float64), dg.astype(np.float64), db.astype(np.float64)


@dataclass
class BNCheckSummary:
    cases: int
    max_rel_dx: float
    max_rel_dgamma: float
    max_rel_dbeta: float
    max_abs_reference: float

    def passed(self, rel_tol: float = 1e-5, abs_tol: float = 1e-10) -> bool:
        return (max(self.max_rel_dx, self.max_rel_dgamma, self.max_rel_dbeta) <= rel_tol
                and self.max_abs_reference <= abs_tol)


def random_bn_case(rng: np.random.Generator, max_m: int = 16, max_c: int = 8):
    """Random batch, BN state and upstream gradient with m in [2, max_m]."""
    m = int(rng.integers(2, max_m + 1))
    c = int(rng.integers(1, max_c + 1))
    x = rng.normal(rng.normal(0, 2, size=c), rng.uniform(0.2, 3.0, size=c), size=(m, c))
    state = bn.make_bn_state(c, 1.0)
    state.gamma[:] = rng.uniform(0.05, 2.0, size=c) * rng.choice([-1.0, 1.0], size=c)
    state.beta[:] = rng.normal(size=c)
    dy = rng.normal(size=(m, c))
    return x, state, dy


def check_bn_cases(n_cases: int, rng: np.random.Generator, max_m: int = 16,
                   max_c: int = 8) -> BNCheckSummary:
    """Closed-form backward vs finite differences and vs the reference path."""
    worst = [0.0, 0.0, 0.0, 0.0]
    for _ in range(n_cases):
        x, state, dy = random_bn_case(rng, max_m, max_c)
        _, cache = bn.bn_forward_train(x, state)
        dx, dg, db = bn.bn_backward(cache, state, dy)
        ref = bn.bn_backward_reference(cache, state, dy)
        ndx, ndg, ndb = bn_fd_gradients(x, state.gamma, state.beta, state.eps, dy)
        errs = (rel_error(dx, ndx), rel_error(dg, ndg), rel_error(db, ndb),
                float(np.abs(dx - ref).max()))
        worst = [max(w, e) for w, e in zip(worst, errs)]
    return BNCheckSummary(n_cases, *worst)


def _bn_stats(net: nn.Network):
    return [(l.state.running_mean, l.state.running_var, l.state.stats_ready)
            for _, l in net.bn_layers()]


def _restore_bn_stats(net: nn.Network, saved) -> None:
    for (_, layer), (mean, var, ready) in zip(net.bn_layers(), saved):
        layer.state.running_mean, layer.state.running_var = mean, var
        layer.state.stats_ready = ready


def check_network(net: nn.Network, x: np.ndarray, labels: np.ndarray,
                  loss_fn, h: float = FD_STEP, floor: float = 1e-5) -> dict[str, float]:
    """Relative error of every parameter gradient of ``loss_fn(logits, labels)``.

    Train-mode forwards advance BN running statistics; they are restored
    after every evaluation so the network is left as it was. ``floor`` sits
    above the ~1e-10 central-difference round-off, so a parameter whose
    true gradient is zero (a bias feeding straight into BN) scores ~1e-5
    rather than an arbitrary ratio of two noise vectors.
    """
    saved = _bn_stats(net)

    def loss():
        logits, _ = nn.network_forward(net, x, "train")
        _restore_bn_stats(net, saved)
        return loss_fn(logits, labels)[0]

    logits, caches = nn.network_forward(net, x, "train")
    _restore_bn_stats(net, saved)
    grads = nn.network_backward(net, caches, loss_fn(logits, labels)[1])
    return {name: rel_error(grads[name], numerical_gradient(loss, arr, h), floor)
            for name, (arr, _) in net.params.items()}


def _randomize_extras(state: bn.BatchNormState, rng: np.random.Generator) -> None:
    c = state.channels
    state.gamma[:] = rng.uniform(0.3, 1.5, size=c)
    state.beta[:] = rng.normal(size=c)
    for name in ("gamma0", "w_v", "w_b"):
        arr = getattr(state, name)
        if arr is not None:
            arr[:] = rng.normal(0, 0.7, size=c)


def check_variants(rng: np.random.Generator, shapes=((6, 3), (3, 2, 3, 3))) -> dict[str, float]:
    """Worst relative error over all parameters and dX for every affine variant."""
    out = {}
    for variant in bn.Variant:
        worst = 0.0
        for shape in shapes:
            state = bn.make_bn_state(shape[1], 1.0, variant)
            _randomize_extras(state, rng)
            x = rng.normal(0.5, 1.5, size=shape)
            dy = rng.normal(size=shape)
            running = (state.running_mean, state.running_var)

            def loss():
                y, _ = bn.bn_forward_train(x, state)
                state.running_mean, state.running_var = running
                return float((y * dy).sum())

            _, cache = bn.bn_forward_train(x, state)
            state.running_mean, state.running_var = running
            dx, grads = bn.bn_backward_variant(cache, state, dy)
            worst = max(worst, rel_error(dx, numerical_gradient(loss, x)))
            for name, (arr, _) in state.parameters().items():
                worst = max(worst, rel_error(grads[name], numerical_gradient(loss, arr)))
        out[variant.value] = worst
    return out


def _check_layer(forward, backward, inputs: dict[str, np.ndarray], rng) -> float:
    y, cache = forward()
    dy = rng.normal(size=y.shape)
    analytic = backward(cache, dy)

    def loss():
        return float((forward()[0] * dy).sum())

    return max(rel_error(analytic[name], numerical_gradient(loss, arr))
               for name, arr in inputs.items())


def check_layers(rng: np.random.Generator) -> dict[str, float]:
    """Finite-difference checks of linear, conv (several geometries), ReLU and GAP."""
    out = {}
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    out["linear"] = _check_layer(
        lambda: nn.linear_forward(x, w, b),
        lambda cache, dy: dict(zip("xwb", nn.linear_backward(cache, dy))),
        {"x": x, "w": w, "b": b}, rng)
    for k, s, p in ((3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0), (3, 2, 0)):
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        out[f"conv2d k{k} s{s} p{p}"] = _check_layer(
            lambda: nn.conv2d_forward(x, w, b, s, p),
            lambda cache, dy: dict(zip("xwb", nn.conv2d_backward(cache, dy))),
            {"x": x, "w": w, "b": b}, rng)
    # keep samples away from the kink so central differences are exact
    x = rng.uniform(0.1, 1.0, size=(3, 8)) * rng.choice([-1.0, 1.0], size=(3, 8))
    out["relu"] = _check_layer(lambda: nn.relu_forward(x),
                               lambda cache, dy: {"x": nn.relu_backward(cache, dy)},
                               {"x": x}, rng)
    x = rng.normal(size=(2, 3, 4, 5))
    out["gap"] = _check_layer(lambda: nn.gap_forward(x),
                              lambda cache, dy: {"x": nn.gap_backward(cache, dy)},
                              {"x": x}, rng)
    return out
