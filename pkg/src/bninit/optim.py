"""SGD with momentum, per-group learning-rate divisors and selective decay.

Parameters are grouped by role. BN scales get the learning rate divided by
``c``; BN shifts, biases and auxiliary BN parameters are never decayed.
Weight decay is folded into the gradient (``g = grad + wd * w``) before the
momentum update, and parameters are updated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
GAMMA_LR_DIVISOR = 100.0

GROUP_ROLES = ("weight", "bn_gamma", "bn_beta_and_bias", "bn_aux")
_ROLE_TO_GROUP = {
    "weight": "weight",
    "bn_gamma": "bn_gamma",
    "bn_beta": "bn_beta_and_bias",
    "bias": "bn_beta_and_bias",
    "bn_aux": "bn_aux",
}


class ConfigurationError(ValueError):
    pass


@dataclass
class ParamGroup:
    role: str
    lr_divisor: float = 1.0
    weight_decay: float = 0.0
    members: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def build_param_groups(net, c: float = GAMMA_LR_DIVISOR,
                       weight_decay: float = WEIGHT_DECAY) -> list[ParamGroup]:
    """One group per role; frozen parameters are left out entirely."""
    if not c >= 1:
        raise ValueError(f"c must be >= 1, got {c}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
    groups = {
        "weight": ParamGroup("weight", 1.0, weight_decay),
        "bn_gamma": ParamGroup("bn_gamma", float(c), 0.0),
        "bn_beta_and_bias": ParamGroup("bn_beta_and_bias", 1.0, 0.0),
        "bn_aux": ParamGroup("bn_aux", 1.0, 0.0),
    }
    frozen = net.frozen
    for name, (arr, role) in net.params.items():
        if name in frozen:
            continue
        if role not in _ROLE_TO_GROUP:
            raise ConfigurationError(f"parameter {name} has unregistered role {role!r}")
        g = groups[_ROLE_TO_GROUP[role]]
        g.members[name] = arr
        g.buffers[name] = np.zeros_like(arr)
    return [groups[r] for r in GROUP_ROLES]


def sgd_step(groups: list[ParamGroup], grads: dict[str, np.ndarray], lr: float,
             momentum: float = MOMENTUM) -> None:
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    for g in groups:
        step = lr / g.lr_divisor
        for name, w in g.members.items():
            if name not in grads:
                raise KeyError(f"no gradient for parameter {name}")
            d = grads[name]
            if g.weight_decay:
                d = d + g.weight_decay * w
            v = g.buffers[name]
            v *= momentum
            v += d
            w -= step * v


@dataclass
class ScheduleState:
    base_lr: float
    total_epochs: int
    epoch: int = 0


def cosine_lr(schedule: ScheduleState) -> float:
    """Half-period cosine: ``base_lr * (1 + cos(pi * t / T)) / 2``."""
    t, T = schedule.epoch, schedule.total_epochs
    if T < 1:
        raise ValueError(f"total_epochs must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise ValueError(f"epoch {t} outside [0, {T}]")
    return schedule.base_lr * (1.0 + math.cos(math.pi * t / T)) / 2.0
