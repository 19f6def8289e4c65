import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bninit import nn
from bninit.optim import (ConfigurationError, ParamGroup, ScheduleState, build_param_groups,
                          cosine_lr, sgd_step)
from bninit.tensor import make_rng


def net_for_groups(variant="standard", input_norm="bn"):
    specs = [nn.conv2d(3, 4, 3, 1, 1), nn.batchnorm(4), nn.relu(), nn.gap(), nn.linear(4, 2)]
    return nn.build_network(specs, 0.1, input_norm, make_rng(0), (3, 6, 6), variant=variant)


def single(role, value, lr_divisor=1.0, weight_decay=0.0):
    w = np.array([value], dtype=np.float64)
    g = ParamGroup(role, lr_divisor, weight_decay, {"p": w}, {"p": np.zeros(1)})
    return g, w


class TestParamGroups:
    def test_gamma_divisor(self):
        groups = {g.role: g for g in build_param_groups(net_for_groups(), c=100)}
        assert groups["bn_gamma"].lr_divisor == 100
        assert groups["bn_gamma"].weight_decay == 0
        assert groups["bn_beta_and_bias"].lr_divisor == 1
        assert groups["bn_beta_and_bias"].weight_decay == 0
        assert groups["weight"].weight_decay == 1e-4

    def test_base_semantics(self):
        groups = build_param_groups(net_for_groups(), c=1)
        assert all(g.lr_divisor == 1 for g in groups)

    def test_frozen_beta_excluded(self):
        net = net_for_groups()
        names = {n for g in build_param_groups(net) for n in g.members}
        assert "0.beta" not in names and "0.gamma" in names
        assert names == set(net.params) - {"0.beta"}

    def test_every_parameter_in_one_group(self):
        net = net_for_groups("rbn", "fixed")
        seen = [n for g in build_param_groups(net) for n in g.members]
        assert sorted(seen) == sorted(net.params)
        aux = {g.role: g for g in build_param_groups(net)}["bn_aux"]
        assert set(aux.members) == {"1.w_v", "1.w_b"}
        assert aux.lr_divisor == 1 and aux.weight_decay == 0

    def test_unregistered_role(self):
        net = net_for_groups()

        class Odd(nn.Layer):
            def params(self):
                return {"x": (np.zeros(1), "mystery")}

        net.layers.append(Odd())
        with pytest.raises(ConfigurationError):
            build_param_groups(net)

    def test_c_below_one(self):
        with pytest.raises(ValueError):
            build_param_groups(net_for_groups(), c=0.5)


class TestSgdStep:
    def test_vanilla_step(self):
        g, w = single("weight", 1.0)
        sgd_step([g], {"p": np.array([0.5])}, 0.1, momentum=0.0)
        assert w[0] == pytest.approx(0.95)

    def test_gamma_step(self):
        g, w = single("bn_gamma", 0.1, lr_divisor=100)
        sgd_step([g], {"p": np.array([1.0])}, 0.1, momentum=0.0)
        assert w[0] == pytest.approx(0.1 - 0.001, abs=1e-15)

    def test_decay_exclusion(self):
        gw, w = single("weight", 1.0, weight_decay=1e-4)
        gg, gamma = single("bn_gamma", 1.0, lr_divisor=100)
        sgd_step([gw, gg], {"p": np.array([0.0])}, 0.1, momentum=0.0)
        assert w[0] == pytest.approx(0.99999, abs=1e-15)
        assert gamma[0] == 1.0

    def test_momentum_accumulates(self):
        g, w = single("weight", 0.0)
        for _ in range(2):
            sgd_step([g], {"p": np.array([1.0])}, 1.0, momentum=0.9)
        assert w[0] == pytest.approx(-(1.0 + 1.9))

    def test_missing_gradient(self):
        g, _ = single("weight", 1.0)
        with pytest.raises(KeyError):
            sgd_step([g], {}, 0.1)

    @given(st.floats(-10, 10), st.floats(1e-4, 1.0), st.floats(1.0, 1000.0))
    def test_exact_one_over_c(self, grad, lr, c):
        ref, w_ref = single("bn_gamma", 0.5, 1.0)
        red, w_red = single("bn_gamma", 0.5, c)
        sgd_step([ref], {"p": np.array([grad])}, lr, momentum=0.0)
        sgd_step([red], {"p": np.array([grad])}, lr, momentum=0.0)
        assert abs((w_red[0] - 0.5) - (w_ref[0] - 0.5) / c) <= 1e-15

    def test_zero_gradient_fixed_point(self):
        net = net_for_groups("a2")
        groups = build_param_groups(net, weight_decay=0.0)
        before = {k: a.copy() for k, (a, _) in net.params.items()}
        zeros = {k: np.zeros_like(a) for k, (a, _) in net.params.items()}
        for _ in range(5):
            sgd_step(groups, zeros, 0.1)
        for k, (a, _) in net.params.items():
            assert np.array_equal(a, before[k])

    def test_bn_params_untouched_by_decay(self):
        net = net_for_groups()
        net.params["2.beta"][0][:] = 0.7
        groups = build_param_groups(net, c=100, weight_decay=0.5)
        before = {k: a.copy() for k, (a, _) in net.params.items()}
        zeros = {k: np.zeros_like(a) for k, (a, _) in net.params.items()}
        for _ in range(20):
            sgd_step(groups, zeros, 0.1)
        for k, (a, role) in net.params.items():
            if role != "weight":
                assert a.tobytes() == before[k].tobytes(), k
            else:
                assert not np.array_equal(a, before[k])

    def test_frozen_beta_stays_zero_in_training_step(self):
        net = net_for_groups()
        groups = build_param_groups(net)
        x = make_rng(1).standard_normal((4, 3, 6, 6))
        logits, caches = nn.network_forward(net, x, "train")
        grads = nn.network_backward(net, caches, make_rng(2).standard_normal(logits.shape))
        assert grads["0.beta"].any()
        sgd_step(groups, grads, 0.1)
        assert not net.params["0.beta"][0].any()


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(ScheduleState(0.1, 20, 0)) == 0.1
        assert cosine_lr(ScheduleState(0.1, 20, 10)) == pytest.approx(0.05, abs=1e-17)
        assert cosine_lr(ScheduleState(0.1, 20, 20)) == 0.0

    def test_monotone(self):
        lrs = [cosine_lr(ScheduleState(0.3, 37, t)) for t in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_formula(self):
        assert cosine_lr(ScheduleState(1.0, 8, 2)) == pytest.approx((1 + math.cos(math.pi / 4)) / 2)

    @pytest.mark.parametrize("t,T", [(21, 20), (-1, 20), (0, 0)])
    def test_out_of_range(self, t, T):
        with pytest.raises(ValueError):
            cosine_lr(ScheduleState(0.1, T, t))
