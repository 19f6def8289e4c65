"""BN -> ReLU -> linear -> BN probe shared by the nn and acceptance tests."""

import numpy as np

from bninit import batchnorm as bn
from bninit import nn
from bninit.tensor import make_rng

WIDTH = 256
BATCH = 8192


def chain_probe(gamma, width=WIDTH, batch=BATCH, weight_seed=0, data_seed=1):
    """Forward unit-Gaussian data once in train mode.

    Returns ``(batch_var, gradient_factor, weight)`` for the second BN, with
    the linear weight drawn Kaiming fan-in (ReLU gain) from ``weight_seed``.
    """
    specs = [nn.batchnorm(width), nn.relu(), nn.linear(width, width, bias=False),
             nn.batchnorm(width)]
    net = nn.build_network(specs, gamma, "fixed", make_rng(weight_seed), (width,))
    w = nn.kaiming_fanin_init((width, width), nn.RELU_GAIN, make_rng(weight_seed))
    net.layers[2].weight[...] = w
    x = make_rng(data_seed).standard_normal((batch, width))
    _, caches = nn.network_forward(net, x, "train")
    var = caches[3].batch_var
    factor = bn.gradient_factor(net.layers[3].state, var)
    return var, factor, w
