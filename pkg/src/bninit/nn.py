"""Layers with explicit backward passes and sequential networks.

Every layer implements ``forward(x, train) -> (y, cache)`` and
``backward(cache, dy) -> (dx, grads)``, where ``grads`` is keyed by the
layer's own parameter names. :class:`Network` prefixes those names with
the layer index (``"3.gamma"``) and tags each parameter with an optimizer
role: ``weight``, ``bias``, ``bn_gamma``, ``bn_beta`` or ``bn_aux``.

Loss gradients arriving at the logits are expected to be averaged over the
batch already, so parameter gradients here are plain sums over the batch.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import batchnorm as bn
from .tensor import DTYPE, as_tensor, check_finite, randn

RELU_GAIN = math.sqrt(2.0)
CHECKPOINT_FORMAT = "bninit-checkpoint"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("linear", "conv2d", "batchnorm", "relu", "gap", "flatten")
INPUT_NORM_MODES = ("fixed", "offline", "bn")


@dataclass
class LayerSpec:
    kind: str
    in_features: int | None = None
    out_features: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    channels: int | None = None
    bias: bool = True
    gain: float = RELU_GAIN
    # batchnorm only; None means "use the network-wide variant"
    variant: str | None = None
    input_norm: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items()
                if v != _SPEC_DEFAULTS[k] or k == "kind"}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


_SPEC_DEFAULTS = {f.name: f.default for f in dataclasses.fields(LayerSpec)}


def linear(in_features: int, out_features: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("linear", in_features=in_features, out_features=out_features, bias=bias)


def conv2d(in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
           padding: int = 0, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, stride=stride, padding=padding, bias=bias)


def batchnorm(channels: int, variant: str | None = None) -> LayerSpec:
    return LayerSpec("batchnorm", channels=channels, variant=variant)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def gap() -> LayerSpec:
    return LayerSpec("gap")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def tiny_bn_net(num_classes: int = 10, in_channels: int = 3,
                widths: Sequence[int] = (32, 64, 128)) -> list[LayerSpec]:
    """Three conv-BN-ReLU blocks (stride 2 from the second on), GAP, linear head."""
    specs = []
    prev = in_channels
    for i, w in enumerate(widths):
        specs += [conv2d(prev, w, 3, stride=1 if i == 0 else 2, padding=1, bias=False),
                  batchnorm(w), relu()]
        prev = w
    return specs + [gap(), linear(prev, num_classes)]


def infer_shapes(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (batch axis excluded); raises on a broken chain."""
    shape = tuple(int(s) for s in input_shape)
    out = []
    for i, s in enumerate(specs):
        where = f"layer {i} ({s.kind})"
        if s.kind == "linear":
            if len(shape) != 1 or shape[0] != s.in_features:
                raise ValueError(f"{where}: expects ({s.in_features},), got {shape}")
            if not s.out_features or s.out_features < 1:
                raise ValueError(f"{where}: out_features must be positive")
            shape = (s.out_features,)
        elif s.kind == "conv2d":
            if len(shape) != 3 or shape[0] != s.in_channels:
                raise ValueError(f"{where}: expects ({s.in_channels}, H, W), got {shape}")
            if s.kernel_size < 1 or s.stride < 1 or s.padding < 0 or not s.out_channels:
                raise ValueError(f"{where}: bad conv geometry")
            h, w = (d + 2 * s.padding - s.kernel_size for d in shape[1:])
            if h < 0 or w < 0:
                raise ValueError(f"{where}: kernel {s.kernel_size} larger than padded input {shape}")
            shape = (s.out_channels, h // s.stride + 1, w // s.stride + 1)
        elif s.kind == "batchnorm":
            if len(shape) not in (1, 3) or shape[0] != s.channels:
                raise ValueError(f"{where}: expects {s.channels} channels, got {shape}")
        elif s.kind == "gap":
            if len(shape) != 3:
                raise ValueError(f"{where}: expects (C, H, W), got {shape}")
            shape = (shape[0],)
        elif s.kind == "flatten":
            shape = (int(np.prod(shape)),)
        out.append(shape)
    return out


def _fan_in(shape: Sequence[int]) -> int:
    if len(shape) == 2:
        return int(shape[1])
    if len(shape) == 4:
        return int(shape[1] * shape[2] * shape[3])
    raise ValueError(f"fan-in init supports 2-D or 4-D weights, got shape {tuple(shape)}")


def kaiming_fanin_init(shape: Sequence[int], gain: float, rng: np.random.Generator) -> np.ndarray:
    """N(0, (gain / sqrt(fan_in))^2) samples for a linear or conv weight."""
    fan_in = _fan_in(shape)
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    return randn(tuple(shape), 0.0, gain / math.sqrt(fan_in), rng)


def uniform_fanin_init(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) samples."""
    bound = 1.0 / math.sqrt(_fan_in(shape))
    return rng.uniform(-bound, bound, size=tuple(shape))


class Layer:
    kind = ""

    def params(self) -> dict[str, tuple[np.ndarray, str]]:
        return {}

    def frozen(self) -> set[str]:
        return set()

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None):
        self.weight = weight
        self.bias = bias

    def params(self):
        p = {"weight": (self.weight, "weight")}
        if self.bias is not None:
            p["bias"] = (self.bias, "bias")
        return p

    def forward(self, x, train):
        return linear_forward(x, self.weight, self.bias)

    def backward(self, cache, dy):
        dx, dw, db = linear_backward(cache, dy)
        grads = {"weight": dw}
        if self.bias is not None:
            grads["bias"] = db
        return dx, grads


def linear_forward(x, w, b=None):
    """``Y = X W^T + b``; returns ``(Y, cache)``."""
    x = as_tensor(x)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, (x, w)


def linear_backward(cache, dy):
    x, w = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, weight, bias, stride=1, padding=0):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def params(self):
        p = {"weight": (self.weight, "weight")}
        if self.bias is not None:
            p["bias"] = (self.bias, "bias")
        return p

    def forward(self, x, train):
        return conv2d_forward(x, self.weight, self.bias, self.stride, self.padding)

    def backward(self, cache, dy):
        dx, dw, db = conv2d_backward(cache, dy)
        grads = {"weight": dw}
        if self.bias is not None:
            grads["bias"] = db
        return dx, grads


def _im2col(x, k, stride, padding):
    """Columns shaped ``(C*k*k, N*Ho*Wo)``, channel-major.

    Rows are ordered (c, ki, kj) to match ``W.reshape(O, -1)``; columns
    are ordered (n, i, j).
    """
    xt = x.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    c, n = xt.shape[:2]
    win = sliding_window_view(xt, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


def conv2d_forward(x, w, b=None, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x (N,C,H,W)`` with ``w (O,C,k,k)`` via im2col."""
    x = as_tensor(x)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k or stride < 1:
        raise ValueError(f"conv2d: geometry k={k} s={stride} p={padding} invalid for {x.shape}")
    n, o = x.shape[0], w.shape[0]
    cols, ho, wo = _im2col(x, k, stride, padding)
    y = w.reshape(o, -1) @ cols
    if b is not None:
        y += b[:, None]
    y = np.ascontiguousarray(y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    return y, (x.shape, cols, w, stride, padding, ho, wo)


def conv2d_backward(cache, dy):
    x_shape, cols, w, stride, padding, ho, wo = cache
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    dy2 = dy.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1)
    dcols = (w.reshape(o, -1).T @ dy2).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3)), dw, db


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        return relu_forward(x)

    def backward(self, cache, dy):
        return relu_backward(cache, dy), {}


def relu_forward(x):
    x = as_tensor(x)
    mask = x > 0
    return np.maximum(x, 0.0), mask


def relu_backward(mask, dy):
    # gradient at exactly 0 is taken as 0
    return dy * mask


class GAP(Layer):
    kind = "gap"

    def forward(self, x, train):
        return gap_forward(x)

    def backward(self, cache, dy):
        return gap_backward(cache, dy), {}


def gap_forward(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"gap expects (N, C, H, W), got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(x_shape, dy):
    h, w = x_shape[2:]
    return np.broadcast_to((dy / (h * w))[:, :, None, None], x_shape).copy()


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), {}


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, state: bn.BatchNormState):
        self.state = state

    def params(self):
        return self.state.parameters()

    def frozen(self):
        return {"beta"} if self.state.beta_frozen else set()

    def forward(self, x, train):
        if train:
            return bn.bn_forward_train(x, self.state)
        return bn.bn_forward_eval(x, self.state), None

    def backward(self, cache, dy):
        return bn.bn_backward_variant(cache, self.state, dy)


class Network:
    """Ordered layers plus a registry of named, role-tagged parameters."""

    def __init__(self, specs: Sequence[LayerSpec], layers: Sequence[Layer],
                 input_shape: Sequence[int]):
        self.specs = list(specs)
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)

    @property
    def params(self) -> dict[str, tuple[np.ndarray, str]]:
        reg = {}
        for i, layer in enumerate(self.layers):
            for name, entry in layer.params().items():
                reg[f"{i}.{name}"] = entry
        return reg

    @property
    def frozen(self) -> set[str]:
        return {f"{i}.{name}" for i, layer in enumerate(self.layers) for name in layer.frozen()}

    def bn_layers(self) -> list[tuple[int, BatchNorm]]:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and BN running statistic."""
        sd = {f"param/{k}": a.copy() for k, (a, _) in self.params.items()}
        for i, layer in self.bn_layers():
            st = layer.state
            sd[f"running_mean/{i}"] = st.running_mean.copy()
            sd[f"running_var/{i}"] = st.running_var.copy()
            sd[f"stats_ready/{i}"] = np.array(st.stats_ready)
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        params = self.params
        expected = {f"param/{k}" for k in params}
        missing = expected - set(sd)
        if missing:
            raise ValueError(f"state dict lacks {sorted(missing)}")
        for k, (a, _) in params.items():
            src = sd[f"param/{k}"]
            if src.shape != a.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {a.shape}")
            a[...] = src
        for i, layer in self.bn_layers():
            st = layer.state
            st.running_mean = np.array(sd[f"running_mean/{i}"], dtype=DTYPE)
            st.running_var = np.array(sd[f"running_var/{i}"], dtype=DTYPE)
            st.stats_ready = bool(sd[f"stats_ready/{i}"])


def _make_layer(spec: LayerSpec, rng: np.random.Generator | None, gamma_init: float,
                variant: str, bn_eps: float, bn_momentum: float) -> Layer:
    def zeros(*shape):
        return np.zeros(shape, dtype=DTYPE)

    if spec.kind == "linear":
        shape = (spec.out_features, spec.in_features)
        w = uniform_fanin_init(shape, rng) if rng is not None else zeros(*shape)
        return Linear(w, zeros(spec.out_features) if spec.bias else None)
    if spec.kind == "conv2d":
        k = spec.kernel_size
        shape = (spec.out_channels, spec.in_channels, k, k)
        w = kaiming_fanin_init(shape, spec.gain, rng) if rng is not None else zeros(*shape)
        return Conv2d(w, zeros(spec.out_channels) if spec.bias else None,
                      spec.stride, spec.padding)
    if spec.kind == "batchnorm":
        if spec.input_norm:
            st = bn.make_input_norm_bn(spec.channels, gamma_init, eps=bn_eps, momentum=bn_momentum)
        else:
            st = bn.make_bn_state(spec.channels, gamma_init, spec.variant or variant,
                                  eps=bn_eps, momentum=bn_momentum)
        return BatchNorm(st)
    return {"relu": ReLU, "gap": GAP, "flatten": Flatten}[spec.kind]()


def build_network(specs: Sequence[LayerSpec], gamma_init: float, input_norm: str,
                  rng: np.random.Generator | None, input_shape: Sequence[int],
                  variant: str = "standard", bn_eps: float = bn.DEFAULT_EPS,
                  bn_momentum: float = bn.DEFAULT_MOMENTUM) -> Network:
    """Materialize ``specs`` into a network.

    Every BN gets gamma = gamma_init and beta = 0; conv weights are Kaiming
    fan-in normal, linear weights uniform fan-in, biases zero. With
    ``input_norm="bn"`` an input-norm BN (scale 0.58 * gamma_init, frozen
    beta) is prepended. ``rng=None`` leaves every weight at zero, which is
    what checkpoint loading wants.
    """
    if not 0 < gamma_init <= 1:
        raise ValueError(f"gamma_init must lie in (0, 1], got {gamma_init}")
    if input_norm not in INPUT_NORM_MODES:
        raise ValueError(f"input_norm must be one of {INPUT_NORM_MODES}, got {input_norm!r}")
    specs = list(specs)
    if input_norm == "bn" and not (specs and specs[0].input_norm):
        specs.insert(0, LayerSpec("batchnorm", channels=int(input_shape[0]), input_norm=True))
    infer_shapes(specs, input_shape)
    bn.Variant(variant)
    layers = [_make_layer(s, rng, gamma_init, variant, bn_eps, bn_momentum) for s in specs]
    return Network(specs, layers, input_shape)


def network_forward(net: Network, x: np.ndarray, mode: str = "train"):
    """Run all layers; returns ``(logits, caches)``.

    Train mode advances BN running statistics on every call.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = as_tensor(x)
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} != network input {net.input_shape}")
    train = mode == "train"
    if not train:
        for i, layer in net.bn_layers():
            if not layer.state.stats_ready:
                raise RuntimeError(f"BN layer {i} has no running statistics; train first")
    caches = []
    for layer in net.layers:
        x, cache = layer.forward(x, train)
        caches.append(cache)
    return check_finite(x, "logits"), caches


def network_backward(net: Network, caches, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate ``d_logits``; returns one gradient per registered parameter."""
    if len(caches) != len(net.layers):
        raise ValueError("caches do not match the network")
    grads = {}
    dy = as_tensor(d_logits)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, BatchNorm) and caches[i] is None:
            raise RuntimeError("backward needs train-mode caches")
        dy, g = layer.backward(caches[i], dy)
        for name, arr in g.items():
            grads[f"{i}.{name}"] = arr
    return grads


def save_checkpoint(net: Network, path: str | Path, meta: dict | None = None) -> None:
    """Write specs, parameters and running statistics to a ``.npz`` file.

    Arrays are stored as raw float64, so loading reproduces them bit for
    bit. A JSON header under the ``__meta__`` key records the format
    version, layer specs and per-BN scalar settings.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_shape": list(net.input_shape),
        "specs": [s.to_dict() for s in net.specs],
        "bn": {str(i): {"eps": l.state.eps, "momentum": l.state.momentum,
                        "variant": l.state.variant.value,
                        "beta_frozen": l.state.beta_frozen}
               for i, l in net.bn_layers()},
        "meta": meta or {},
    }
    arrays = net.state_dict()
    arrays["__meta__"] = np.array(json.dumps(header))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(network, meta)``."""
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(str(arrays.pop("__meta__")))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a bninit checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    specs = [LayerSpec.from_dict(d) for d in header["specs"]]
    input_shape = header["input_shape"]
    infer_shapes(specs, input_shape)
    layers = []
    for i, s in enumerate(specs):
        cfg = header["bn"].get(str(i), {})
        layer = _make_layer(s, None, 1.0, cfg.get("variant", "standard"),
                            cfg.get("eps", bn.DEFAULT_EPS),
                            cfg.get("momentum", bn.DEFAULT_MOMENTUM))
        if isinstance(layer, BatchNorm):
            layer.state.beta_frozen = cfg.get("beta_frozen", False)
        layers.append(layer)
    net = Network(specs, layers, input_shape)
    net.load_state_dict(arrays)
    return net, header["meta"]
