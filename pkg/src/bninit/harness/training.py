"""Single training run: data preparation, SGD loop, best-validation selection."""

from __future__ import annotations

import functools
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import nn
from ..optim import ScheduleState, build_param_groups, cosine_lr, sgd_step
from ..tensor import check_finite, make_rng
from .config import ExperimentConfig, config_hash
from .data import (Dataset, augment_hflip, class_balanced_subset, load_cifar10_dir,
                   normalize_input, offline_stats, split_validation, synth_dataset)

log = logging.getLogger(__name__)

EVAL_BATCH = 500
RECORD_VERSION = 1


@dataclass
class RunResult:
    label: str
    seed: int
    seed_index: int | None
    config_hash: str
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_val_epoch: int = -1
    test_accuracy: float = float("nan")
    seconds: float = 0.0

    def to_record(self) -> dict:
        return {"version": RECORD_VERSION, **asdict(self)}

    @classmethod
    def from_record(cls, rec: dict) -> "RunResult":
        rec = dict(rec)
        rec.pop("version", None)
        return cls(**rec)

    def to_json(self) -> str:
        return json.dumps(self.to_record())


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    m = len(labels)
    loss = -log_p[np.arange(m), labels].mean()
    d = np.exp(log_p)
    d[np.arange(m), labels] -= 1.0
    return float(loss), d / m


def accuracy(net: nn.Network, ds: Dataset, batch_size: int = EVAL_BATCH) -> float:
    """Percentage of ``ds`` classified correctly in eval mode."""
    if len(ds) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(ds), batch_size):
        logits, _ = nn.network_forward(net, ds.images[start:start + batch_size], "eval")
        correct += int((logits.argmax(axis=1) == ds.labels[start:start + batch_size]).sum())
    return 100.0 * correct / len(ds)


def build_specs(cfg: ExperimentConfig, num_classes: int, input_shape) -> list[nn.LayerSpec]:
    if cfg.architecture == "tiny_bn_net":
        return nn.tiny_bn_net(num_classes, in_channels=input_shape[0])
    if isinstance(cfg.architecture, str):
        raise ValueError(f"unknown architecture preset {cfg.architecture!r}")
    return list(cfg.architecture)


def _raw_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "cifar10_bin":
        if not d.path:
            raise ValueError("cifar10_bin dataset needs a path")
        train, test = load_cifar10_dir(d.path)
        return class_balanced_subset(train, d.train_cap), class_balanced_subset(test, d.test_cap)
    rng = make_rng(d.data_seed)
    class_seed = int(rng.integers(2**63))
    train_n = d.train_cap if d.train_cap is not None else 5000
    test_n = d.test_cap if d.test_cap is not None else 1000
    train = synth_dataset(d.num_classes, train_n // d.num_classes, d.image_shape, rng,
                          d.noise_std, class_rng=make_rng(class_seed))
    test = synth_dataset(d.num_classes, test_n // d.num_classes, d.image_shape, rng,
                         d.noise_std, class_rng=make_rng(class_seed))
    return train, test


@functools.lru_cache(maxsize=4)
def _prepared(cfg_json: str):
    cfg = ExperimentConfig(**json.loads(cfg_json))
    train_raw, test_raw = _raw_data(cfg)
    train_raw, val_raw = split_validation(train_raw, cfg.val_fraction,
                                          make_rng(cfg.dataset.data_seed + 1))
    stats = offline_stats(train_raw) if cfg.input_norm == "offline" else None
    return tuple(normalize_input(d, cfg.input_norm, stats) for d in (train_raw, val_raw, test_raw))


def prepare_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Normalized (train, val, test); independent of the run seed."""
    data_keys = {k: v for k, v in cfg.to_dict().items()
                 if k in ("dataset", "val_fraction", "input_norm")}
    return _prepared(json.dumps(data_keys, sort_keys=True))


def run_experiment(cfg: ExperimentConfig, seed: int, seed_index: int | None = None,
                   checkpoint_path=None) -> RunResult:
    """Train one network and report test accuracy at the best validation epoch.

    The seed drives weight init, shuffling and augmentation through three
    independent child streams; data and the validation split depend only on
    ``cfg.dataset.data_seed``.
    """
    t0 = time.perf_counter()
    train, val, test = prepare_data(cfg)
    init_ss, shuffle_ss, aug_ss = np.random.SeedSequence(seed).spawn(3)
    init_rng = np.random.Generator(np.random.PCG64(init_ss))
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    aug_rng = np.random.Generator(np.random.PCG64(aug_ss))

    input_shape = train.images.shape[1:]
    specs = build_specs(cfg, train.num_classes, input_shape)
    net = nn.build_network(specs, cfg.gamma_init, cfg.input_norm, init_rng, input_shape,
                           variant=cfg.affine_variant, bn_eps=cfg.bn_eps,
                           bn_momentum=cfg.bn_momentum)
    groups = build_param_groups(net, cfg.c, cfg.weight_decay)
    augment = cfg.augment and train.images.ndim == 4

    result = RunResult(cfg.label, int(seed), seed_index, config_hash(cfg))
    best_acc, best_state = -1.0, None
    n = len(train)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(ScheduleState(cfg.base_lr, cfg.epochs, epoch))
        order = shuffle_rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            if cfg.max_batches is not None and b >= cfg.max_batches:
                break
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # BN cannot train on a single example
            x = train.images[idx]
            if augment:
                x = augment_hflip(x, aug_rng)
            logits, caches = nn.network_forward(net, x, "train")
            loss, d_logits = softmax_cross_entropy(logits, train.labels[idx])
            check_finite(np.array(loss), f"loss at epoch {epoch}")
            grads = nn.network_backward(net, caches, d_logits)
            sgd_step(groups, grads, lr, cfg.momentum)
            losses.append(loss)
        result.train_loss.append(float(np.mean(losses)))
        val_acc = accuracy(net, val) if len(val) else accuracy(net, train)
        result.val_accuracy.append(val_acc)
        if val_acc > best_acc:
            best_acc, best_state = val_acc, net.state_dict()
            result.best_val_epoch = epoch
        log.info("%s seed=%d epoch=%d lr=%.5f loss=%.4f val=%.2f", cfg.label, seed, epoch,
                 lr, result.train_loss[-1], val_acc)

    net.load_state_dict(best_state)
    result.test_accuracy = accuracy(net, test)
    result.seconds = time.perf_counter() - t0
    if checkpoint_path is not None:
        nn.save_checkpoint(net, checkpoint_path, meta={
            "label": cfg.label, "seed": int(seed), "best_val_epoch": result.best_val_epoch,
            "config": cfg.to_dict()})
    return result
