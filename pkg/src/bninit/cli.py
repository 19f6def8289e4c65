"""Command-line entry point: ``bninit {train,sweep,compare,gradcheck,inspect}``.

Results go to ``$BNINIT_RESULTS_DIR`` (default ``./results``) unless
``--results-dir`` is given. Every subcommand exits with status 1 when a
checked invariant fails and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, nn
from .stats import md5_seed
from .tensor import make_rng
from .harness.config import ExperimentConfig, base_config, load_config
from .harness.sweep import (append_record, compare, load_runsets, results_dir, run_sweep)
from .harness.training import run_experiment, softmax_cross_entropy

# (flag, config key, type); dataset keys are nested under "dataset"
_CONFIG_FLAGS = [
    ("--label", "label", str),
    ("--gamma-init", "gamma_init", float),
    ("--c", "c", float),
    ("--base-lr", "base_lr", float),
    ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int),
    ("--momentum", "momentum", float),
    ("--weight-decay", "weight_decay", float),
    ("--input-norm", "input_norm", str),
    ("--affine-variant", "affine_variant", str),
    ("--architecture", "architecture", str),
    ("--val-fraction", "val_fraction", float),
    ("--bn-eps", "bn_eps", float),
    ("--bn-momentum", "bn_momentum", float),
    ("--max-batches", "max_batches", int),
    ("--num-seeds", "num_seeds", int),
]
_DATASET_FLAGS = [
    ("--dataset", "kind", str),
    ("--data-path", "path", str),
    ("--train-cap", "train_cap", int),
    ("--test-cap", "test_cap", int),
    ("--num-classes", "num_classes", int),
    ("--noise-std", "noise_std", float),
    ("--data-seed", "data_seed", int),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment config (overrides --config)")
    g.add_argument("--config", type=Path, help="YAML experiment config")
    for flag, key, typ in _CONFIG_FLAGS + _DATASET_FLAGS:
        g.add_argument(flag, dest=f"cfg_{key}", type=typ, default=None)
    g.add_argument("--image-shape", dest="cfg_image_shape", type=int, nargs="+", default=None)
    g.add_argument("--no-augment", dest="cfg_augment", action="store_false", default=None)
    g.add_argument("--seeds", dest="cfg_seeds", type=int, nargs="+", default=None,
                   help="explicit seed list instead of md5_seed(1..n)")
    p.add_argument("--results-dir", type=Path, default=None)


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    ds_keys = {key for _, key, _ in _DATASET_FLAGS} | {"image_shape"}
    changes, ds_changes = {}, {}
    for name, value in vars(args).items():
        if name.startswith("cfg_") and value is not None:
            key = name[4:]
            (ds_changes if key in ds_keys else changes)[key] = value
    if not (changes or ds_changes):
        return cfg
    return cfg.replace(dataset=ds_changes, **changes)


def _cmd_train(args) -> int:
    cfg = config_from_args(args)
    seed = args.seed if args.seed is not None else md5_seed(args.seed_index)
    index = None if args.seed is not None else args.seed_index
    res = run_experiment(cfg, seed, seed_index=index, checkpoint_path=args.checkpoint)
    out = results_dir(args.results_dir) / f"{cfg.label}.jsonl"
    append_record(out, res)
    print(res.to_json())
    return 0


def _cmd_sweep(args) -> int:
    cfg = config_from_args(args)
    configs = [cfg, base_config(cfg)] if args.with_base else [cfg]
    out = results_dir(args.results_dir)
    for c in configs:
        rs = run_sweep(c, workers=args.workers, out_dir=out)
        print(f"{rs.label}: n={len(rs)} mean={rs.mean:.2f} -> {out / (rs.label + '.jsonl')}")
    return 0


def _cmd_compare(args) -> int:
    directory = results_dir(args.results_dir)
    paths = args.files or sorted(directory.glob("*.jsonl"))
    if not paths:
        print(f"no result files in {directory}", file=sys.stderr)
        return 1
    runsets = load_runsets(paths)
    if args.baseline not in runsets:
        print(f"baseline {args.baseline!r} not found; have {sorted(runsets)}", file=sys.stderr)
        return 1
    labels = args.labels or sorted(k for k in runsets if k != args.baseline)
    missing = [lab for lab in labels if lab not in runsets]
    if missing:
        print(f"unknown labels: {missing}", file=sys.stderr)
        return 1
    try:
        report = compare([runsets[lab] for lab in labels], runsets[args.baseline])
    except ValueError as exc:
        print(f"compare failed: {exc}", file=sys.stderr)
        return 1
    print(report.to_json() if args.json else report.table())
    return 0


def _cmd_gradcheck(args) -> int:
    rng = make_rng(args.seed)
    ok = True
    summary = gradcheck.check_bn_cases(args.cases, rng)
    bn_ok = summary.passed(args.rel_tol, 1e-10)
    ok &= bn_ok
    print(f"{'PASS' if bn_ok else 'FAIL'} bn_backward x{summary.cases}: "
          f"dX {summary.max_rel_dx:.2e} dGamma {summary.max_rel_dgamma:.2e} "
          f"dBeta {summary.max_rel_dbeta:.2e} vs reference {summary.max_abs_reference:.2e}")

    def report(group, errors, tol):
        nonlocal ok
        for name, err in errors.items():
            passed = err <= tol
            ok &= passed
            print(f"{'PASS' if passed else 'FAIL'} {group} {name}: {err:.2e}")

    report("variant", gradcheck.check_variants(rng), args.rel_tol)
    report("layer", gradcheck.check_layers(rng), args.rel_tol)
    specs = [nn.conv2d(2, 4, 3, 1, 1), nn.batchnorm(4), nn.relu(),
             nn.conv2d(4, 5, 3, 2, 1, bias=False), nn.batchnorm(5), nn.relu(),
             nn.gap(), nn.linear(5, 3)]
    net = nn.build_network(specs, 0.5, "bn", rng, (2, 6, 6))
    for _, layer in net.bn_layers():
        if not layer.state.beta_frozen:
            layer.state.beta[:] = rng.normal(size=layer.state.channels)
    x = rng.normal(size=(4, 2, 6, 6))
    labels = np.array([0, 1, 2, 1])
    report("network", gradcheck.check_network(net, x, labels, softmax_cross_entropy), 1e-4)
    return 0 if ok else 1


def _cmd_inspect(args) -> int:
    net, meta = nn.load_checkpoint(args.checkpoint)
    gamma_init = meta.get("config", {}).get("gamma_init")
    rows = []
    for i, layer in net.bn_layers():
        st = layer.state
        row = {"layer": i, "channels": st.channels, "variant": st.variant.value,
               "beta_frozen": st.beta_frozen}
        for name in ("gamma", "beta"):
            v = getattr(st, name)
            row[name] = {"mean": float(v.mean()), "std": float(v.std()),
                         "min": float(v.min()), "max": float(v.max())}
        rows.append(row)
    if args.json:
        print(json.dumps({"meta": meta, "batchnorm": rows}, indent=2))
        return 0
    print(f"checkpoint {args.checkpoint} label={meta.get('label')} seed={meta.get('seed')} "
          f"gamma_init={gamma_init}")
    print(f"{'layer':>5} {'C':>4}  {'gamma mean':>10} {'std':>8} {'min':>8} {'max':>8}"
          f"  {'beta mean':>10} {'std':>8}")
    for r in rows:
        g, b = r["gamma"], r["beta"]
        print(f"{r['layer']:>5} {r['channels']:>4}  {g['mean']:10.4f} {g['std']:8.4f} "
              f"{g['min']:8.4f} {g['max']:8.4f}  {b['mean']:10.4f} {b['std']:8.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bninit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one network and append its record")
    _add_config_flags(p)
    seed = p.add_mutually_exclusive_group()
    seed.add_argument("--seed", type=int, help="raw 64-bit seed")
    seed.add_argument("--seed-index", type=int, default=1, help="use md5_seed(index)")
    p.add_argument("--checkpoint", type=Path, help="save the best-validation network here")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="train one network per seed")
    _add_config_flags(p)
    p.add_argument("--workers", type=int, default=1, help="parallel processes")
    p.add_argument("--with-base", action="store_true",
                   help="also sweep the BASE config (gamma=1, c=1)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("compare", help="paired t-test report from stored results")
    p.add_argument("files", nargs="*", type=Path, help="JSONL files (default: results dir)")
    p.add_argument("--results-dir", type=Path, default=None)
    p.add_argument("--baseline", default="BASE")
    p.add_argument("--labels", nargs="+", help="candidate labels (default: all others)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--cases", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rel-tol", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("inspect", help="gamma/beta statistics of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
