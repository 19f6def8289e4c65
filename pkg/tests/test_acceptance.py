"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed in the pytest terminal summary (section
"acceptance criteria"). Criterion 10 needs the CIFAR-10 binary files; point
``BNINIT_CIFAR10_DIR`` at an extracted ``cifar-10-batches-bin`` directory.
"""

import hashlib
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from _chain import chain_probe
from _report import criterion
from bninit import batchnorm as bn
from bninit import nn
from bninit.gradcheck import check_bn_cases
from bninit.harness.config import ExperimentConfig, base_config
from bninit.harness.sweep import compare, run_sweep
from bninit.optim import ParamGroup, ScheduleState, build_param_groups, cosine_lr, sgd_step
from bninit.stats import RunSet, md5_seed, one_sided_paired_ttest, student_t_cdf
from bninit.tensor import make_rng

GAMMAS = (0.05, 0.1, 0.5, 1.0)
CIFAR_ENV = "BNINIT_CIFAR10_DIR"


@pytest.fixture(scope="module")
def bn_summary():
    t0 = time.perf_counter()
    summary = check_bn_cases(1000, make_rng(2024), max_m=16, max_c=8)
    return summary, time.perf_counter() - t0


def test_c01_gradient_correctness(bn_summary):
    with criterion(1, "BN backward vs finite differences, 1000 cases") as info:
        s, seconds = bn_summary
        info.append(f"max rel err dX {s.max_rel_dx:.1e} dGamma {s.max_rel_dgamma:.1e} "
                    f"dBeta {s.max_rel_dbeta:.1e}, {seconds:.1f}s")
        assert s.cases == 1000
        assert max(s.max_rel_dx, s.max_rel_dgamma, s.max_rel_dbeta) <= 1e-5
        assert seconds < 60


def test_c02_reduction_equivalence(bn_summary):
    with criterion(2, "reduced backward == composite reference, 1000 cases") as info:
        s, _ = bn_summary
        info.append(f"max abs diff {s.max_abs_reference:.1e}")
        assert s.max_abs_reference <= 1e-10


def test_c03_gamma_cancellation():
    with criterion(3, "second-BN gradient factor invariant to gamma") as info:
        t0 = time.perf_counter()
        factors = {g: chain_probe(g)[1] for g in GAMMAS}
        ref = factors[1.0]
        worst = max(np.abs(f / ref - 1).max() for f in factors.values())
        info.append(f"max per-channel spread {100 * worst:.2f}% (tol 5%), "
                    f"mean factor {ref.mean():.3f}")
        assert worst <= 0.05
        assert time.perf_counter() - t0 < 30


def test_c04_rectified_gaussian():
    with criterion(4, "rectified Gaussian std") as info:
        v = bn.rectified_gaussian_std(10**6, make_rng(4))
        analytic = math.sqrt(0.5 - 1 / (2 * math.pi))
        info.append(f"empirical {v:.5f}, analytic {analytic:.5f}")
        assert 0.578 <= v <= 0.590
        assert abs(v - analytic) < 5 * 0.42 / 1000  # five standard errors at n=10^6


def test_c05_variance_propagation():
    with criterion(5, "variance entering second BN = sigma_act^2 gamma^2 sum w^2") as info:
        worst = 0.0
        for g in GAMMAS:
            var, _, w = chain_probe(g)
            predicted = bn.SIGMA_ACT_RELU ** 2 * g ** 2 * (w ** 2).sum(axis=1)
            worst = max(worst, np.abs(var / predicted - 1).max())
        info.append(f"max per-channel deviation {100 * worst:.2f}% (tol 10%)")
        assert worst <= 0.10


def test_c06_statistics():
    with criterion(6, "Student-t CDF and paired t-test") as info:
        for t, df in ((2.920, 2), (1.812, 10), (1.761, 14)):
            assert abs(student_t_cdf(t, df) - 0.95) <= 1e-3
        res = one_sided_paired_ttest(RunSet("c", [1, 2, 3], [91.0, 92.0, 93.0]),
                                     RunSet("b", [1, 2, 3], [90.0, 90.0, 90.0]))
        info.append(f"t={res.t_statistic:.4f} p={res.p_value:.4f}")
        assert round(res.t_statistic, 4) == 3.4641
        assert abs(res.p_value - 0.0371) < 5e-5


def test_c07_optimizer():
    with criterion(7, "gamma lr reduction, decay exclusion, cosine endpoints") as info:
        rng = make_rng(7)
        c = 100.0
        worst = 0.0
        for grad in rng.normal(size=200):
            w1, wc = np.array([0.3]), np.array([0.3])
            g1 = ParamGroup("bn_gamma", 1.0, 0.0, {"p": w1}, {"p": np.zeros(1)})
            gc = ParamGroup("bn_gamma", c, 0.0, {"p": wc}, {"p": np.zeros(1)})
            sgd_step([g1], {"p": np.array([grad])}, 0.1, momentum=0.0)
            sgd_step([gc], {"p": np.array([grad])}, 0.1, momentum=0.0)
            worst = max(worst, abs((wc[0] - 0.3) - (w1[0] - 0.3) / c))
        assert worst <= 1e-15

        specs = [nn.conv2d(3, 4, 3, 1, 1), nn.batchnorm(4), nn.relu(), nn.gap(),
                 nn.linear(4, 2)]
        net = nn.build_network(specs, 0.1, "bn", make_rng(1), (3, 6, 6), variant="a2")
        for name, (arr, role) in net.params.items():
            if role != "weight" and name != "0.beta":
                arr[...] = rng.normal(size=arr.shape)
        before = {k: a.tobytes() for k, (a, _) in net.params.items()}
        groups = build_param_groups(net, c, weight_decay=1e-2)
        zeros = {k: np.zeros_like(a) for k, (a, _) in net.params.items()}
        for _ in range(50):
            sgd_step(groups, zeros, 0.1)
        for k, (a, role) in net.params.items():
            assert (a.tobytes() == before[k]) == (role != "weight"), k

        lr = [cosine_lr(ScheduleState(0.1, 20, t)) for t in (0, 10, 20)]
        info.append(f"1/c deviation {worst:.1e}; cosine {lr}")
        assert lr == [0.1, 0.05, 0.0]


def test_c08_input_norm_bn():
    with criterion(8, "input-norm BN output moments") as info:
        rng = make_rng(8)
        x = rng.standard_normal((128, 3, 32, 32)) + rng.normal(size=(1, 3, 1, 1))
        net = nn.build_network(nn.tiny_bn_net(10), 1.0, "bn", make_rng(0), (3, 32, 32))
        _, caches = nn.network_forward(net, x, "train")
        layer = net.layers[0]
        y = bn.affine_apply_variant(caches[0].x_hat, x, layer.state)[0]
        mean = y.mean(axis=(0, 2, 3))
        std = y.std(axis=(0, 2, 3))
        info.append(f"max |mean| {np.abs(mean).max():.1e}, std {np.round(std, 4).tolist()}")
        assert layer.state.beta_frozen
        assert np.abs(mean).max() <= 1e-6
        assert np.all(np.abs(std / 0.58 - 1) <= 0.05)


def test_c09_variant_scales():
    with criterion(9, "RBN/IEBN initial scales and minus-variant reduction") as info:
        rng = make_rng(9)
        x = rng.normal(0.5, 2.0, size=(6, 4, 5, 5))
        x_hat = bn.bn_forward_train(x, bn.make_bn_state(4))[1].x_hat
        scales = {}
        for v in ("rbn", "iebn", "rbn-", "iebn-"):
            _, s = bn.affine_apply_variant(x_hat, x, bn.make_bn_state(4, 1.0, v))
            scales[v] = np.unique(np.round(s, 3)).tolist()
        info.append(f"scales {scales}")
        assert scales["rbn"] == scales["rbn-"] == [0.731]
        assert scales["iebn"] == scales["iebn-"] == [0.269]
        for v in ("rbn-", "iebn-"):
            st = bn.make_bn_state(4, 0.6, v)
            st.w_b[:] = rng.normal(size=4)
            st.beta[:] = rng.normal(size=4)
            y, _ = bn.affine_apply_variant(x_hat, x, st)
            std = bn.make_bn_state(4, 0.6)
            std.beta[:] = st.beta
            ref = bn.affine_apply_variant(x_hat, x, std)[0]
            sig = 1 / (1 + np.exp(-st.w_b))
            expect = (ref - std.beta[None, :, None, None]) * sig[None, :, None, None] \
                + std.beta[None, :, None, None]
            assert np.abs(y - expect).max() <= 1e-12


def test_c10_desk_scale_training(tmp_path):
    with criterion(10, "CIFAR-10 5000/1000 TinyBNNet, 20 epochs x 5 seeds") as info:
        root = os.environ.get(CIFAR_ENV)
        if not root:
            raise FileNotFoundError(f"${CIFAR_ENV} is not set; CIFAR-10 binary data unavailable")
        t0 = time.perf_counter()
        ours = ExperimentConfig(
            label="ours", gamma_init=0.1, c=100,
            dataset=dict(kind="cifar10_bin", path=root, train_cap=5000, test_cap=1000),
            epochs=20, batch_size=128, num_seeds=5)
        workers = os.cpu_count() or 1
        rs_ours = run_sweep(ours, workers=workers, out_dir=tmp_path)
        rs_base = run_sweep(base_config(ours), workers=workers, out_dir=tmp_path)
        report = compare([rs_ours], rs_base)
        minutes = (time.perf_counter() - t0) / 60
        row = report.rows[0]
        info.append(f"ours {rs_ours.mean:.2f}% vs BASE {rs_base.mean:.2f}%, "
                    f"p={row.ttest.p_value:.3f}, {minutes:.1f} min on {workers} core(s); "
                    f"ours >= BASE: {rs_ours.mean >= rs_base.mean}")
        print(report.table())
        assert min(rs_ours.accuracies + rs_base.accuracies) > 40.0
        assert sum(r.best_mean for r in report.rows) == 1
        assert all(r.significant == (r.ttest is not None and r.ttest.p_value <= 0.05)
                   for r in report.rows)
        json.loads(report.to_json())
        assert minutes <= 30


_RUN_ONCE = """
import json, sys
from bninit.harness.config import ExperimentConfig
from bninit.harness.training import run_experiment
cfg = ExperimentConfig(**json.loads(sys.argv[1]))
rec = run_experiment(cfg, int(sys.argv[2])).to_record()
rec.pop("seconds")
print(json.dumps(rec))
"""


def test_c11_determinism():
    with criterion(11, "bit-exact reruns and stable md5 seeds") as info:
        cfg = ExperimentConfig(dataset=dict(image_shape=(3, 16, 16), train_cap=300,
                                            test_cap=100), epochs=2, batch_size=32)
        args = [sys.executable, "-c", _RUN_ONCE, json.dumps(cfg.to_dict()), str(md5_seed(3))]
        outs = [subprocess.run(args, capture_output=True, text=True, check=True).stdout
                for _ in range(2)]
        assert outs[0] == outs[1]
        seeds = [md5_seed(i) for i in range(1, 16)]
        assert len(set(seeds)) == 15
        assert seeds == [int(hashlib.md5(str(i).encode()).hexdigest()[:16], 16)
                         for i in range(1, 16)]
        # coreutils md5sum output, fixed here as a platform-independent oracle
        assert (seeds[0], seeds[1], seeds[14]) == (0xC4CA4238A0B92382, 0xC81E728D9D4C2F63,
                                                   0x9BF31C7FF062936A)
        info.append(f"{len(json.loads(outs[0]))} record fields identical across processes "
                    "(wall-clock seconds excluded)")
