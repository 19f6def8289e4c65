"""Multi-seed sweeps, JSON-lines persistence and comparison reports.

Each run is stored as one JSON object per line in ``<results>/<label>.jsonl``
(fields of :class:`RunResult` plus a ``version`` key). Floats are written
with ``repr`` precision, so reading a record back gives the exact numbers
that were produced.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..stats import RunSet, TTestResult, md5_seed, one_sided_paired_ttest, summarize
from .config import ExperimentConfig
from .training import RunResult, run_experiment

log = logging.getLogger(__name__)

RESULTS_ENV = "BNINIT_RESULTS_DIR"


def results_dir(path: str | Path | None = None) -> Path:
    return Path(path or os.environ.get(RESULTS_ENV, "results"))


def sweep_seeds(cfg: ExperimentConfig, num_seeds: int | None = None) -> list[tuple[int, int]]:
    """``(seed_index, seed)`` pairs: explicit seeds, else md5_seed(1..n)."""
    if cfg.seeds:
        return list(enumerate(cfg.seeds, start=1))
    n = cfg.num_seeds if num_seeds is None else num_seeds
    if n < 2:
        raise ValueError(f"a sweep needs at least 2 seeds for the paired test, got {n}")
    return [(i, md5_seed(i)) for i in range(1, n + 1)]


def append_record(path: str | Path, result: RunResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(result.to_json() + "\n")


def read_records(paths: Iterable[str | Path]) -> list[RunResult]:
    out = []
    for path in paths:
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    out.append(RunResult.from_record(json.loads(line)))
    return out


def _run_one(cfg_dict: dict, index: int, seed: int) -> RunResult:
    return run_experiment(ExperimentConfig(**cfg_dict), seed, seed_index=index)


def run_sweep(cfg: ExperimentConfig, num_seeds: int | None = None, workers: int = 1,
              out_dir: str | Path | None = None) -> RunSet:
    """Train one network per seed and collect test accuracies in seed order.

    With ``out_dir`` each finished run is appended to ``<out_dir>/<label>.jsonl``
    (the file is truncated first), so a failed sweep leaves its completed
    runs on disk. Runs are independent, so ``workers > 1`` executes them in
    separate processes without changing any result.
    """
    pairs = sweep_seeds(cfg, num_seeds)
    path = None
    if out_dir is not None:
        path = Path(out_dir) / f"{cfg.label}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("")
    results: dict[int, RunResult] = {}

    def done(res: RunResult):
        results[res.seed_index] = res
        if path is not None:
            append_record(path, res)
        log.info("%s run %d/%d: test %.2f%% (best val epoch %d, %.0fs)", cfg.label,
                 res.seed_index, len(pairs), res.test_accuracy, res.best_val_epoch, res.seconds)

    if workers <= 1:
        for index, seed in pairs:
            done(run_experiment(cfg, seed, seed_index=index))
    else:
        cfg_dict = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_one, cfg_dict, i, s): i for i, s in pairs}
            try:
                for fut in as_completed(futures):
                    done(fut.result())
            except BaseException:
                for f in futures:
                    f.cancel()
                raise
    ordered = [results[i] for i, _ in pairs]
    return runset_from_results(cfg.label, ordered)


def runset_from_results(label: str, results: Sequence[RunResult]) -> RunSet:
    ordered = sorted(results, key=lambda r: (r.seed_index is None, r.seed_index))
    return RunSet(label, [r.seed for r in ordered], [r.test_accuracy for r in ordered])


def load_runsets(paths: Iterable[str | Path]) -> dict[str, RunSet]:
    """Group persisted runs by label; a later record for a seed index wins."""
    by_label: dict[str, dict] = {}
    for r in read_records(paths):
        by_label.setdefault(r.label, {})[(r.seed_index, r.seed)] = r
    return {label: runset_from_results(label, list(d.values())) for label, d in by_label.items()}


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


@dataclass
class ComparisonRow:
    label: str
    mean: float
    std: float
    n: int
    ttest: TTestResult | None
    significant: bool
    best_mean: bool


@dataclass
class ComparisonReport:
    baseline: str
    rows: list[ComparisonRow]

    def records(self) -> list[dict]:
        """One dict per row; infinite t statistics become ``"inf"``/``"-inf"``."""
        return [_json_safe(asdict(r) | {"baseline": self.baseline}) for r in self.rows]

    def to_json(self) -> str:
        return json.dumps(self.records(), indent=2, allow_nan=False)

    def table(self) -> str:
        """Plain-text table; ``*`` marks significance, ``^`` the best mean."""
        lines = [f"{'config':<16} {'mean':>8} {'std':>6} {'n':>3} {'t':>8} {'p':>8}  flags",
                 "-" * 62]
        for r in self.rows:
            t = f"{r.ttest.t_statistic:8.3f}" if r.ttest else f"{'-':>8}"
            p = f"{r.ttest.p_value:8.4f}" if r.ttest else f"{'-':>8}"
            flags = ("*" if r.significant else "") + ("^" if r.best_mean else "")
            lines.append(f"{r.label:<16} {r.mean:8.2f} {r.std:6.2f} {r.n:3d} {t} {p}  {flags}")
        lines.append(f"* significant improvement over {self.baseline} "
                     "(one-sided paired t-test, p <= 0.05); ^ highest mean")
        return "\n".join(lines)


def compare(candidates: Sequence[RunSet], baseline: RunSet) -> ComparisonReport:
    """Test every candidate against ``baseline``; flag exactly one best mean.

    The best-mean flag covers the baseline too (ties go to the first row,
    candidates before baseline).
    """
    rows = []
    for rs in list(candidates) + [baseline]:
        if len(rs) != len(baseline):
            raise ValueError(f"{rs.label} has {len(rs)} runs, baseline has {len(baseline)}")
        mean, std = summarize(rs)
        tt = one_sided_paired_ttest(rs, baseline) if rs is not baseline else None
        rows.append(ComparisonRow(rs.label, mean, std, len(rs), tt,
                                  bool(tt and tt.significant), False))
    best = max(range(len(rows)), key=lambda i: (rows[i].mean, -i))
    rows[best].best_mean = True
    return ComparisonReport(baseline.label, rows)
