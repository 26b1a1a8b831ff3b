"""Acceptance criteria 1-9, one PASS/FAIL line each.

The Split-MNIST runs (criteria 5-7) take roughly an hour on one CPU core.
Runs are cached for the session so criteria sharing them train once.
"""
import shutil
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from repulsive_replay import oracle
from repulsive_replay.autodiff import Tensor
from repulsive_replay.cli import main
from repulsive_replay.data import even_task_classes, split_by_class, synth_blobs
from repulsive_replay.evaluation import compare
from repulsive_replay.losses import LossWeights, kl_regularization
from repulsive_replay.model import LatentStats, ModelConfig
from repulsive_replay.replay import RepulsionConfig, repulsion_threshold, select_competing
from repulsive_replay.trainer import TrainConfig, load_checkpoint, run_sequence

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
FACTORS = (1, 2, 5, 10, 20, 50, 100)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    ACCEPTANCE_LINES.sort(key=lambda s: int(s.split()[1].rstrip(":")))


def test_criterion_1_gradient_oracle(capsys):
    start = time.perf_counter()
    worst = oracle.run_gradcheck(points=20, seed=0, h=1e-5)
    elapsed = time.perf_counter() - start
    start = time.perf_counter()
    code = main(["gradcheck"])
    cli_elapsed = time.perf_counter() - start
    capsys.readouterr()
    ok = (len(worst) == 5 and max(worst.values()) <= 1e-4 and code == 0
          and elapsed < 60 and cli_elapsed < 60)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(1, ok, f"max rel errors: {detail}; gradcheck exit {code} in {cli_elapsed:.2f}s")
    assert ok


def _mc_kl(mu, lv, rng, n=100_000):
    sigma = np.exp(lv / 2)
    z = mu + sigma * rng.standard_normal((n, mu.size))
    log_q = -0.5 * (((z - mu) / sigma) ** 2 + lv + np.log(2 * np.pi))
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi))
    return float(np.mean(np.sum(log_q - log_p, axis=1)))


def _kl(mu, lv):
    return kl_regularization(LatentStats(Tensor(np.atleast_2d(mu)), Tensor(np.atleast_2d(lv)))).item()


def test_criterion_2_kl():
    rng = np.random.default_rng(2)
    zero = _kl(np.zeros(5), np.zeros(5))
    one = _kl(np.ones(1), np.zeros(1))
    values = [_kl(rng.normal(0, rng.uniform(0, 3), (4, 6)), rng.uniform(-6, 4, (4, 6)) * rng.uniform(0, 1))
              for _ in range(1000)]
    rel = []
    for _ in range(10):
        mu, lv = rng.normal(0, 1, 4), rng.uniform(-1.5, 1.0, 4)
        exact = _kl(mu, lv)
        rel.append(abs(_mc_kl(mu, lv, rng) - exact) / exact)
    ok = zero == 0.0 and abs(one - 0.5) <= 1e-12 and min(values) >= 0 and max(rel) < 0.02
    record(2, ok, f"KL(0,0)={zero}, KL(1,0)={one!r}, min over 1000 random={min(values):.3g}, "
                  f"worst Monte-Carlo deviation {100 * max(rel):.2f}%")
    assert ok


def _probability_rows(rng, n):
    rows = []
    for i in range(n):
        k = int(rng.integers(2, 12))
        if i % 2:
            rows.append(rng.dirichlet(np.full(k, rng.uniform(0.1, 3))))
        else:
            logits = rng.normal(0, rng.uniform(0.5, 6), k)
            e = np.exp(logits - logits.max())
            rows.append(e / e.sum())
    return rows


def test_criterion_3_selector():
    rng = np.random.default_rng(3)
    violations = []
    for p in _probability_rows(rng, 1000):
        label = int(np.argmax(p))
        previous = set()
        for f in FACTORS:
            chosen = select_competing(p, f)
            thr = p[label] / f
            if label in chosen:
                violations.append(("label", p, f))
            if any(p[c] <= thr for c in chosen):
                violations.append(("strict", p, f))
            if any(p[c] > thr * (1 + 1e-12) for c in set(range(len(p))) - chosen - {label}):
                violations.append(("complete", p, f))
            if not previous <= chosen:
                violations.append(("monotone", p, f))
            previous = chosen
        if np.sum(p == p.max()) == 1 and select_competing(p, 1):
            violations.append(("f=1", p, 1))
    threshold = repulsion_threshold(0.6, 3)
    fig = select_competing([0.6, 0.25, 0.1, 0.05], 3)
    tie = select_competing([0.6, 0.2, 0.15, 0.05], 3)
    ok = not violations and threshold == pytest.approx(0.2, rel=1e-15, abs=0) and fig == {1} and tie == set()
    record(3, ok, f"{len(violations)} violations over 1000 rows x {len(FACTORS)} factors; "
                  f"0.6/3 -> threshold {threshold:.15g}, competing {sorted(fig)}, "
                  f"p=0.2 on the threshold excluded: {tie == set()}")
    assert ok


def test_criterion_8_comparison_arithmetic():
    c = compare(30.40, 35.20)
    implied_baseline = 100 * 3.20 / 15.30
    d = compare(implied_baseline, implied_baseline + 3.20)
    e = compare(20.92, 24.12)
    ok = (abs(c.absolute_change - 4.80) <= 0.01 and abs(c.relative_change - 15.79) <= 0.01
          and abs(d.relative_change - 15.30) <= 0.01 and abs(e.relative_change - 15.30) <= 0.01
          and abs(e.absolute_change - 3.20) <= 0.01)
    record(8, ok, f"compare(30.40, 35.20) = {c.formatted()}; 3.20/15.30 implies baseline "
                  f"{implied_baseline:.2f}, compare(20.92, 24.12) = {e.formatted()}")
    assert ok


# every TrainerState produced by an acceptance run, for criterion 7
_STATES: dict[str, object] = {}


def _split_synthetic():
    ds = synth_blobs(10, 100, 8, seed=11, noise=0.1, test_per_class=50)
    return split_by_class(ds, even_task_classes(10, 5))


def test_criterion_4_baseline_equivalence(tmp_path):
    tasks = _split_synthetic()
    mc = ModelConfig(64, 32, (256, 256), 10, (8, 8))
    zero = LossWeights(lambda_rr=0.0, lambda_ra=0.0)
    start = time.perf_counter()
    a = run_sequence(tasks, mc, TrainConfig(iterations_per_task=500, seed=0, variant="baseline"),
                     out_dir=tmp_path / "baseline")
    b = run_sequence(tasks, mc, TrainConfig(iterations_per_task=500, seed=0, variant="rr_ra",
                                            weights=zero), out_dir=tmp_path / "rr_ra")
    elapsed = time.perf_counter() - start
    _STATES["c4-baseline"], _STATES["c4-rr_ra-zero"] = a.state, b.state
    same = (tmp_path / "baseline" / "metrics.csv").read_bytes() == (tmp_path / "rr_ra" / "metrics.csv").read_bytes()
    ok = same and elapsed < 300
    record(4, ok, f"metric CSVs byte-identical: {same}; two 5x500-iteration runs in {elapsed:.0f}s")
    assert ok


def test_criterion_9_determinism_and_resume(tmp_path):
    tasks = _split_synthetic()
    mc = ModelConfig(64, 16, (64, 64), 10, (8, 8))
    cfg = TrainConfig(iterations_per_task=150, batch_size=64, seed=4, variant="rr_ra",
                      weights=LossWeights(lambda_rr=1e-3, lambda_ra=1e-3))
    first = run_sequence(tasks, mc, cfg, out_dir=tmp_path / "a")
    run_sequence(tasks, mc, cfg, out_dir=tmp_path / "b")
    _STATES["c9"] = first.state
    a, b, r = tmp_path / "a", tmp_path / "b", tmp_path / "resumed"
    same_metrics = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    # rebuild the directory as it stood after task 2, then resume from its checkpoint
    r.mkdir()
    for name in ("metrics.csv", "eval_history.csv"):
        lines = (a / name).read_text().splitlines(keepends=True)
        (r / name).write_text(lines[0] + "".join(ln for ln in lines[1:] if int(ln.split(",")[0]) < 2))
    shutil.copy(a / "checkpoint_task1.ckpt", r / "checkpoint_task1.ckpt")
    state = load_checkpoint(r / "checkpoint_task1.ckpt", expected=mc)
    resumed = run_sequence(tasks, mc, cfg, out_dir=r, resume=state)
    same_report = resumed.final_report == first.final_report
    same_files = all((a / n).read_bytes() == (r / n).read_bytes()
                     for n in ("metrics.csv", "eval_history.csv", "report.csv", "checkpoint.ckpt"))
    ok = same_metrics and same_report and same_files
    record(9, ok, f"same-seed metric CSVs identical: {same_metrics}; resume after task 2 "
                  f"reproduces final report: {same_report}, all artifacts byte-identical: {same_files}")
    assert ok


class _MnistRuns:
    def __init__(self, dataset):
        self.tasks = split_by_class(dataset, even_task_classes(10, 5))
        self.mc = ModelConfig(dataset.feature_count, 32, (256, 256), 10, dataset.image_shape)
        self.cache = {}

    def get(self, variant: str, seed: int, replay: bool = True):
        key = (variant, seed, replay)
        if key not in self.cache:
            cfg = TrainConfig(iterations_per_task=2000, batch_size=128, seed=seed, variant=variant,
                              replay=replay, weights=LossWeights(lambda_rr=1e-6, lambda_ra=1e-6),
                              repulsion=RepulsionConfig(20.0), log_every=100)
            result = run_sequence(self.tasks, self.mc, cfg)
            self.cache[key] = result
            _STATES[f"mnist-{variant}-s{seed}-replay{int(replay)}"] = result.state
        return self.cache[key]


@pytest.fixture(scope="module")
def mnist_runs(mnist):
    return _MnistRuns(mnist[0])


def _first_task_precision(report):
    vals = [p for p, t in zip(report.precision, report.first_seen_task) if t == 0]
    return float(np.mean(vals))


def test_criterion_5_forgetting_without_replay(mnist, mnist_runs):
    after_first, after_last = [], []
    for seed in SEEDS:
        result = mnist_runs.get("baseline", seed, replay=False)
        after_first.append(_first_task_precision(result.task_reports[0]))
        after_last.append(_first_task_precision(result.final_report))
    a, z = float(np.mean(after_first)), float(np.mean(after_last))
    ok = a > 85 and z < 20
    record(5, ok, f"[{mnist[1]}] first-task precision after task 1 {a:.2f}% "
                  f"(seeds {[round(v, 1) for v in after_first]}), after task 5 {z:.2f}% "
                  f"(seeds {[round(v, 1) for v in after_last]})")
    assert ok


def test_criterion_6_directional_benefit(mnist, mnist_runs):
    deltas = []
    for seed in SEEDS:
        base = mnist_runs.get("baseline", seed).final_report.first20
        rr = mnist_runs.get("rr_ra", seed).final_report.first20
        deltas.append(rr - base)
    wins = sum(d > 0 for d in deltas)
    mean = float(np.mean(deltas))
    ok = wins >= 2 and mean > 0
    rows = "; ".join(
        f"seed {s}: {mnist_runs.get('baseline', s).final_report.first20:.2f} -> "
        f"{mnist_runs.get('rr_ra', s).final_report.first20:.2f}" for s in SEEDS)
    record(6, ok, f"[{mnist[1]}] first-20% precision baseline -> rr_ra (f=20, lambda=1e-6): {rows}; "
                  f"wins {wins}/3, mean delta {mean:+.2f}")
    assert ok


def test_criterion_7_replay_only(mnist_runs):
    for seed in SEEDS:
        mnist_runs.get("baseline", seed, replay=False)
        mnist_runs.get("baseline", seed)
        mnist_runs.get("rr_ra", seed)
    current = sum(s.counters["rr_current"] + s.counters["ra_current"] for s in _STATES.values())
    generated = sum(s.counters["mean_updates_generated"] for s in _STATES.values())
    replayed = sum(s.counters["rr_replay"] + s.counters["ra_replay"] for s in _STATES.values())
    ok = current == 0 and generated == 0 and replayed > 0
    record(7, ok, f"{len(_STATES)} runs: RR/RA evaluations on current batches {current}, "
                  f"on replay batches {replayed}; class-mean updates from generated images {generated}")
    assert ok
