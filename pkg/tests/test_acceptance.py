"""Acceptance suite: one test per criterion, each attaching a one-line summary.

The terminal summary (see conftest.py) prints a PASS/FAIL line per criterion.
Criteria 6 to 9 share one full experiment run through a module-scoped
fixture. Run standalone with ``python3 tests/test_acceptance.py``.
"""

import csv
import itertools
import math
import shutil
import subprocess
import sys
import time
from pathlib import Path
from statistics import mean

import numpy as np
import pytest

from gradcheck import PRIMITIVES, max_relative_error

from entr import functional as F
from entr.config import ExperimentConfig
from entr.data import split
from entr.experiment import execute_cell, load_datasets, record_name, run_experiment
from entr.metrics import standardized_accuracy
from entr.model import ResNetConfig, build_resnet
from entr.optim import LRSchedule, discriminative_lrs, lr_at, restart_steps
from entr.records import RunRecord
from entr.regimes import PipelineConfig, RegimeConfig, prepare_for_target, run_regime
from entr.synthetic import SyntheticSpec, generate_synthetic
from entr.tensor import Tensor

pytestmark = pytest.mark.slow

MODELS = ("RN10", "RN18")
SEEDS = (0, 1, 2)
REGIMES = ("NoIncrease", "Gradual", "Stepwise")


def detail(record_property, text):
    record_property("detail", text)


# 1. gradients

def test_criterion_01_gradient_suite(record_property):
    start = time.perf_counter()
    worst = {name: max(max_relative_error(name, seed) for seed in range(20)) for name in PRIMITIVES}
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    detail(record_property, f"{len(worst)} primitives x 20 instances, worst rel err {err:.1e} ({name}), "
                            f"{elapsed:.1f}s")
    assert err < 1e-5
    assert elapsed < 60


# 2. convolution oracle

def conv_shapes():
    for h, w, k, c, f, stride, pad in itertools.product(range(1, 7), range(1, 7), range(1, 4), range(1, 4),
                                                        range(1, 4), (1, 2), (0, 1)):
        if k <= h + 2 * pad and k <= w + 2 * pad:
            yield h, w, k, c, f, stride, pad


def test_criterion_02_conv_oracle(record_property):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    count, worst_real = 0, 0.0
    for h, w, k, c, f, stride, pad in conv_shapes():
        n = 1 + count % 2
        # small integers keep every product and partial sum exact in float64,
        # so any summation order must agree bit for bit
        x = rng.integers(-5, 6, (n, c, h, w)).astype(np.float64)
        wt = rng.integers(-3, 4, (f, c, k, k)).astype(np.float64)
        b = rng.integers(-2, 3, f).astype(np.float64)
        got = F.conv2d(Tensor(x, dtype=np.float64), Tensor(wt, dtype=np.float64), Tensor(b, dtype=np.float64),
                       stride, pad).numpy()
        assert np.array_equal(got, F.conv2d_direct(x, wt, b, stride, pad)), (h, w, k, c, f, stride, pad)
        xr, wr = rng.standard_normal(x.shape), rng.standard_normal(wt.shape)
        real = F.conv2d(Tensor(xr, dtype=np.float64), Tensor(wr, dtype=np.float64), None, stride, pad).numpy()
        worst_real = max(worst_real, float(np.max(np.abs(real - F.conv2d_direct(xr, wr, None, stride, pad)))))
        count += 1
    elapsed = time.perf_counter() - start
    detail(record_property, f"{count} shapes exact on integer data, real-data max abs diff {worst_real:.1e}, "
                            f"{elapsed:.1f}s")
    assert worst_real < 1e-12
    assert elapsed < 60


# 3. schedules

def prefix_restarts(cycle_len, t_mult, total):
    # closed form: the i-th restart sits at c * (m^i - 1) / (m - 1), or c * i when m == 1
    out, i = [], 1
    while True:
        step = cycle_len * i if t_mult == 1 else cycle_len * (t_mult ** i - 1) // (t_mult - 1)
        if step >= total:
            return out
        out.append(step)
        i += 1


def test_criterion_03_schedule_formulas(record_property):
    worst = 0.0
    for eta_max, eta_min, total in [(0.1, 0.0, 10), (1.0, 1e-4, 7), (3e-3, 1e-5, 1000), (0.5, 0.25, 1)]:
        sched = LRSchedule("SGDR", eta_max, total, eta_min)
        worst = max(worst, abs(lr_at(sched, 0) - eta_max), abs(lr_at(sched, total) - eta_min))
    assert worst <= 1e-12
    checked = 0
    for t_mult in (1, 2, 3):
        for cycle_len in (1, 3, 5):
            total = cycle_len * (1 + t_mult + t_mult ** 2 + t_mult ** 3) + 1
            sched = LRSchedule("CMult", 1.0, total, cycle_len=cycle_len, t_mult=t_mult)
            assert restart_steps(sched) == prefix_restarts(cycle_len, t_mult, total)
            checked += 1
    for f in (2.0, 2.6, 10.0):
        assert discriminative_lrs(0.01, f) == {"early": 1 / f ** 2, "late": 1 / f, "head": 1.0}
    detail(record_property, f"endpoint err {worst:.1e}, {checked} CMult restart sequences, "
                            "multipliers exact")


# 4. standardized accuracy law

def test_criterion_04_standardized_accuracy_law(record_property):
    rng = np.random.default_rng(2024)
    n = 10_000
    a = rng.uniform(0, 1, n)
    t = 10 ** rng.uniform(-3, 3, n)
    c = 10 ** rng.uniform(-3, 3, n)
    worst = 0.0
    for ai, ti, ci in zip(a, t, c):
        base = standardized_accuracy(ai, ti)
        scaled = standardized_accuracy(ai, ti / ci)
        err = abs(scaled - math.sqrt(ci) * base) / max(scaled, 1e-300)
        worst = max(worst, err)
        # monotone: more accuracy in less time can never score lower
        a2, t2 = min(1.0, ai * (1 + ci / 10)), ti / (1 + ci)
        assert standardized_accuracy(a2, t2) >= base
        assert standardized_accuracy(ai, ti * (1 + ci)) <= base
    detail(record_property, f"{n} triples, worst relative scaling error {worst:.1e}")
    assert worst < 1e-12


# 5. degenerate regime

def test_criterion_05_degenerate_regime(record_property):
    start = time.perf_counter()
    target = generate_synthetic(SyntheticSpec(3, 60, 32), seed=11)
    train, val = split(target, 0.9, 0)
    records = {}
    for kind, fractions in (("NoIncrease", (1.0,)), ("Gradual", (1.0,))):
        model = build_resnet(ResNetConfig.from_variant("RN10", num_classes=3), seed=4)
        prepare_for_target(model, 3, seed=4)
        regime = RegimeConfig(kind, 32, fractions, epochs=4, batch_size=32, seed=4)
        records[kind] = run_regime(model, train, val, regime, PipelineConfig()).deterministic_view()
    a, b = records["NoIncrease"], records["Gradual"]
    ops = lambda v: (v["mac_total"], [(p["name"], p["resolution"], p["epochs"], p["mac_count"])
                                      for p in v["phases"]])
    elapsed = time.perf_counter() - start
    detail(record_property, f"mac_total {a['mac_total']} vs {b['mac_total']}, {elapsed:.0f}s")
    assert ops(a) == ops(b)
    a.pop("regime"), b.pop("regime")
    assert a == b
    assert elapsed < 120


# 6 to 9. the shared experiment

@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    config = ExperimentConfig(models=list(MODELS), seeds=list(SEEDS))
    out = tmp_path_factory.mktemp("entr")
    start = time.perf_counter()
    result = run_experiment(config, out)
    elapsed = time.perf_counter() - start
    assert not result.failures, [(c.model, c.regime, c.seed, c.error) for c in result.failures]
    records = {(r.model, r.regime, r.seed): r for r in result.records}
    return config, out, records, elapsed


def test_criterion_06_cost_claim(experiment, record_property):
    _, _, records, _ = experiment
    worst = {}
    for (model, regime, seed), rec in records.items():
        if regime == "NoIncrease":
            continue
        base = records[(model, "NoIncrease", seed)].mac_total
        cut = 1 - rec.mac_total / base
        worst[regime] = min(worst.get(regime, 1.0), cut)
    detail(record_property, "smallest MAC reduction " + ", ".join(f"{r} {v:.1%}" for r, v in sorted(worst.items())))
    assert worst["Gradual"] >= 0.25
    assert worst["Stepwise"] >= 0.25


def test_criterion_07_directional_reproduction(experiment, record_property):
    config, _, records, elapsed = experiment
    target, _ = load_datasets(config)
    assert target.num_classes >= 3 and len(target) >= 600
    assert config.dataset.max_resolution == 32
    # every cell of a (model, seed) pair starts from the same checkpoint
    for model in MODELS:
        for seed in SEEDS:
            assert len({records[(model, r, seed)].checkpoint_sha256 for r in REGIMES}) == 1
    summary, failures = [], []
    for model in MODELS:
        a_s = {r: mean(records[(model, r, s)].standardized()["total"] for s in SEEDS) for r in REGIMES}
        acc = {r: mean(records[(model, r, s)].total_accuracy for s in SEEDS) for r in REGIMES}
        summary.append(f"{model} A_s " + "/".join(f"{a_s[r]:.3f}" for r in REGIMES)
                       + " acc " + "/".join(f"{acc[r]:.3f}" for r in REGIMES))
        for r in ("Gradual", "Stepwise"):
            if not a_s[r] > a_s["NoIncrease"]:
                failures.append(f"{model} {r} A_s_total not above NoIncrease")
            if abs(acc[r] - acc["NoIncrease"]) > 0.05:
                failures.append(f"{model} {r} accuracy gap {acc[r] - acc['NoIncrease']:+.3f}")
    detail(record_property, "; ".join(summary) + f"; {elapsed / 60:.1f} min")
    assert not failures, failures
    assert elapsed < 15 * 60


def test_criterion_08_rpl_effect(experiment, record_property):
    _, _, records, _ = experiment
    held = sum(r.total_accuracy >= r.subtotal_accuracy for r in records.values())
    detail(record_property, f"total >= subtotal in {held}/{len(records)} runs")
    assert held * 3 >= 2 * len(records)


def test_criterion_09_determinism(experiment, tmp_path, record_property):
    config, out, records, _ = experiment
    model, regime, seed = "RN10", "Gradual", 0
    original = records[(model, regime, seed)]
    ckpt = out / "checkpoints" / f"pretrain-{model}-{seed}.ckpt"
    target, _ = load_datasets(config)
    again = execute_cell(config, target, ckpt, original.checkpoint_sha256, model, regime, seed,
                         tmp_path / record_name(model, regime, seed))
    detail(record_property, f"{model}/{regime}/{seed}: acc {again.subtotal_accuracy!r}/{again.total_accuracy!r}, "
                            f"macs {again.mac_total}")
    assert again.subtotal_accuracy == original.subtotal_accuracy
    assert again.total_accuracy == original.total_accuracy
    assert [p.mac_count for p in again.phases] == [p.mac_count for p in original.phases]
    assert again.deterministic_view() == original.deterministic_view()


# 10. command line round trip

CLI_CONFIG = """
[experiment]
models = ["RN10"]
regimes = ["NoIncrease", "Gradual", "Stepwise"]
seeds = [0]

[dataset]
source = "folder"
path = "{data}"
max_resolution = 16

[dataset.synthetic]
samples_per_class = 40
base_resolution = 16

[budget]
epochs = 2
stepwise_final_epochs = 1
batch_size = 16

[regimes.Gradual]
size_fractions = [0.5, 1.0]

[regimes.Stepwise]
size_fractions = [0.5, 1.0]

[pretrain]
epochs = 4

[pipeline]
lr_find_steps = 8
cmult_epochs = 1
cmult_cycles = 1
tta_k = 2
"""


def entr(*args):
    proc = subprocess.run([sys.executable, "-m", "entr", *args], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def cli_round(root: Path):
    if root.exists():
        shutil.rmtree(root)
    root.mkdir()
    data, run = root / "data", root / "run"
    cfg = root / "exp.toml"
    cfg.write_text(CLI_CONFIG.format(data=data))
    (root / "synth.toml").write_text(CLI_CONFIG.replace('source = "folder"', 'source = "synthetic"')
                                     .replace(f'path = "{{data}}"\n', ""))
    entr("synth", "--config", str(root / "synth.toml"), "--out", str(data))
    entr("experiment", "--config", str(cfg), "--out", str(run))
    entr("report", str(run))
    files = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        key = str(p.relative_to(root))
        if p.suffix == ".record":
            files[key] = RunRecord.load(p).deterministic_view()
        else:
            files[key] = p.read_bytes()
    return files


def test_criterion_10_cli_round_trip(tmp_path, record_property):
    root = tmp_path / "cli"
    first = cli_round(root)
    rows = list(csv.DictReader((root / "run" / "report.csv").open()))
    worst = 0.0
    for r in rows:
        for part in ("subtotal", "total"):
            expect = math.sqrt(float(r[f"A_{part}"]) / float(r["T"]))
            worst = max(worst, abs(float(r[f"A_s_{part}"]) - expect))
    second = cli_round(root)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    detail(record_property, f"{len(rows)} report rows, A_s recompute err {worst:.1e}, "
                            f"{len(first)} files compared, {len(differing)} differ")
    assert len(rows) == 3
    assert worst <= 1e-9
    assert not differing, differing


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
