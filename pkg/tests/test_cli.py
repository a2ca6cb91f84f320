import csv
import hashlib
import math
import re
import subprocess
import sys

import pytest

from entr.cli import main
from entr.errors import RunError
from entr.records import RunRecord

TINY = """
[experiment]
models = ["RN10", "RN18"]
regimes = ["NoIncrease", "Gradual", "Stepwise"]
seeds = [0, 1]

[dataset]
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


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def grid(config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    assert main(["experiment", "--config", str(config_file), "--out", str(out)]) == 0
    return out


def snapshot(directory, pattern="*"):
    return {p.name: p.read_bytes() for p in sorted(directory.glob(pattern)) if p.is_file()}


def test_grid_writes_every_record_and_manifest(grid):
    records = sorted(p.name for p in grid.glob("run-*.record"))
    assert len(records) == 12
    assert "run-RN18-Stepwise-1.record" in records
    assert (grid / "manifest.txt").exists() and (grid / "effective-config.toml").exists()


def test_manifest_lists_checkpoint_checksums(grid):
    lines = (grid / "manifest.txt").read_text().splitlines()
    ckpts = [line.split() for line in lines if line.startswith("checkpoint ")]
    assert len(ckpts) == 4
    for _, model, seed, sha, rel in ckpts:
        assert hashlib.sha256((grid / rel).read_bytes()).hexdigest() == sha
        for regime in ("NoIncrease", "Gradual", "Stepwise"):
            rec = RunRecord.load(grid / f"run-{model}-{regime}-{seed}.record")
            assert rec.checkpoint_sha256 == sha
    assert sum(line.startswith("cell ") and " ok " in line for line in lines) == 12


def test_resume_recomputes_only_missing_cell(grid, config_file):
    victim = grid / "run-RN10-Gradual-1.record"
    before = victim.read_text()
    others = {p: p.stat().st_mtime_ns for p in grid.glob("run-*.record") if p != victim}
    manifest = (grid / "manifest.txt").read_bytes()
    victim.unlink()
    assert main(["experiment", "--config", str(config_file), "--out", str(grid)]) == 0
    assert victim.exists()
    assert all(p.stat().st_mtime_ns == t for p, t in others.items())
    again = RunRecord.from_json(victim.read_text())
    assert again.deterministic_view() == RunRecord.from_json(before).deterministic_view()
    assert (grid / "manifest.txt").read_bytes() == manifest


def test_report_outputs(grid, tmp_path):
    out = tmp_path / "rep"
    assert main(["report", str(grid), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "report.csv").open()))
    assert len(rows) == 12
    for r in rows:
        assert float(r["A_s_total"]) == pytest.approx(math.sqrt(float(r["A_total"]) / float(r["T"])), abs=1e-9)
        assert float(r["A_s_subtotal"]) == pytest.approx(math.sqrt(float(r["A_subtotal"]) / float(r["T"])), abs=1e-9)
    first = snapshot(out)
    assert set(first) >= {"report.csv", "report.txt", "fig4.svg", "fig5.svg"}
    assert main(["report", str(grid), "--out", str(out)]) == 0
    assert snapshot(out) == first
    # six (model, regime) cells per panel, two panels per figure
    assert first["fig4.svg"].count(b"<title>") == 12


def test_report_single_record_one_bar_per_panel(grid, tmp_path):
    src = tmp_path / "one"
    src.mkdir()
    (src / "run-RN10-Gradual-0.record").write_bytes((grid / "run-RN10-Gradual-0.record").read_bytes())
    assert main(["report", str(src)]) == 0
    for fig in ("fig4.svg", "fig5.svg"):
        svg = (src / fig).read_text()
        panels = svg.split('<g transform="translate(')[1:]
        assert len(panels) == 2
        assert all(p.count("<title>") == 1 for p in panels)


def test_report_empty_directory(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "no valid run records" in capsys.readouterr().err


def test_failed_cell_marked_and_exit_code(config_file, tmp_path, monkeypatch):
    import entr.experiment as experiment

    real = experiment.run_regime

    def flaky(model, train, val, regime, *args, **kw):
        if regime.kind == "Stepwise":
            raise RunError("injected failure")
        return real(model, train, val, regime, *args, **kw)

    monkeypatch.setattr(experiment, "run_regime", flaky)
    text = TINY.replace('["RN10", "RN18"]', '["RN10"]').replace("[0, 1]", "[0]")
    cfg = tmp_path / "one.toml"
    cfg.write_text(text)
    assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2
    manifest = (tmp_path / "run" / "manifest.txt").read_text()
    assert re.search(r"cell RN10 Stepwise 0 failed .*injected failure", manifest)
    assert len(list((tmp_path / "run").glob("run-*.record"))) == 2


def test_pretrain_failure_fails_its_cells_only(config_file, tmp_path, monkeypatch):
    import entr.experiment as experiment
    from entr.errors import PretrainError

    real = experiment.pretrain_source

    def picky(config, *args, **kw):
        if config.variant == "RN18":
            raise PretrainError("injected")
        return real(config, *args, **kw)

    monkeypatch.setattr(experiment, "pretrain_source", picky)
    text = TINY.replace("[0, 1]", "[0]").replace('["NoIncrease", "Gradual", "Stepwise"]', '["NoIncrease"]')
    cfg = tmp_path / "two.toml"
    cfg.write_text(text)
    assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2
    manifest = (tmp_path / "run" / "manifest.txt").read_text()
    assert "cell RN10 NoIncrease 0 ok" in manifest
    assert "cell RN18 NoIncrease 0 failed" in manifest


def test_parallel_pool_matches_serial(grid, config_file, tmp_path):
    text = TINY.replace('["RN10", "RN18"]', '["RN10"]').replace("[0, 1]", "[0]")
    cfg = tmp_path / "par.toml"
    cfg.write_text(text)
    out = tmp_path / "par"
    assert main(["experiment", "--config", str(cfg), "--out", str(out), "--parallel", "2"]) == 0
    for regime in ("NoIncrease", "Gradual", "Stepwise"):
        name = f"run-RN10-{regime}-0.record"
        par = RunRecord.load(out / name).deterministic_view()
        assert par == RunRecord.load(grid / name).deterministic_view()


def test_synth_is_idempotent(config_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--config", str(config_file), "--out", str(a)]) == 0
    assert main(["synth", "--config", str(config_file), "--out", str(b)]) == 0
    files_a = sorted(p.relative_to(a) for p in a.rglob("*.png"))
    assert len(files_a) == 120
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files_a)


def test_lr_find_command(config_file, tmp_path, capsys):
    for name in ("x", "y"):
        assert main(["lr-find", "--config", str(config_file), "--out", str(tmp_path / name), "--seed", "3"]) == 0
    text = (tmp_path / "x" / "lrfind.csv").read_text()
    assert text == (tmp_path / "y" / "lrfind.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    assert 2 <= len(rows) <= 8
    lrs = [float(r["lr"]) for r in rows]
    suggested = float(capsys.readouterr().out.split()[-1])
    assert min(lrs) <= suggested <= max(lrs)


def test_train_single_cell(config_file, tmp_path):
    out = tmp_path / "cell"
    args = ["train", "--config", str(config_file), "--out", str(out), "--model", "RN10", "--regime", "Gradual",
            "--seed", "0"]
    assert main(args) == 0
    rec = RunRecord.load(out / "run-RN10-Gradual-0.record")
    assert rec.regime == "Gradual" and rec.seed == 0


def test_wall_time_unit(config_file, tmp_path):
    out = tmp_path / "wall"
    assert main(["train", "--config", str(config_file), "--out", str(out), "--time-unit", "wall"]) == 0
    assert RunRecord.load(out / "run-RN10-NoIncrease-0.record").time_unit == "wall"


def test_config_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment]\nmodles = ['RN10']\n")
    assert main(["experiment", "--config", str(bad)]) == 1
    assert "modles" in capsys.readouterr().err
    assert main(["experiment", "--config", str(tmp_path / "missing.toml")]) == 1


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as exc:
        main(["experiment", "--parallel", "many"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "entr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("lr-find", "train", "experiment", "report", "synth"):
        assert cmd in proc.stdout
