"""Grid execution of (model x regime x seed) cells with a resumable on-disk layout.

Output directory layout::

    effective-config.toml              full config echo
    manifest.txt                       checkpoints and per-cell status
    checkpoints/pretrain-<model>-<seed>.ckpt
    run-<model>-<regime>-<seed>.record

A cell whose record file exists and parses is never recomputed.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig, echo_config
from .data import Dataset, load_image_folder, split
from .errors import EntrError
from .model import ResNetConfig, load_checkpoint, save_checkpoint
from .records import RunRecord
from .regimes import prepare_for_target, pretrain_source, run_regime
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# entr experiment manifest v1"


def record_name(model: str, regime: str, seed: int) -> str:
    return f"run-{model}-{regime}-{seed}.record"


def checkpoint_name(model: str, seed: int) -> str:
    return f"pretrain-{model}-{seed}.ckpt"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_datasets(config: ExperimentConfig):
    """``(target, source)`` datasets for an experiment config."""
    ds = config.dataset
    if ds.source == "folder":
        target = load_image_folder(ds.path, ds.max_resolution)
    else:
        target = generate_synthetic(ds.synthetic.spec(), ds.synthetic.target_seed)
    if config.pretrain.source_path:
        source = load_image_folder(config.pretrain.source_path, ds.max_resolution)
    else:
        spec = ds.synthetic.spec()
        if ds.source == "folder":
            spec = SyntheticSpec(spec.num_classes, spec.samples_per_class, ds.max_resolution,
                                 noise=spec.noise, color_jitter=spec.color_jitter,
                                 check_resolution=spec.check_resolution)
        source = generate_synthetic(spec, ds.synthetic.source_seed)
    return target, source


def dataset_name(config: ExperimentConfig) -> str:
    ds = config.dataset
    if ds.name:
        return ds.name
    return Path(ds.path).name if ds.source == "folder" else "synthetic"


@dataclass
class CellResult:
    model: str
    regime: str
    seed: int
    status: str
    record: RunRecord | None = None
    error: str = ""


@dataclass
class ExperimentResult:
    out_dir: Path
    cells: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)

    @property
    def failures(self):
        return [c for c in self.cells if c.status == "failed"]

    @property
    def records(self):
        return [c.record for c in self.cells if c.record is not None]


def _read_record(path: Path):
    if not path.exists():
        return None
    try:
        rec = RunRecord.load(path)
        rec.validate()
        return rec
    except (OSError, ValueError, TypeError, KeyError) as exc:
        log.warning("ignoring unreadable record %s: %s", path, exc)
        return None


# per-process cache so pool workers build the target dataset once
_TARGETS: dict = {}


def _run_cell(config: ExperimentConfig, ckpt_path: str, ckpt_sha: str, model_name: str,
              regime: str, seed: int, out_path: str):
    key = echo_config(config)
    if key not in _TARGETS:
        _TARGETS[key] = load_datasets(config)[0]
    return execute_cell(config, _TARGETS[key], ckpt_path, ckpt_sha, model_name, regime, seed, out_path)


def _valid_checkpoint(path: Path) -> bool:
    if not path.exists():
        return False
    try:
        load_checkpoint(path)
        return True
    except (EntrError, ValueError, OSError, KeyError):
        log.warning("discarding unreadable checkpoint %s", path)
        return False


def execute_cell(config, target: Dataset, ckpt_path, ckpt_sha, model_name, regime, seed, out_path):
    train, val = split(target, config.dataset.train_fraction, config.dataset.split_seed)
    model = load_checkpoint(ckpt_path)
    prepare_for_target(model, target.num_classes, seed, config.budget.head_dropout)
    record = run_regime(model, train, val, config.regime_config(regime, seed), config.pipeline,
                        dataset_name(config), ckpt_sha, config.time_unit)
    record.save(out_path)
    return record


def write_manifest(result: ExperimentResult, config: ExperimentConfig, target: Dataset) -> None:
    lines = [
        MANIFEST_HEADER,
        f"config_sha256 {hashlib.sha256(echo_config(config).encode()).hexdigest()}",
        f"dataset {dataset_name(config)} {target.checksum()}",
    ]
    for (model, seed), sha in sorted(result.checkpoints.items()):
        lines.append(f"checkpoint {model} {seed} {sha} checkpoints/{checkpoint_name(model, seed)}")
    for c in result.cells:
        line = f"cell {c.model} {c.regime} {c.seed} {c.status} {record_name(c.model, c.regime, c.seed)}"
        if c.error:
            line += " " + c.error.replace("\n", " ")
        lines.append(line)
    (result.out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def run_experiment(config: ExperimentConfig, out_dir=None, parallel: int | None = None) -> ExperimentResult:
    """Pre-train once per (model, seed), then run every missing grid cell."""
    out = Path(out_dir or config.output)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "effective-config.toml").write_text(echo_config(config))
    target, source = load_datasets(config)
    result = ExperimentResult(out)

    grid = [(m, r, s) for m in config.models for s in config.seeds for r in config.regimes]
    pending = []
    for m, r, s in grid:
        rec = _read_record(out / record_name(m, r, s))
        if rec is not None:
            log.info("cell %s/%s/%d already complete; skipping", m, r, s)
            result.cells.append(CellResult(m, r, s, "ok", rec))
        else:
            result.cells.append(CellResult(m, r, s, "pending"))
            pending.append((m, r, s))

    by_key = {(c.model, c.regime, c.seed): c for c in result.cells}
    ckpt_paths = {}
    for m in config.models:
        for s in config.seeds:
            path = out / "checkpoints" / checkpoint_name(m, s)
            needed = any(pm == m and ps == s for pm, _, ps in pending)
            if needed and not _valid_checkpoint(path):
                log.info("pre-training %s seed %d on the source task", m, s)
                try:
                    cfg = ResNetConfig.from_variant(m, source.num_classes, config.budget.head_dropout,
                                                    source.channels)
                    pre = pretrain_source(cfg, source, config.pretrain.epochs, s, config.pretrain.lr,
                                          config.budget.batch_size, config.dataset.max_resolution,
                                          config.pipeline)
                except EntrError as exc:
                    log.error("pre-training %s seed %d failed: %s", m, s, exc)
                    for pm, r, ps in pending:
                        if (pm, ps) == (m, s):
                            cell = by_key[(pm, r, ps)]
                            cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
                    continue
                save_checkpoint(pre.model, path)
            if path.exists():
                ckpt_paths[(m, s)] = path
                result.checkpoints[(m, s)] = sha256_file(path)
    pending = [(m, r, s) for m, r, s in pending if by_key[(m, r, s)].status == "pending"]

    workers = parallel or config.parallel
    jobs = [(m, r, s, str(ckpt_paths[(m, s)]), result.checkpoints[(m, s)], str(out / record_name(m, r, s)))
            for m, r, s in pending]
    if workers <= 1:
        for m, r, s, cp, sha, rp in jobs:
            cell = by_key[(m, r, s)]
            log.info("running %s/%s seed %d", m, r, s)
            try:
                cell.record = execute_cell(config, target, cp, sha, m, r, s, rp)
                cell.status = "ok"
            except EntrError as exc:
                cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
                log.error("cell %s/%s/%d failed: %s", m, r, s, exc)
            write_manifest(result, config, target)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_cell, config, cp, sha, m, r, s, rp): (m, r, s)
                       for m, r, s, cp, sha, rp in jobs}
            for fut, key in futures.items():
                cell = by_key[key]
                try:
                    cell.record = fut.result()
                    cell.status = "ok"
                except EntrError as exc:
                    cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
                # manifest has a single writer: this process
                write_manifest(result, config, target)
    write_manifest(result, config, target)
    return result
