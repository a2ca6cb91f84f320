"""Training regimes, the staged fine-tuning pipeline and source-task pre-training.

A run takes a pre-trained network whose head was replaced and whose backbone
is frozen, then executes, timing each stage in wall-clock seconds and MACs:

1. learning-rate range test at the first curriculum resolution
2. head-only SGDR training, one phase per curriculum resolution
3. head-only CLRS then CMult training at full resolution
4. plain validation accuracy (sub-total)
5. re-training of all layers with discriminative per-group rates
6. test-time-augmented validation accuracy (total)
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .data import AugmentationPolicy, Dataset, augment, batch_iterator, num_batches, split, to_square
from .errors import ConfigError, ParameterError, PretrainError, RunError, StateError
from .functional import Mode, softmax, softmax_cross_entropy
from .metrics import eval_macs, training_step_macs
from .model import GROUPS, Model, ResNetConfig, build_resnet, replace_head, set_frozen
from .optim import LRSchedule, OptimizerState, discriminative_lrs, lr_at, lr_find, sgd_step
from .records import PhaseRecord, RunRecord
from .tensor import no_grad

log = logging.getLogger(__name__)

REGIME_KINDS = ("NoIncrease", "Gradual", "Stepwise")
DEFAULT_FRACTIONS = {
    "NoIncrease": (1.0,),
    "Gradual": (0.4, 0.6, 0.8, 1.0),
    "Stepwise": (0.4, 1.0),
}


@dataclass(frozen=True)
class RegimeConfig:
    kind: str
    max_resolution: int = 32
    size_fractions: tuple | None = None
    epochs: int = 8
    epochs_per_phase: tuple | None = None
    stepwise_final_epochs: int = 2
    batch_size: int = 32
    head_dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise ConfigError(f"unknown regime {self.kind!r}; choose from {REGIME_KINDS}")
        fractions = tuple(float(f) for f in (self.size_fractions or DEFAULT_FRACTIONS[self.kind]))
        object.__setattr__(self, "size_fractions", fractions)
        if any(not 0 < f <= 1 for f in fractions):
            raise ConfigError(f"size fractions must lie in (0, 1], got {fractions}")
        if fractions[-1] != 1.0:
            raise ConfigError(f"size fractions must end at 1.0, got {fractions}")
        if self.kind == "NoIncrease" and fractions != (1.0,):
            raise ConfigError("NoIncrease trains at full size only: size_fractions must be [1.0]")
        if self.kind == "Gradual" and any(a >= b for a, b in zip(fractions, fractions[1:])):
            raise ConfigError(f"Gradual size fractions must increase strictly, got {fractions}")
        if self.kind == "Stepwise" and (len(fractions) != 2 or fractions[0] >= 1):
            raise ConfigError(f"Stepwise needs exactly [f, 1.0] with f < 1, got {fractions}")
        if self.batch_size < 1 or self.max_resolution < 1:
            raise ConfigError("batch_size and max_resolution must be positive")
        if not 0.4 <= self.head_dropout <= 0.6:
            raise ConfigError("head_dropout must lie in [0.4, 0.6]")
        if self.epochs_per_phase is None:
            object.__setattr__(self, "epochs_per_phase", self._allocate())
        else:
            object.__setattr__(self, "epochs_per_phase", tuple(int(e) for e in self.epochs_per_phase))
            if len(self.epochs_per_phase) != len(fractions):
                raise ConfigError("epochs_per_phase must have one entry per size fraction")
            if sum(self.epochs_per_phase) != self.epochs:
                raise ConfigError(f"epochs_per_phase {self.epochs_per_phase} does not sum to epochs={self.epochs}")
        if min(self.epochs_per_phase) < 0:
            raise ConfigError("negative epoch count in epochs_per_phase")

    def _allocate(self):
        n = len(self.size_fractions)
        if self.kind == "Stepwise":
            final = min(self.stepwise_final_epochs, self.epochs)
            return (self.epochs - final, final)
        base, rem = divmod(self.epochs, n)
        return tuple([base] * (n - 1) + [base + rem])

    @property
    def total_epochs(self) -> int:
        return sum(self.epochs_per_phase)


def check_budget_parity(regimes) -> None:
    totals = {r.kind: r.total_epochs for r in regimes}
    if len(set(totals.values())) > 1:
        raise ConfigError(f"epoch budgets differ across regimes: {totals}")


def snap_even(x: float) -> int:
    return 2 * int(math.floor(x / 2 + 0.5))


def build_curriculum(regime: RegimeConfig, min_resolution: int = 8):
    """``[(resolution, epochs)]`` for each phase; resolutions snapped to even pixels."""
    phases = []
    for f, e in zip(regime.size_fractions, regime.epochs_per_phase):
        res = regime.max_resolution if f == 1.0 else snap_even(f * regime.max_resolution)
        if res < min_resolution:
            raise ConfigError(f"curriculum resolution {res}px is below the model minimum {min_resolution}px")
        phases.append((res, e))
    return phases


@dataclass(frozen=True)
class PipelineConfig:
    """Stage budgets and optimizer settings shared by all regimes of an experiment."""

    lr_find_steps: int = 50
    lr_find_lo: float = 1e-5
    lr_find_hi: float = 1.0
    sgdr_cycle_epochs: float = 1.0
    clrs_epochs: int = 1
    clrs_cycle_epochs: float = 0.5
    cmult_epochs: int = 2
    cmult_t_mult: float = 2.0
    cmult_cycles: int = 2
    rpl_epochs: int = 1
    discriminative_factor: float = 10.0
    tta_k: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_batch_size: int = 128
    flip_prob: float = 0.5
    zoom_max: float = 1.1
    distortion: float = 0.05

    @property
    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.flip_prob, (1.0, self.zoom_max), self.distortion)


def _mix(*parts) -> int:
    """Deterministic 63-bit seed from a tuple of ints and strings."""
    words = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> np.uint64(1))


# evaluation

def predict_proba(model: Model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(images[start:start + batch_size], Mode.EVAL)
            out.append(softmax(logits.data.astype(np.float64)))
    return np.concatenate(out)


def evaluate(model: Model, dataset: Dataset, resolution: int, batch_size: int = 128) -> float:
    """Fraction of validation images whose argmax prediction is correct."""
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    probs = predict_proba(model, dataset.square_images(resolution), batch_size)
    return float((probs.argmax(axis=1) == dataset.labels).mean())


def tta_probabilities(model: Model, dataset: Dataset, policy: AugmentationPolicy, k: int = 4,
                      resolution: int | None = None, seed: int = 0, batch_size: int = 128) -> np.ndarray:
    """Mean class probabilities over the plain image and ``k`` augmented variants."""
    resolution = resolution or dataset.max_resolution
    total = predict_proba(model, dataset.square_images(resolution), batch_size)
    for j in range(k):
        rng = np.random.default_rng(_mix(seed, "tta", j))
        variants = np.stack([to_square(augment(img, policy, rng), resolution) for img in dataset.images])
        total = total + predict_proba(model, variants, batch_size)
    return total / (k + 1)


def tta_evaluate(model: Model, dataset: Dataset, policy: AugmentationPolicy, k: int = 4,
                 resolution: int | None = None, seed: int = 0, batch_size: int = 128) -> float:
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    if k == 0 or policy.is_null:
        return evaluate(model, dataset, resolution or dataset.max_resolution, batch_size)
    probs = tta_probabilities(model, dataset, policy, k, resolution, seed, batch_size)
    return float((probs.argmax(axis=1) == dataset.labels).mean())


# training

class _Stage:
    """Times one pipeline stage and accumulates its MACs."""

    def __init__(self, record: RunRecord, name: str, stage: str, resolution: int, epochs: int = 0):
        self.phase = PhaseRecord(name, stage, int(resolution), int(epochs))
        record.phases.append(self.phase)

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self.phase

    def __exit__(self, *exc):
        self.phase.wall_seconds = time.perf_counter() - self._t0
        return False


def batch_loss(model, batch, rng):
    x, y = batch
    return softmax_cross_entropy(model.forward(x, Mode.TRAIN, rng), y)


def _train(model, data, resolution, epochs, schedule_kind, base_lr, state, policy, batch_size,
           seed, phase: PhaseRecord, cycle_epochs=1.0, t_mult=1.0, cycles=None):
    spe = num_batches(len(data), batch_size)
    total = epochs * spe
    if cycles:
        cycle_len = total / sum(t_mult ** i for i in range(cycles))
    else:
        cycle_len = max(cycle_epochs * spe, 1e-9)
    schedule = LRSchedule(schedule_kind, base_lr, total, cycle_len=cycle_len, t_mult=t_mult)
    rng = np.random.default_rng(_mix(seed, phase.name, "dropout"))
    step = 0
    for epoch in range(epochs):
        running, count = 0.0, 0
        for batch in batch_iterator(data, resolution, batch_size, _mix(seed, phase.name, epoch), policy):
            loss = batch_loss(model, batch, rng)
            value = float(loss.item())
            if not math.isfinite(value):
                raise RunError(f"non-finite loss in {phase.name} (epoch {epoch}, step {step}, "
                               f"lr {lr_at(schedule, step):.4g}, resolution {resolution})")
            model.zero_grad()
            loss.backward()
            sgd_step(model, state, lr_at(schedule, step))
            phase.mac_count += training_step_macs(model, resolution, len(batch[1]))
            running += value * len(batch[1])
            count += len(batch[1])
            step += 1
        phase.losses.append(running / count)
    phase.steps = step


def cycle_batches(data, resolution, batch_size, seed, policy):
    epoch = 0
    while True:
        yield from batch_iterator(data, resolution, batch_size, _mix(seed, "lr_find", epoch), policy)
        epoch += 1


def run_regime(model: Model, train: Dataset, val: Dataset, regime: RegimeConfig,
               pipeline: PipelineConfig = PipelineConfig(), dataset_name: str = "",
               checkpoint_sha256: str = "", time_unit: str = "mac") -> RunRecord:
    """Execute the full staged pipeline for one regime; returns a complete RunRecord."""
    if not (model.frozen["early"] and model.frozen["late"]) or model.frozen["head"]:
        raise StateError("run_regime expects a frozen backbone and a trainable head")
    if model.config.num_classes != train.num_classes:
        raise StateError("model head does not match the target class count; call replace_head first")
    curriculum = build_curriculum(regime, model.min_resolution)
    full = regime.max_resolution
    policy = pipeline.policy
    bs, seed = regime.batch_size, regime.seed
    record = RunRecord(regime.kind, model.config.variant, seed, dataset_name, time_unit,
                       checkpoint_sha256=checkpoint_sha256)

    def new_state(multipliers=None):
        return OptimizerState(pipeline.momentum, pipeline.weight_decay,
                              dict(multipliers or {g: 1.0 for g in GROUPS}))

    first_res = curriculum[0][0]
    with _Stage(record, "lr_find", "lr_find", first_res) as phase:
        dropout_rng = np.random.default_rng(_mix(seed, "lr_find", "dropout"))
        result = lr_find(model, cycle_batches(train, first_res, bs, seed, policy),
                         lambda m, b: batch_loss(m, b, dropout_rng),
                         pipeline.lr_find_lo, pipeline.lr_find_hi, pipeline.lr_find_steps,
                         momentum=pipeline.momentum, weight_decay=pipeline.weight_decay)
        phase.steps = len(result.lr_grid)
        phase.losses = [float(v) for v in result.smoothed_losses]
        phase.mac_count = phase.steps * training_step_macs(model, first_res, bs)
        record.base_lr = result.suggested_lr
    base_lr = record.base_lr
    log.info("%s/%s seed %d: base lr %.4g", regime.kind, model.config.variant, seed, base_lr)

    stages = [(f"sgdr-{i + 1}", "SGDR", res, ep, {"cycle_epochs": pipeline.sgdr_cycle_epochs})
              for i, (res, ep) in enumerate(curriculum)]
    stages.append(("clrs", "CLRS", full, pipeline.clrs_epochs, {"cycle_epochs": pipeline.clrs_cycle_epochs}))
    stages.append(("cmult", "CMult", full, pipeline.cmult_epochs,
                   {"t_mult": pipeline.cmult_t_mult, "cycles": pipeline.cmult_cycles}))
    for name, kind, res, epochs, kw in stages:
        with _Stage(record, name, kind, res, epochs) as phase:
            if epochs == 0:
                phase.skipped = True
                continue
            _train(model, train, res, epochs, kind, base_lr, new_state(), policy, bs, seed, phase, **kw)

    with _Stage(record, "eval-subtotal", "eval", full) as phase:
        record.subtotal_accuracy = evaluate(model, val, full, pipeline.eval_batch_size)
        phase.mac_count = eval_macs(model, full, len(val))
    record.subtotal_after_phase = len(record.phases) - 1

    set_frozen(model, GROUPS, False)
    with _Stage(record, "rpl", "RPL", full, pipeline.rpl_epochs) as phase:
        if pipeline.rpl_epochs == 0:
            phase.skipped = True
        else:
            mult = discriminative_lrs(base_lr, pipeline.discriminative_factor)
            _train(model, train, full, pipeline.rpl_epochs, "SGDR", base_lr, new_state(mult), policy,
                   bs, seed, phase, cycle_epochs=pipeline.sgdr_cycle_epochs)

    with _Stage(record, "eval-tta", "TTA", full) as phase:
        record.total_accuracy = tta_evaluate(model, val, policy, pipeline.tta_k, full, seed,
                                             pipeline.eval_batch_size)
        phase.mac_count = eval_macs(model, full, len(val)) * (pipeline.tta_k + 1)

    record.mac_total = sum(p.mac_count for p in record.phases)
    record.wall_seconds = sum(p.wall_seconds for p in record.phases)
    return record


# pre-training on a source task

@dataclass
class PretrainResult:
    model: Model
    source_accuracy: float
    chance: float
    losses: list = field(default_factory=list)


def pretrain_source(config: ResNetConfig, source: Dataset, epochs: int = 4, seed: int = 0,
                    lr: float = 0.05, batch_size: int = 32, resolution: int | None = None,
                    pipeline: PipelineConfig = PipelineConfig()) -> PretrainResult:
    """Train a fresh network on the source task; fails if it does not beat chance by 5 points."""
    config = replace(config, num_classes=source.num_classes)
    model = build_resnet(config, seed)
    resolution = resolution or source.max_resolution
    train, val = split(source, 0.9, seed)
    phase = PhaseRecord("pretrain", "pretrain", resolution, epochs)
    _train(model, train, resolution, epochs, "SGDR", lr, OptimizerState(pipeline.momentum, pipeline.weight_decay),
           pipeline.policy, batch_size, _mix(seed, "pretrain"), phase, cycle_epochs=epochs)
    acc = evaluate(model, val, resolution)
    chance = 1.0 / source.num_classes
    if acc <= chance + 0.05:
        raise PretrainError(f"source accuracy {acc:.3f} does not exceed chance {chance:.3f} + 0.05")
    return PretrainResult(model, acc, chance, phase.losses)


def prepare_for_target(model: Model, num_classes: int, seed: int = 0, head_dropout: float | None = None) -> Model:
    """Replace the head for the target task and freeze the backbone."""
    replace_head(model, num_classes, seed)
    if head_dropout is not None:
        model.config = replace(model.config, head_dropout=head_dropout)
    set_frozen(model, ("early", "late"), True)
    set_frozen(model, ("head",), False)
    return model
