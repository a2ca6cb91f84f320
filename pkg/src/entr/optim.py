"""SGD with momentum, warm-restart learning-rate schedules and the LR range test."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FinderError, ParameterError, StateError

SCHEDULE_KINDS = ("SGDR", "CLRS", "CMult", "Constant")


@dataclass(frozen=True)
class LRSchedule:
    """Piecewise cosine schedule with warm restarts.

    ``cycle_len`` is the length of the first cycle in optimizer steps. Only
    ``CMult`` grows later cycles by ``t_mult``; SGDR and CLRS keep every
    cycle at ``cycle_len``.
    """

    kind: str
    eta_max: float
    total_steps: int
    eta_min: float = 0.0
    cycle_len: float | None = None
    t_mult: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.eta_min < self.eta_max:
            raise ConfigError(f"need 0 <= eta_min < eta_max, got {self.eta_min}, {self.eta_max}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if self.cycle_len is None:
            object.__setattr__(self, "cycle_len", self.total_steps)
        if self.cycle_len <= 0:
            raise ConfigError("cycle_len must be positive")
        if self.t_mult < 1:
            raise ConfigError("t_mult must be >= 1")

    @property
    def growth(self) -> float:
        return self.t_mult if self.kind == "CMult" else 1.0

    def cycle_starts(self):
        """Start step of every cycle that begins before ``total_steps``."""
        starts, start, length = [], 0.0, float(self.cycle_len)
        while start < self.total_steps:
            starts.append(start)
            start += length
            length *= self.growth
        return starts

    def position(self, step):
        """``(t_cur, T_i)`` for ``step``; the closing point ``total_steps`` ends the last cycle."""
        start, length = 0.0, float(self.cycle_len)
        closing = step == self.total_steps
        while (start + length < step) if closing else (start + length <= step):
            start += length
            length *= self.growth
        return step - start, length


def cosine_annealing(t_cur, cycle_len, eta_max, eta_min=0.0):
    return eta_min + 0.5 * (eta_max - eta_min) * (1 + math.cos(math.pi * t_cur / cycle_len))


def lr_at(schedule: LRSchedule, step) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ParameterError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "Constant":
        return schedule.eta_max
    t_cur, length = schedule.position(step)
    return cosine_annealing(t_cur, length, schedule.eta_max, schedule.eta_min)


def restart_steps(schedule: LRSchedule):
    """Steps (>0) at which the rate jumps back to ``eta_max``."""
    return schedule.cycle_starts()[1:]


def discriminative_lrs(base_lr: float, factor: float = 10.0) -> dict:
    """Per-group multipliers decaying geometrically toward the early layers."""
    if base_lr <= 0:
        raise ParameterError("base_lr must be positive")
    if factor <= 1:
        raise ParameterError(f"factor must exceed 1, got {factor}")
    return {"early": 1.0 / factor ** 2, "late": 1.0 / factor, "head": 1.0}


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    multipliers: dict = field(default_factory=lambda: {"early": 1.0, "late": 1.0, "head": 1.0})
    velocity: dict = field(default_factory=dict)

    def effective_multiplier(self, model, group) -> float:
        if getattr(model, "frozen", {}).get(group, False):
            return 0.0
        return self.multipliers.get(group, 1.0)


def sgd_step(model, state: OptimizerState, base_lr: float, grads: dict | None = None) -> None:
    """Classical momentum: ``v = mu v + g + wd theta``; ``theta -= lr * multiplier * v``.

    ``grads`` maps parameter names to arrays; by default each parameter's
    ``.grad`` is used. Frozen groups are skipped entirely.
    """
    frozen = getattr(model, "frozen", {})
    for name, (group, p) in model.named_parameters().items():
        if frozen.get(group, False):
            continue
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise StateError(f"no gradient for unfrozen parameter {name}")
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise DimensionError(f"velocity for {name} has shape {v.shape}, parameter {p.data.shape}")
        v = state.momentum * v + g
        if state.weight_decay:
            v = v + state.weight_decay * p.data
        v = v.astype(p.data.dtype, copy=False)
        state.velocity[name] = v
        rate = base_lr * state.multipliers.get(group, 1.0)
        if rate:
            p.data = (p.data - rate * v).astype(p.data.dtype, copy=False)


# learning-rate range test

@dataclass
class LRFinderResult:
    lr_grid: list
    smoothed_losses: list
    raw_losses: list
    suggested_lr: float
    aborted: bool

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "smoothed_loss"])
            for i, (lr, loss) in enumerate(zip(self.lr_grid, self.smoothed_losses)):
                w.writerow([i, repr(float(lr)), repr(float(loss))])


def lr_find(model, batches, loss_fn, lr_lo=1e-6, lr_hi=1.0, steps=100, beta=0.98,
            momentum=0.9, weight_decay=0.0, divergence_factor=4.0, burn_in=None) -> LRFinderResult:
    """Sweep a geometric learning-rate grid, one mini-batch per grid point.

    Runs on a deep copy of ``model``. ``batches`` is an iterator of batches and
    ``loss_fn(model, batch)`` returns a scalar loss tensor. The sweep stops
    when the bias-corrected smoothed loss exceeds ``divergence_factor`` times
    the best seen; the suggestion is the rate at the smoothed minimum / 10,
    never below ``lr_lo``. The first ``burn_in`` points (default: a tenth of
    the grid, at most 10) take no part in the divergence test or the minimum,
    since early smoothed values are still close to single noisy batch losses.
    """
    if not 0 < lr_lo < lr_hi:
        raise ParameterError("need 0 < lr_lo < lr_hi")
    if steps < 2:
        raise ParameterError("steps must be at least 2")
    if burn_in is None:
        burn_in = min(10, steps // 10)
    work = copy.deepcopy(model)
    state = OptimizerState(momentum=momentum, weight_decay=weight_decay)
    grid = np.geomspace(lr_lo, lr_hi, steps)
    lrs, smoothed, raw = [], [], []
    avg, best, aborted = 0.0, math.inf, False
    batches = iter(batches)
    for i, lr in enumerate(grid):
        try:
            batch = next(batches)
        except StopIteration:
            break
        work.zero_grad()
        loss = loss_fn(work, batch)
        value = float(loss.item())
        if not math.isfinite(value):
            if i == 0:
                raise FinderError(f"non-finite loss {value} at the first step (lr={lr:.3g})")
            aborted = True
            break
        avg = beta * avg + (1 - beta) * value
        s = avg / (1 - beta ** (i + 1))
        lrs.append(float(lr))
        smoothed.append(s)
        raw.append(value)
        if i >= burn_in:
            best = min(best, s)
            if s > divergence_factor * best:
                aborted = True
                break
        loss.backward()
        sgd_step(work, state, float(lr))
    if len(lrs) < 2:
        raise FinderError(f"sweep diverged immediately: lrs={lrs}, losses={raw}")
    # burn-in points are excluded from the minimum too, when the sweep got past them
    start = burn_in if len(smoothed) > burn_in else 0
    best_lr = lrs[start + int(np.argmin(smoothed[start:]))]
    return LRFinderResult(lrs, smoothed, raw, max(lr_lo, best_lr / 10.0), aborted)
