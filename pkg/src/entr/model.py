"""Desk-scale residual networks with a three-group parameter partition.

The three variants keep the block layout of the full-size ResNet family
([1,1,1,1], [2,2,2,2] and [3,4,6,3] basic blocks over four stages) at narrow
widths so they train on a laptop CPU. Parameters are split into the groups
``early`` (stem and first half of the stages), ``late`` (remaining stages)
and ``head`` (the final linear layer); freezing and discriminative learning
rates operate on those groups.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError, ParameterError, StateError
from .functional import Mode, RunningStats
from .tensor import Tensor

GROUPS = ("early", "late", "head")

VARIANTS = {
    "RN10": ((8, 16, 32, 64), (1, 1, 1, 1)),
    "RN18": ((8, 16, 32, 64), (2, 2, 2, 2)),
    "RN34": ((8, 16, 32, 64), (3, 4, 6, 3)),
}

MIN_RESOLUTION = 8


@dataclass(frozen=True)
class ResNetConfig:
    variant: str = "RN10"
    stage_widths: tuple = VARIANTS["RN10"][0]
    blocks_per_stage: tuple = VARIANTS["RN10"][1]
    num_classes: int = 3
    head_dropout: float = 0.5
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ConfigError("stage_widths and blocks_per_stage must have equal length")
        if not self.stage_widths or min(self.stage_widths) < 1 or min(self.blocks_per_stage) < 1:
            raise ConfigError("every stage needs a positive width and at least one block")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not 0.4 <= self.head_dropout <= 0.6:
            raise ConfigError(f"head_dropout must lie in [0.4, 0.6], got {self.head_dropout}")

    @classmethod
    def from_variant(cls, variant: str, num_classes: int = 3, head_dropout: float = 0.5, in_channels: int = 3):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        widths, blocks = VARIANTS[variant]
        return cls(variant, widths, blocks, num_classes, head_dropout, in_channels)


def _kaiming(rng, shape, fan_in, gain=2.0, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


class Conv2d:
    def __init__(self, cin, cout, k, stride=1, padding=0, rng=None, dtype=np.float32):
        self.stride, self.padding, self.k = stride, padding, k
        self.weight = Tensor(_kaiming(rng, (cout, cin, k, k), cin * k * k, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return F.conv2d(x, self.weight, None, self.stride, self.padding)

    def out_size(self, h, w):
        return (F.conv_output_size(h, self.k, self.stride, self.padding),
                F.conv_output_size(w, self.k, self.stride, self.padding))

    def macs(self, h, w):
        f, c, k, _ = self.weight.shape
        ho, wo = self.out_size(h, w)
        return f * c * k * k * ho * wo


class BatchNorm2d:
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running = RunningStats.initialized(channels, dtype)

    def __call__(self, x, mode):
        return F.batchnorm2d(x, self.gamma, self.beta, self.running, mode)


class Linear:
    def __init__(self, fan_in, fan_out, rng, dtype=np.float32):
        self.weight = Tensor(_kaiming(rng, (fan_out, fan_in), fan_in, gain=1.0, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)

    def macs(self):
        return self.weight.shape[0] * self.weight.shape[1]


class BasicBlock:
    """conv-BN-ReLU, conv-BN, plus identity or 1x1-projection shortcut, then ReLU."""

    def __init__(self, cin, cout, stride, rng, dtype=np.float32):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng, dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm2d(cout, dtype)
        self.proj = self.proj_bn = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride, 0, rng, dtype)
            self.proj_bn = BatchNorm2d(cout, dtype)

    def __call__(self, x, mode):
        out = F.relu(self.bn1(self.conv1(x), mode))
        out = self.bn2(self.conv2(out), mode)
        short = x if self.proj is None else self.proj_bn(self.proj(x), mode)
        return F.relu(out + short)

    def named_layers(self, prefix):
        yield f"{prefix}.conv1", self.conv1
        yield f"{prefix}.bn1", self.bn1
        yield f"{prefix}.conv2", self.conv2
        yield f"{prefix}.bn2", self.bn2
        if self.proj is not None:
            yield f"{prefix}.proj", self.proj
            yield f"{prefix}.proj_bn", self.proj_bn


class Model:
    """A built residual network: layers, named parameters and group state."""

    def __init__(self, config: ResNetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = config.stage_widths
        self.stem = Conv2d(config.in_channels, widths[0], 3, 1, 1, rng, dtype)
        self.stem_bn = BatchNorm2d(widths[0], dtype)
        self.stages = []
        cin = widths[0]
        for s, (width, nblocks) in enumerate(zip(widths, config.blocks_per_stage)):
            blocks = []
            for b in range(nblocks):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(BasicBlock(cin, width, stride, rng, dtype))
                cin = width
            self.stages.append(blocks)
        self.fc = Linear(cin, config.num_classes, rng, dtype)
        self.frozen = {g: False for g in GROUPS}
        self._dropout_rng = np.random.default_rng(seed + 1)

    # structure

    def stage_group(self, stage_index: int) -> str:
        return "early" if stage_index < (len(self.stages) + 1) // 2 else "late"

    def named_layers(self):
        """Yield ``(name, group, layer)`` in forward order."""
        yield "stem", "early", self.stem
        yield "stem_bn", "early", self.stem_bn
        for s, blocks in enumerate(self.stages):
            group = self.stage_group(s)
            for b, block in enumerate(blocks):
                for name, layer in block.named_layers(f"stage{s + 1}.block{b + 1}"):
                    yield name, group, layer
        yield "fc", "head", self.fc

    def named_parameters(self):
        """Ordered ``{name: (group, Tensor)}``."""
        params = {}
        for name, group, layer in self.named_layers():
            if isinstance(layer, (Conv2d,)):
                params[f"{name}.weight"] = (group, layer.weight)
            elif isinstance(layer, BatchNorm2d):
                params[f"{name}.gamma"] = (group, layer.gamma)
                params[f"{name}.beta"] = (group, layer.beta)
            elif isinstance(layer, Linear):
                params[f"{name}.weight"] = (group, layer.weight)
                params[f"{name}.bias"] = (group, layer.bias)
        return params

    def named_buffers(self):
        bufs = {}
        for name, group, layer in self.named_layers():
            if isinstance(layer, BatchNorm2d):
                bufs[f"{name}.running_mean"] = (group, layer.running)
        return bufs

    def parameters(self, group: str | None = None):
        return [t for g, t in self.named_parameters().values() if group is None or g == group]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    @property
    def min_resolution(self) -> int:
        return MIN_RESOLUTION

    # forward

    def _group_mode(self, group, mode):
        return Mode.EVAL if self.frozen[group] else mode

    def forward(self, x, mode=Mode.EVAL, rng: np.random.Generator | None = None) -> Tensor:
        """Logits for a batch [N,C,H,W].

        BatchNorm layers inside frozen groups always use their running
        statistics so a frozen group carries no state changes at all.
        """
        mode = Mode(mode)
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected [N,{self.config.in_channels},H,W], got {x.shape}")
        if min(x.shape[2:]) < self.min_resolution:
            raise DimensionError(f"input {x.shape[2]}x{x.shape[3]} below minimum size {self.min_resolution}")
        early = self._group_mode("early", mode)
        out = F.relu(self.stem_bn(self.stem(x), early))
        for s, blocks in enumerate(self.stages):
            stage_mode = self._group_mode(self.stage_group(s), mode)
            for block in blocks:
                out = block(out, stage_mode)
        out = F.global_avg_pool(out)
        head_mode = self._group_mode("head", mode)
        out = F.dropout(out, self.config.head_dropout, head_mode, rng or self._dropout_rng)
        return self.fc(out)

    __call__ = forward

    def cost_profile(self, h: int, w: int):
        """Per-image forward MACs as ``[(layer name, group, macs)]`` for conv and linear layers."""
        rows = [("stem", "early", self.stem.macs(h, w))]
        h, w = self.stem.out_size(h, w)
        for s, blocks in enumerate(self.stages):
            group = self.stage_group(s)
            for b, block in enumerate(blocks):
                prefix = f"stage{s + 1}.block{b + 1}"
                rows.append((f"{prefix}.conv1", group, block.conv1.macs(h, w)))
                h2, w2 = block.conv1.out_size(h, w)
                rows.append((f"{prefix}.conv2", group, block.conv2.macs(h2, w2)))
                if block.proj is not None:
                    rows.append((f"{prefix}.proj", group, block.proj.macs(h, w)))
                h, w = h2, w2
        rows.append(("fc", "head", self.fc.macs()))
        return rows


def build_resnet(config: ResNetConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed, dtype)


def param_count(model) -> int:
    if isinstance(model, Linear):
        return model.weight.data.size + model.bias.data.size
    return sum(p.data.size for p in model.parameters())


def replace_head(model: Model, num_classes: int, seed: int = 0) -> Model:
    """Swap the final linear layer for a freshly initialized one; other parameters are untouched."""
    if num_classes < 2:
        raise ParameterError("num_classes must be at least 2")
    rng = np.random.default_rng(seed)
    model.fc = Linear(model.fc.weight.shape[1], num_classes, rng, model.dtype)
    model.config = ResNetConfig(**{**asdict(model.config), "num_classes": num_classes})
    return model


def set_frozen(model: Model, groups, frozen: bool = True) -> None:
    groups = [groups] if isinstance(groups, str) else list(groups)
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ParameterError(f"unknown layer groups {sorted(unknown)}")
    for g in groups:
        model.frozen[g] = bool(frozen)
    for group, p in model.named_parameters().values():
        p.requires_grad = not model.frozen[group]


def group_checksum(model: Model, group: str | None = None) -> str:
    """SHA-256 over the raw bytes of a group's parameters (all groups if None)."""
    h = hashlib.sha256()
    for name, (g, p) in model.named_parameters().items():
        if group is None or g == group:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# checkpoint files
#
# layout: MAGIC, uint64 little-endian header length, UTF-8 JSON header,
# then raw little-endian array bytes in the order listed under "arrays".

MAGIC = b"ENTRCKPT\x01\n"


def _state_arrays(model: Model):
    arrays = {}
    for name, (_, p) in model.named_parameters().items():
        arrays[name] = p.data
    for name, (_, stats) in model.named_buffers().items():
        base = name.rsplit(".", 1)[0]
        arrays[f"{base}.running_mean"] = stats.mean
        arrays[f"{base}.running_var"] = stats.var
    return arrays


def checkpoint_bytes(model: Model) -> bytes:
    arrays = _state_arrays(model)
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format": 1,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.config).items()},
        "dtype": model.dtype.str,
        "frozen": model.frozen,
        "arrays": entries,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(raw)) + raw + b"".join(blobs)


def save_checkpoint(model: Model, path) -> str:
    """Write a checkpoint; returns the SHA-256 of the written bytes."""
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise StateError(f"{path} is not an entr checkpoint")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off:off + hlen])
    off += hlen
    config = ResNetConfig(**header["config"])
    model = Model(config, seed=0, dtype=np.dtype(header["dtype"]))
    params = {name: t for name, (_, t) in model.named_parameters().items()}
    stats = {name.rsplit(".", 1)[0]: s for name, (_, s) in model.named_buffers().items()}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(data, dtype=dt, count=n // dt.itemsize, offset=off).reshape(entry["shape"])
        arr = arr.astype(dt.newbyteorder("="), copy=True)
        off += n
        name = entry["name"]
        if name in params:
            params[name].data = arr
        else:
            base, kind = name.rsplit(".", 1)
            setattr(stats[base], "mean" if kind == "running_mean" else "var", arr)
    set_frozen(model, [g for g, f in header["frozen"].items() if f], True)
    return model
