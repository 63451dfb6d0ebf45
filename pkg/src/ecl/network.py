"""Turn a genome into a trainable classifier, count its weights, train it.

Layout: stem conv, then ``[N normal] R [N normal] R [N normal]`` cells,
global average pooling and a linear head. Width doubles at each reduction
cell. Reduction cells do the downsampling in their input projections, so
every node inside a cell runs at stride 1 on ``C`` channels.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DivergenceError, ShapeError
from .genome import ArchGenome, CellGenome, OpKind

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetworkConfig:
    initial_channels: int = 16
    n_repeat: int = 1
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.initial_channels < 2 or self.initial_channels % 2:
            raise ConfigError("initial_channels must be a positive even integer")
        if self.n_repeat < 1 or self.num_classes < 1:
            raise ConfigError("n_repeat and num_classes must be positive")
        if len(self.input_shape) != 3 or self.input_shape[0] < 1:
            raise ConfigError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        _, h, w = self.input_shape
        if h < 4 or w < 4 or h % 4 or w % 4:
            raise ConfigError(
                f"spatial size {h}x{w} cannot be halved twice; need multiples of 4"
            )

    def cell_layout(self) -> list[bool]:
        """Reduction flag for every cell in order."""
        n = self.n_repeat
        return [False] * n + [True] + [False] * n + [True] + [False] * n


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 10
    lr_init: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr_init <= 0 or self.lr_min <= 0 or self.lr_min > self.lr_init:
            raise ConfigError("need 0 < lr_min <= lr_init")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.batch_size < 1:
            raise ConfigError("weight_decay must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: float) -> float:
        """Cosine-annealed learning rate at (possibly fractional) ``epoch``."""
        if self.epochs == 0:
            return self.lr_init
        cos = math.cos(math.pi * epoch / self.epochs)
        return self.lr_min + 0.5 * (self.lr_init - self.lr_min) * (1.0 + cos)


# -- operations ------------------------------------------------------------

class ReLUConvBN(nn.Sequential):
    def __init__(self, c_in, c_out):
        super().__init__(
            nn.ReLU(),
            nn.Conv2d(c_in, c_out, 1, bias=False),
            nn.BatchNorm2d(c_out),
        )


class FactorizedReduce(nn.Module):
    """Stride-2 1x1 projection over two offset grids, concatenated."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.relu = nn.ReLU()
        self.conv_1 = nn.Conv2d(c_in, c_out // 2, 1, stride=2, bias=False)
        self.conv_2 = nn.Conv2d(c_in, c_out // 2, 1, stride=2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        x = self.relu(x)
        out = torch.cat([self.conv_1(x), self.conv_2(x[:, :, 1:, 1:])], dim=1)
        return self.bn(out)


def _sep_block(c, k, dilation=1):
    pad = dilation * (k // 2)
    return [
        nn.ReLU(),
        nn.Conv2d(c, c, k, padding=pad, dilation=dilation, groups=c, bias=False),
        nn.Conv2d(c, c, 1, bias=False),
        nn.BatchNorm2d(c),
    ]


def make_op(op: OpKind, c: int) -> nn.Module:
    if op is OpKind.SEP_CONV_3:
        return nn.Sequential(*_sep_block(c, 3), *_sep_block(c, 3))
    if op is OpKind.SEP_CONV_5:
        return nn.Sequential(*_sep_block(c, 5), *_sep_block(c, 5))
    if op is OpKind.DIL_CONV_3:
        return nn.Sequential(*_sep_block(c, 3, dilation=2))
    if op is OpKind.DIL_CONV_5:
        return nn.Sequential(*_sep_block(c, 5, dilation=2))
    if op is OpKind.MAX_POOL_3:
        return nn.MaxPool2d(3, stride=1, padding=1)
    if op is OpKind.AVG_POOL_3:
        return nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False)
    if op is OpKind.IDENTITY:
        return nn.Identity()
    raise ValueError(f"unknown op {op!r}")


def op_param_count(op: OpKind, c: int) -> int:
    block = {3: c * 9 + c * c + 2 * c, 5: c * 25 + c * c + 2 * c}
    return {
        OpKind.SEP_CONV_3: 2 * block[3],
        OpKind.SEP_CONV_5: 2 * block[5],
        OpKind.DIL_CONV_3: block[3],
        OpKind.DIL_CONV_5: block[5],
    }.get(op, 0)


# -- layout ----------------------------------------------------------------

@dataclass(frozen=True)
class CellPlan:
    reduction: bool
    c_prev_prev: int
    c_prev: int
    channels: int
    reduce_s0: bool
    out_channels: int


def plan_cells(genome: ArchGenome, config: NetworkConfig) -> list[CellPlan]:
    c = config.initial_channels
    c_pp = c_p = c
    s0_reduced_more = False
    plans = []
    for reduction in config.cell_layout():
        cell = genome.reduction if reduction else genome.normal
        if reduction:
            c *= 2
        # s0 sits one resolution step above the nodes when this cell reduces
        # or when the previous cell reduced.
        reduce_s0 = reduction or s0_reduced_more
        out = len(cell.sinks()) * c
        plans.append(CellPlan(reduction, c_pp, c_p, c, reduce_s0, out))
        c_pp, c_p = c_p, out
        s0_reduced_more = reduction
    return plans


class Cell(nn.Module):
    def __init__(self, cell: CellGenome, plan: CellPlan):
        super().__init__()
        c = plan.channels
        self.pre0 = FactorizedReduce(plan.c_prev_prev, c) if plan.reduce_s0 else ReLUConvBN(plan.c_prev_prev, c)
        self.pre1 = FactorizedReduce(plan.c_prev, c) if plan.reduction else ReLUConvBN(plan.c_prev, c)
        self.ops = nn.ModuleList(make_op(node.op, c) for node in cell.nodes)
        self.node_inputs = [node.inputs for node in cell.nodes]
        self.sinks = cell.sinks()

    def forward(self, s0, s1):
        states = [self.pre0(s0), self.pre1(s1)]
        for op, inputs in zip(self.ops, self.node_inputs):
            states.append(op(states[inputs[0] + 2] + states[inputs[1] + 2]))
        return torch.cat([states[i + 2] for i in self.sinks], dim=1)


class CellNetwork(nn.Module):
    def __init__(self, genome: ArchGenome, config: NetworkConfig):
        super().__init__()
        c = config.initial_channels
        self.stem = nn.Sequential(
            nn.Conv2d(config.input_shape[0], c, 3, padding=1, bias=False),
            nn.BatchNorm2d(c),
        )
        plans = plan_cells(genome, config)
        self.cells = nn.ModuleList(
            Cell(genome.reduction if p.reduction else genome.normal, p) for p in plans
        )
        self.classifier = nn.Linear(plans[-1].out_channels, config.num_classes)

    def forward(self, x, trace: list | None = None):
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
            if trace is not None:
                trace.append(tuple(s1.shape))
        out = F.adaptive_avg_pool2d(s1, 1).flatten(1)
        return self.classifier(out)


def _init_weights(module: nn.Module, generator: torch.Generator) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=generator)
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=generator)
                m.bias.uniform_(-bound, bound, generator=generator)


@dataclass
class NetworkInstance:
    genome: ArchGenome
    config: NetworkConfig
    module: CellNetwork
    train_losses: list[float] = field(default_factory=list)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def weights(self) -> dict[str, torch.Tensor]:
        return dict(self.module.state_dict())


def torch_seed(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed) & ((1 << 63) - 1)
    return int(np.random.SeedSequence(list(seed)).generate_state(1, np.uint64)[0]) & ((1 << 63) - 1)


def instantiate(genome: ArchGenome, config: NetworkConfig, seed=0) -> NetworkInstance:
    genome.validate()
    module = CellNetwork(genome, config)
    gen = torch.Generator().manual_seed(torch_seed(seed))
    _init_weights(module, gen)
    module.eval()
    return NetworkInstance(genome, config, module)


def count_parameters(genome: ArchGenome, config: NetworkConfig) -> int:
    c = config.initial_channels
    total = config.input_shape[0] * c * 9 + 2 * c
    plans = plan_cells(genome, config)
    for p in plans:
        cell = genome.reduction if p.reduction else genome.normal
        # ReLUConvBN and FactorizedReduce both hold c_in * c weights + BN affine.
        total += p.c_prev_prev * p.channels + 2 * p.channels
        total += p.c_prev * p.channels + 2 * p.channels
        total += sum(op_param_count(node.op, p.channels) for node in cell.nodes)
    total += plans[-1].out_channels * config.num_classes + config.num_classes
    return total


# -- execution -------------------------------------------------------------

def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.ascontiguousarray(x))


def _check_batch(net: NetworkInstance, batch: torch.Tensor) -> None:
    if batch.ndim != 4 or tuple(batch.shape[1:]) != net.config.input_shape:
        raise ShapeError(
            f"batch shape {tuple(batch.shape)} does not match (N, {', '.join(map(str, net.config.input_shape))})"
        )


def forward(net: NetworkInstance, batch, chunk: int = 512) -> torch.Tensor:
    """Inference-mode logits; never touches weights or running statistics."""
    x = _as_tensor(batch)
    _check_batch(net, x)
    dtype = next(net.module.parameters()).dtype
    net.module.eval()
    with torch.no_grad():
        parts = [net.module(x[i:i + chunk].to(dtype)) for i in range(0, len(x), chunk)]
    return torch.cat(parts) if parts else torch.zeros(0, net.config.num_classes, dtype=dtype)


def error_rate(net: NetworkInstance, x, y) -> float:
    y = _as_tensor(y).long()
    if len(y) == 0:
        return 0.0
    pred = forward(net, x).argmax(dim=1)
    return float((pred != y).sum().item()) / len(y)


def _batches(n: int, size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    starts = list(range(0, n, size))
    # A trailing batch of one would break batch norm; fold it into the previous one.
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for k, s in enumerate(starts):
        end = starts[k + 1] if k + 1 < len(starts) else n
        yield perm[s:end]


def train(net: NetworkInstance, train_split, val_split, schedule: TrainSchedule, seed=0):
    """Mini-batch SGD with momentum, weight decay and cosine-annealed LR.

    ``train_split`` and ``val_split`` are ``(x, local_labels)`` pairs. Returns
    the (mutated) instance and its validation error after the last epoch.
    """
    x, y = _as_tensor(train_split[0]), _as_tensor(train_split[1]).long()
    if len(x) == 0 or len(val_split[0]) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    _check_batch(net, x)
    if int(y.min()) < 0 or int(y.max()) >= net.config.num_classes:
        raise ConfigError(f"labels must lie in [0, {net.config.num_classes})")

    module = net.module
    dtype = next(module.parameters()).dtype
    x = x.to(dtype)
    gen = torch.Generator().manual_seed(torch_seed(seed))
    opt = torch.optim.SGD(
        module.parameters(), lr=schedule.lr_init, momentum=schedule.momentum,
        weight_decay=schedule.weight_decay,
    )
    for epoch in range(schedule.epochs):
        for group in opt.param_groups:
            group["lr"] = schedule.lr_at(epoch)
        module.train()
        total, seen = 0.0, 0
        for idx in _batches(len(x), schedule.batch_size, gen):
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(module(x[idx]), y[idx])
            value = float(loss.item())
            if not math.isfinite(value):
                module.eval()
                raise DivergenceError(epoch, value)
            loss.backward()
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        net.train_losses.append(total / seen)
        log.debug("epoch %d lr=%.6g loss=%.4f", epoch, schedule.lr_at(epoch), total / seen)
    module.eval()
    return net, error_rate(net, val_split[0], val_split[1])


def freeze(net: NetworkInstance) -> NetworkInstance:
    net.module.eval()
    for p in net.module.parameters():
        p.requires_grad_(False)
    return net


def weights_digest(net: NetworkInstance) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in net.module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoints -----------------------------------------------------------

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def save_weights(net: NetworkInstance, blob_path: str | Path, manifest_path: str | Path) -> None:
    """Raw little-endian blob plus a JSON manifest (name -> shape, dtype, offset)."""
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, t in net.module.state_dict().items():
            arr = t.detach().cpu().contiguous().numpy().astype(_DTYPES[t.dtype], copy=False)
            data = arr.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPES[t.dtype], "offset": offset})
            fh.write(data)
            offset += len(data)
    manifest = {"format": "ecl-weights", "version": 1, "total_bytes": offset, "tensors": entries}
    Path(manifest_path).write_text(json.dumps(manifest, indent=1) + "\n")


def load_weights(genome: ArchGenome, config: NetworkConfig, blob_path, manifest_path) -> NetworkInstance:
    net = instantiate(genome, config, seed=0)
    manifest = json.loads(Path(manifest_path).read_text())
    blob = Path(blob_path).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ShapeError(f"{blob_path}: expected {manifest['total_bytes']} bytes, found {len(blob)}")
    state = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    net.module.load_state_dict(state, strict=True)
    net.module.eval()
    return net


def spatial_trace(net: NetworkInstance, batch) -> list[tuple[int, ...]]:
    """Output shape of every cell for one forward pass."""
    x = _as_tensor(batch)
    _check_batch(net, x)
    trace: list = []
    net.module.eval()
    with torch.no_grad():
        net.module(x, trace=trace)
    return trace

