"""Finite-difference verification of autograd gradients on small networks."""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call, vmap

from .genome import OPS, CellGenome, CellKind, NodeGene, draw_inputs
from .network import Cell, CellPlan


class MicroNetwork(nn.Module):
    """Stem, one normal cell, one reduction cell and a linear head."""

    def __init__(self, normal: CellGenome, reduction: CellGenome, channels: int = 2,
                 in_channels: int = 3, num_classes: int = 3):
        super().__init__()
        c = channels
        self.stem = nn.Sequential(nn.Conv2d(in_channels, c, 3, padding=1, bias=False), nn.BatchNorm2d(c))
        first = CellPlan(False, c, c, c, False, len(normal.sinks()) * c)
        second = CellPlan(True, c, first.out_channels, 2 * c, True, len(reduction.sinks()) * 2 * c)
        self.normal = Cell(normal, first)
        self.reduction = Cell(reduction, second)
        self.head = nn.Linear(second.out_channels, num_classes)

    def forward(self, x):
        s = self.stem(x)
        n = self.normal(s, s)
        r = self.reduction(s, n)
        return self.head(F.adaptive_avg_pool2d(r, 1).flatten(1))


def random_micro_cell(rng: np.random.Generator, kind: CellKind, n_nodes: int) -> CellGenome:
    nodes = [NodeGene(OPS[int(rng.integers(len(OPS)))], draw_inputs(rng, i)) for i in range(n_nodes)]
    return CellGenome(kind, tuple(nodes))


def gradient_errors(module: nn.Module, x: torch.Tensor, y: torch.Tensor, eps: float = 1e-6,
                    floor: float = 1e-6, chunk: int = 512) -> tuple[float, float, int]:
    """Compare autograd against central differences for every weight.

    Runs in float64 with batch-statistics normalization. Returns the max
    relative error (denominator floored at ``floor``), the max absolute
    error and the number of weights checked.
    """
    m = copy.deepcopy(module).double()
    torch.func.replace_all_batch_norm_modules_(m)
    m.train()
    x = x.double()
    names = [k for k, _ in m.named_parameters()]
    params = {k: v.detach() for k, v in m.named_parameters()}
    sizes = [params[k].numel() for k in names]

    def loss_of(p):
        return F.cross_entropy(functional_call(m, p, (x,)), y)

    live = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    grads = torch.autograd.grad(loss_of(live), [live[k] for k in names])
    analytic = torch.cat([g.flatten() for g in grads])

    flat = torch.cat([params[k].flatten() for k in names])

    def loss_flat(v):
        return loss_of({k: part.view_as(params[k]) for k, part in zip(names, torch.split(v, sizes))})

    step = torch.eye(flat.numel(), dtype=torch.float64) * eps
    batched = vmap(loss_flat, chunk_size=chunk)
    numeric = (batched(flat + step) - batched(flat - step)) / (2 * eps)

    diff = (analytic - numeric).abs()
    rel = diff / torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=floor)
    return float(rel.max()), float(diff.max()), flat.numel()
