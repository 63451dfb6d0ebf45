"""Cell-based architecture genome.

A genome holds two cell blueprints, one for normal cells and one for
reduction cells. Each cell is a DAG over two implicit inputs (indices -2 and
-1, the outputs of the two preceding cells) and ``node_count`` operation
nodes. Every operation node sums exactly two distinct earlier states and
applies a single operation to the sum. The cell output concatenates every
node that no other node consumes.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    GenomeFormatError,
    InvariantViolationError,
    MalformedGenomeError,
    UnknownOpError,
)

MIN_NODES = 5
MAX_NODES = 12
NUM_CELL_INPUTS = 2
NODE_FAN_IN = 2
FORMAT_VERSION = 1


class OpKind(enum.Enum):
    SEP_CONV_3 = "sep_conv_3x3"
    SEP_CONV_5 = "sep_conv_5x5"
    DIL_CONV_3 = "dil_conv_3x3"
    DIL_CONV_5 = "dil_conv_5x5"
    MAX_POOL_3 = "max_pool_3x3"
    AVG_POOL_3 = "avg_pool_3x3"
    IDENTITY = "identity"


OPS: tuple[OpKind, ...] = tuple(OpKind)


class CellKind(enum.Enum):
    NORMAL = "normal"
    REDUCTION = "reduction"


@dataclass(frozen=True)
class NodeGene:
    op: OpKind
    inputs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))


@dataclass(frozen=True)
class CellGenome:
    kind: CellKind
    nodes: tuple[NodeGene, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def sinks(self) -> list[int]:
        """Indices of nodes whose output no other node consumes."""
        used = {j for node in self.nodes for j in node.inputs if j >= 0}
        return [i for i in range(len(self.nodes)) if i not in used]

    def validate(self) -> None:
        if not MIN_NODES <= self.node_count <= MAX_NODES:
            raise InvariantViolationError(
                f"{self.kind.value} cell has {self.node_count} nodes, "
                f"expected {MIN_NODES}..{MAX_NODES}"
            )
        for i, node in enumerate(self.nodes):
            if not isinstance(node.op, OpKind):
                raise InvariantViolationError(f"node {i}: op {node.op!r} is not an OpKind")
            if len(node.inputs) != NODE_FAN_IN or len(set(node.inputs)) != NODE_FAN_IN:
                raise InvariantViolationError(
                    f"{self.kind.value} node {i}: needs {NODE_FAN_IN} distinct inputs, got {node.inputs}"
                )
            for j in node.inputs:
                if not -NUM_CELL_INPUTS <= j < i:
                    raise InvariantViolationError(
                        f"{self.kind.value} node {i}: input {j} is not an earlier state"
                    )


@dataclass(frozen=True)
class ArchGenome:
    normal: CellGenome
    reduction: CellGenome

    def validate(self) -> None:
        if self.normal.kind is not CellKind.NORMAL or self.reduction.kind is not CellKind.REDUCTION:
            raise InvariantViolationError("cell kinds are swapped or duplicated")
        self.normal.validate()
        self.reduction.validate()

    def is_valid(self) -> bool:
        try:
            self.validate()
        except InvariantViolationError:
            return False
        return True

    def cells(self) -> tuple[CellGenome, CellGenome]:
        return self.normal, self.reduction


MutationSeed = int | Sequence[int] | np.random.Generator


def make_rng(seed: MutationSeed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def draw_inputs(rng: np.random.Generator, position: int) -> tuple[int, ...]:
    choices = list(range(-NUM_CELL_INPUTS, position))
    picked = rng.choice(len(choices), size=NODE_FAN_IN, replace=False)
    return tuple(sorted(choices[k] for k in picked))


def _random_cell(rng: np.random.Generator, kind: CellKind, lo: int, hi: int) -> CellGenome:
    n = int(rng.integers(lo, hi + 1))
    nodes = []
    for i in range(n):
        op = OPS[int(rng.integers(len(OPS)))]
        nodes.append(NodeGene(op, draw_inputs(rng, i)))
    return CellGenome(kind, tuple(nodes))


def check_node_range(node_range: Sequence[int]) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in node_range)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"node_range must be a pair of integers, got {node_range!r}") from exc
    if not (MIN_NODES <= lo <= hi <= MAX_NODES):
        raise ConfigError(f"node_range {lo}..{hi} must lie within {MIN_NODES}..{MAX_NODES}")
    return lo, hi


def random_genome(seed: MutationSeed, node_range: Sequence[int] = (MIN_NODES, MAX_NODES)) -> ArchGenome:
    lo, hi = check_node_range(node_range)
    rng = make_rng(seed)
    normal = _random_cell(rng, CellKind.NORMAL, lo, hi)
    reduction = _random_cell(rng, CellKind.REDUCTION, lo, hi)
    return ArchGenome(normal, reduction)


def uniform_genome(op: OpKind, node_count: int = MIN_NODES) -> ArchGenome:
    """Chain-wired genome using a single op everywhere.

    Node ``i`` reads the previous node and the most recent cell input, which
    gives a residual-style stack with one sink.
    """
    def cell(kind):
        nodes = [NodeGene(op, (-2, -1))]
        nodes += [NodeGene(op, (-1, i - 1)) for i in range(1, node_count)]
        return CellGenome(kind, tuple(nodes))

    genome = ArchGenome(cell(CellKind.NORMAL), cell(CellKind.REDUCTION))
    genome.validate()
    return genome


# -- variation -------------------------------------------------------------

def _crossover_cells(rng, a: CellGenome, b: CellGenome) -> tuple[CellGenome, CellGenome]:
    # Shared cut point: every index below the cut comes from the same
    # positions in the partner, so offspring wiring never points forward.
    shortest = min(a.node_count, b.node_count)
    cut = int(rng.integers(1, shortest))
    first = CellGenome(a.kind, a.nodes[:cut] + b.nodes[cut:])
    second = CellGenome(a.kind, b.nodes[:cut] + a.nodes[cut:])
    return _repair(rng, first), _repair(rng, second)


def _repair(rng: np.random.Generator, cell: CellGenome) -> CellGenome:
    """Clamp out-of-range or duplicate inputs to a random valid earlier state."""
    nodes = []
    changed = False
    for i, node in enumerate(cell.nodes):
        inputs = list(node.inputs)
        for k, j in enumerate(inputs):
            other = inputs[1 - k]
            if not -NUM_CELL_INPUTS <= j < i or j == other:
                options = [v for v in range(-NUM_CELL_INPUTS, i) if v != other]
                inputs[k] = options[int(rng.integers(len(options)))]
                changed = True
        nodes.append(NodeGene(node.op, tuple(sorted(inputs))))
    return CellGenome(cell.kind, tuple(nodes)) if changed else cell


def crossover(a: ArchGenome, b: ArchGenome, seed: MutationSeed) -> tuple[ArchGenome, ArchGenome]:
    """Single-point crossover applied independently to both cell types."""
    rng = make_rng(seed)
    n1, n2 = _crossover_cells(rng, a.normal, b.normal)
    r1, r2 = _crossover_cells(rng, a.reduction, b.reduction)
    return canonicalize(ArchGenome(n1, r1)), canonicalize(ArchGenome(n2, r2))


@dataclass(frozen=True)
class MutationRates:
    op: float = 0.1
    rewire: float = 0.1
    insert: float = 0.05
    delete: float = 0.05

    def __post_init__(self):
        for name in ("op", "rewire", "insert", "delete"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"mutation rate {name}={value} outside [0, 1]")


def _delete_node(cell_nodes: list[NodeGene], p: int) -> list[NodeGene]:
    bypass = cell_nodes[p].inputs
    out = []
    for i, node in enumerate(cell_nodes):
        if i == p:
            continue
        inputs = list(node.inputs)
        for k, j in enumerate(inputs):
            if j == p:
                other = inputs[1 - k]
                inputs[k] = bypass[0] if bypass[0] != other else bypass[1]
        inputs = [j - 1 if j > p else j for j in inputs]
        out.append(NodeGene(node.op, tuple(sorted(inputs))))
    return out


def _insert_node(rng, cell_nodes: list[NodeGene], p: int) -> list[NodeGene]:
    new = NodeGene(OPS[int(rng.integers(len(OPS)))], draw_inputs(rng, p))
    shifted = [
        NodeGene(node.op, tuple(j + 1 if j >= p else j for j in node.inputs))
        for node in cell_nodes
    ]
    return shifted[:p] + [new] + shifted[p:]


def _mutate_cell(rng: np.random.Generator, cell: CellGenome, rates: MutationRates) -> CellGenome:
    nodes = list(cell.nodes)
    if rng.random() < rates.delete and len(nodes) > MIN_NODES:
        nodes = _delete_node(nodes, int(rng.integers(len(nodes))))
    if rng.random() < rates.insert and len(nodes) < MAX_NODES:
        nodes = _insert_node(rng, nodes, int(rng.integers(len(nodes) + 1)))

    out = []
    for i, node in enumerate(nodes):
        op = node.op
        if rng.random() < rates.op:
            alternatives = [o for o in OPS if o is not op]
            op = alternatives[int(rng.integers(len(alternatives)))]
        inputs = list(node.inputs)
        for k in range(NODE_FAN_IN):
            if rng.random() < rates.rewire:
                options = [v for v in range(-NUM_CELL_INPUTS, i) if v not in inputs]
                if options:
                    inputs[k] = options[int(rng.integers(len(options)))]
        out.append(NodeGene(op, tuple(sorted(inputs))))
    return CellGenome(cell.kind, tuple(out))


def mutate(g: ArchGenome, rates: MutationRates | None = None, seed: MutationSeed = 0) -> ArchGenome:
    rates = rates or MutationRates()
    rng = make_rng(seed)
    normal = _mutate_cell(rng, g.normal, rates)
    reduction = _mutate_cell(rng, g.reduction, rates)
    return canonicalize(ArchGenome(normal, reduction))


# -- canonical form --------------------------------------------------------

def _canonical_cell(cell: CellGenome) -> CellGenome:
    n = cell.node_count
    consumers: list[list[int]] = [[] for _ in range(n)]
    indegree = [0] * n
    for i, node in enumerate(cell.nodes):
        for j in node.inputs:
            if not -NUM_CELL_INPUTS <= j < n:
                raise MalformedGenomeError(f"{cell.kind.value} node {i}: input {j} out of range")
            if j >= 0:
                consumers[j].append(i)
                indegree[i] += 1

    # Kahn's algorithm; smallest index first keeps already-ordered cells unchanged.
    ready = [i for i in range(n) if indegree[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for c in consumers[i]:
            indegree[c] -= 1
            if indegree[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != n:
        raise MalformedGenomeError(f"{cell.kind.value} cell contains a cycle")

    # A node is live when it has inputs and all of them are live.
    live: dict[int, int] = {}
    nodes = []
    for i in order:
        node = cell.nodes[i]
        if not node.inputs or any(j >= 0 and j not in live for j in node.inputs):
            continue
        inputs = tuple(sorted(j if j < 0 else live[j] for j in node.inputs))
        live[i] = len(nodes)
        nodes.append(NodeGene(node.op, inputs))
    return CellGenome(cell.kind, tuple(nodes))


def canonicalize(g: ArchGenome) -> ArchGenome:
    """Topologically reorder, drop dead nodes, and sort input lists.

    Raises InvariantViolationError if the result falls outside the declared
    space (for example fewer than five live nodes).
    """
    out = ArchGenome(_canonical_cell(g.normal), _canonical_cell(g.reduction))
    out.validate()
    return out


# -- serialization ---------------------------------------------------------

def genome_to_dict(g: ArchGenome) -> dict:
    def cell(c: CellGenome):
        return {
            "node_count": c.node_count,
            "nodes": [{"op": n.op.value, "inputs": list(n.inputs)} for n in c.nodes],
        }

    return {"version": FORMAT_VERSION, "normal": cell(g.normal), "reduction": cell(g.reduction)}


def serialize_genome(g: ArchGenome) -> str:
    return json.dumps(genome_to_dict(g), separators=(",", ":"))


_OP_BY_NAME = {op.value: op for op in OpKind}


def _parse_cell(data, kind: CellKind) -> CellGenome:
    if not isinstance(data, dict) or set(data) != {"node_count", "nodes"}:
        raise GenomeFormatError(f"{kind.value}: expected keys node_count and nodes")
    nodes_data = data["nodes"]
    count = data["node_count"]
    if not isinstance(nodes_data, list) or not isinstance(count, int) or isinstance(count, bool):
        raise GenomeFormatError(f"{kind.value}: node_count must be int and nodes a list")
    nodes = []
    for i, item in enumerate(nodes_data):
        if not isinstance(item, dict) or set(item) != {"op", "inputs"}:
            raise GenomeFormatError(f"{kind.value} node {i}: expected keys op and inputs")
        name, inputs = item["op"], item["inputs"]
        if not isinstance(name, str):
            raise GenomeFormatError(f"{kind.value} node {i}: op must be a string")
        if name not in _OP_BY_NAME:
            raise UnknownOpError(f"{kind.value} node {i}: unknown op {name!r}")
        if not isinstance(inputs, list) or not all(
            isinstance(j, int) and not isinstance(j, bool) for j in inputs
        ):
            raise GenomeFormatError(f"{kind.value} node {i}: inputs must be a list of ints")
        nodes.append(NodeGene(_OP_BY_NAME[name], tuple(inputs)))
    cell = CellGenome(kind, tuple(nodes))
    if count != cell.node_count:
        raise InvariantViolationError(
            f"{kind.value}: node_count={count} but {cell.node_count} nodes listed"
        )
    cell.validate()
    return cell


def deserialize_genome(text: str) -> ArchGenome:
    try:
        data = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise GenomeFormatError(f"genome is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or set(data) != {"version", "normal", "reduction"}:
        raise GenomeFormatError("genome must have keys version, normal, reduction")
    if data["version"] != FORMAT_VERSION:
        raise GenomeFormatError(f"unsupported genome version {data['version']!r}")
    return ArchGenome(
        _parse_cell(data["normal"], CellKind.NORMAL),
        _parse_cell(data["reduction"], CellKind.REDUCTION),
    )


def genome_hash(g: ArchGenome) -> str:
    import hashlib

    return hashlib.sha256(serialize_genome(g).encode("utf-8")).hexdigest()[:16]


def op_histogram(g: ArchGenome) -> np.ndarray:
    """Fraction of nodes (over both cells) using each op, in OPS order."""
    counts = np.zeros(len(OPS))
    for cell in g.cells():
        for node in cell.nodes:
            counts[OPS.index(node.op)] += 1
    return counts / counts.sum()
