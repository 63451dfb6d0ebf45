"""Two-objective NSGA-II machinery: dominance, fronts, crowding, selection.

Both objectives (validation error rate, parameter count) are minimized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import PopulationStateError
from .genome import ArchGenome, MutationSeed, make_rng


@dataclass(frozen=True)
class Fitness:
    error_rate: float
    param_count: int

    def __post_init__(self):
        if not 0.0 <= self.error_rate <= 1.0:
            raise ValueError(f"error_rate {self.error_rate} outside [0, 1]")
        if self.param_count < 0:
            raise ValueError(f"param_count {self.param_count} is negative")

    def objectives(self) -> tuple[float, int]:
        return (self.error_rate, self.param_count)


@dataclass
class Individual:
    genome: ArchGenome
    fitness: Fitness | None = None
    rank: int | None = None
    crowding: float | None = None

    def reset(self) -> "Individual":
        """Copy with fitness and sorting state cleared."""
        return Individual(self.genome)


@dataclass
class Population:
    members: list[Individual]
    capacity: int

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]


def dominates(a: Fitness, b: Fitness) -> bool:
    oa, ob = a.objectives(), b.objectives()
    return all(x <= y for x, y in zip(oa, ob)) and any(x < y for x, y in zip(oa, ob))


def _require_fitness(pop: Sequence[Individual]) -> list[Fitness]:
    missing = [i for i, ind in enumerate(pop) if ind.fitness is None]
    if missing:
        raise PopulationStateError(f"members {missing} have no fitness")
    return [ind.fitness for ind in pop]


def non_dominated_sort(pop: Sequence[Individual]) -> list[list[int]]:
    """Partition ``pop`` into Pareto fronts (lists of indices, ascending).

    Writes the 0-based front index into each member's ``rank``.
    """
    fits = _require_fitness(pop)
    n = len(fits)
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(fits[i], fits[j]):
                dominated_by[i].append(j)
                counts[j] += 1
            elif dominates(fits[j], fits[i]):
                dominated_by[j].append(i)
                counts[i] += 1

    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
    for rank, front in enumerate(fronts):
        for i in front:
            pop[i].rank = rank
    return fronts


def crowding_distance(front: Sequence[Individual]) -> list[float]:
    fits = _require_fitness(front)
    n = len(fits)
    if n == 0:
        raise PopulationStateError("crowding distance of an empty front")
    distance = [0.0] * n
    for m in range(2):
        values = [f.objectives()[m] for f in fits]
        order = sorted(range(n), key=lambda i: values[i])
        distance[order[0]] = math.inf
        distance[order[-1]] = math.inf
        lo, hi = values[order[0]], values[order[-1]]
        if hi == lo:
            continue
        span = float(hi - lo)
        for k in range(1, n - 1):
            i = order[k]
            distance[i] += (values[order[k + 1]] - values[order[k - 1]]) / span
    return distance


def assign_rank_and_crowding(pop: Sequence[Individual]) -> list[list[int]]:
    fronts = non_dominated_sort(pop)
    for front in fronts:
        members = [pop[i] for i in front]
        for ind, d in zip(members, crowding_distance(members)):
            ind.crowding = d
    return fronts


def _beats(a: Individual, b: Individual) -> int:
    """+1 if a wins outright, -1 if b does, 0 on a full tie."""
    if a.rank != b.rank:
        return 1 if a.rank < b.rank else -1
    if a.crowding != b.crowding:
        return 1 if a.crowding > b.crowding else -1
    return 0


def binary_tournament(pop: Population | Sequence[Individual], seed: MutationSeed) -> Individual:
    members = list(pop)
    if len(members) < 2:
        raise PopulationStateError("binary tournament needs at least two members")
    if any(m.rank is None or m.crowding is None for m in members):
        raise PopulationStateError("ranks and crowding must be assigned before selection")
    rng = make_rng(seed)
    i, j = rng.choice(len(members), size=2, replace=False)
    a, b = members[int(i)], members[int(j)]
    outcome = _beats(a, b)
    if outcome == 0:
        return a if rng.random() < 0.5 else b
    return a if outcome > 0 else b


def tournament_win_probabilities(pop: Sequence[Individual]) -> np.ndarray:
    """Exact probability that each member wins one binary tournament."""
    n = len(pop)
    pairs = n * (n - 1) / 2
    p = np.zeros(n)
    for i in range(n):
        for j in range(i + 1, n):
            outcome = _beats(pop[i], pop[j])
            p[i] += {1: 1.0, 0: 0.5, -1: 0.0}[outcome] / pairs
            p[j] += {1: 0.0, 0: 0.5, -1: 1.0}[outcome] / pairs
    return p


def environmental_selection(parents: Population, offspring: Sequence[Individual]) -> Population:
    merged = list(parents.members) + list(offspring)
    fronts = assign_rank_and_crowding(merged)
    chosen: list[int] = []
    for front in fronts:
        room = parents.capacity - len(chosen)
        if room <= 0:
            break
        if len(front) <= room:
            chosen.extend(front)
        else:
            by_crowding = sorted(front, key=lambda i: -merged[i].crowding)
            chosen.extend(sorted(by_crowding[:room]))
    survivors = Population([merged[i] for i in chosen], parents.capacity)
    assign_rank_and_crowding(survivors.members)
    return survivors


FRONT_CSV_HEADER = ["generation", "member_id", "error_rate", "param_count", "rank", "crowding"]


def append_fronts_csv(path: str | Path, generation: int, pop: Sequence[Individual]) -> None:
    """Debug dump of one generation's sorted population."""
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(FRONT_CSV_HEADER)
        for i, ind in enumerate(pop):
            writer.writerow([
                generation, i, repr(ind.fitness.error_rate), ind.fitness.param_count,
                ind.rank, repr(ind.crowding),
            ])
