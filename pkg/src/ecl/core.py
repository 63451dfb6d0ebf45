"""Evolutionary continual learning: one searched, trained expert per task.

For every task the inherited population is re-evaluated, evolved for a fixed
number of generations with NSGA-II selection, and the lowest-error member of
the first front is retrained at full size and archived. The evolved
population then carries over to the next task.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .config import EclConfig
from .errors import ConfigError, InvariantViolationError, PopulationStateError, UnknownTaskError
from .genome import (
    OPS,
    ArchGenome,
    MutationRates,
    crossover,
    genome_hash,
    mutate,
    op_histogram,
    random_genome,
)
from .moea import (
    Fitness,
    Individual,
    Population,
    assign_rank_and_crowding,
    binary_tournament,
    environmental_selection,
    non_dominated_sort,
)
from .network import (
    NetworkConfig,
    NetworkInstance,
    TrainSchedule,
    count_parameters,
    freeze,
    instantiate,
    train,
    weights_digest,
)
from .tasks import TaskSpec, TaskStream

log = logging.getLogger(__name__)

# Stream identifiers mixed into derived seeds so different uses never collide.
_INIT, _SELECT, _CROSS, _MUTATE, _EVAL, _FULL = range(6)
MAX_OFFSPRING_ATTEMPTS = 100


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def net_for_task(base: NetworkConfig, task: TaskSpec) -> NetworkConfig:
    return dataclasses.replace(base, num_classes=task.num_classes, input_shape=tuple(task.train.x.shape[1:]))


# -- fitness evaluators ----------------------------------------------------

class FitnessEvaluator(Protocol):
    def evaluate(self, genome: ArchGenome, task: TaskSpec, seed: int) -> Fitness: ...

    def param_count(self, genome: ArchGenome, task: TaskSpec) -> int: ...


@dataclass(frozen=True)
class TrainerEvaluator:
    """Short training on the task's train split, error on its validation split."""

    net: NetworkConfig
    schedule: TrainSchedule

    def param_count(self, genome, task):
        return count_parameters(genome, net_for_task(self.net, task))

    def evaluate(self, genome, task, seed):
        net = instantiate(genome, net_for_task(self.net, task), seed)
        _, val_error = train(net, task.local("train"), task.local("val"), self.schedule, seed)
        return Fitness(val_error, net.param_count)


def surrogate_target(task_id: int) -> np.ndarray:
    """Op histogram the surrogate rewards for ``task_id``: two ops, half each."""
    rng = np.random.default_rng([task_id, 7919])
    picks = rng.choice(len(OPS), size=2, replace=False)
    target = np.zeros(len(OPS))
    target[picks] = 0.5
    return target


@dataclass(frozen=True)
class SurrogateEvaluator:
    """Training-free structural fitness with a known optimum.

    The error is the total-variation distance between the genome's op
    histogram and a task-specific target, so it is exactly reproducible.
    """

    net: NetworkConfig

    def param_count(self, genome, task):
        return count_parameters(genome, net_for_task(self.net, task))

    def evaluate(self, genome, task, seed):
        distance = 0.5 * float(np.abs(op_histogram(genome) - surrogate_target(task.task_id)).sum())
        return Fitness(min(1.0, max(0.0, distance)), self.param_count(genome, task))


def make_evaluator(cfg: EclConfig) -> FitnessEvaluator:
    if cfg.evaluator == "surrogate":
        return SurrogateEvaluator(cfg.search_net)
    return TrainerEvaluator(cfg.search_net, cfg.search_schedule)


# -- archive ---------------------------------------------------------------

@dataclass(frozen=True)
class ExpertRecord:
    task_id: int
    genome: ArchGenome
    class_ids: tuple[int, ...]
    val_error: float
    param_count: int
    network: NetworkInstance = dataclasses.field(compare=False, repr=False)
    weights_digest: str = ""
    weights_path: str | None = None

    def verify(self) -> bool:
        """True while the stored weights still match their archive-time digest."""
        return weights_digest(self.network) == self.weights_digest


class ExpertArchive:
    def __init__(self, records: Sequence[ExpertRecord] = ()):
        self.records: list[ExpertRecord] = []
        for r in records:
            self.append(r)

    def append(self, record: ExpertRecord) -> None:
        if record.task_id != len(self.records):
            raise PopulationStateError(
                f"expert for task {record.task_id} archived out of order (expected {len(self.records)})"
            )
        self.records.append(record)

    def get(self, task_id: int) -> ExpertRecord:
        if not 0 <= task_id < len(self.records):
            raise UnknownTaskError(f"no expert archived for task {task_id}")
        return self.records[task_id]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def total_params(self) -> int:
        return sum(r.param_count for r in self.records)


def train_expert(genome: ArchGenome, task: TaskSpec, cfg: EclConfig, seed: int) -> ExpertRecord:
    net = instantiate(genome, net_for_task(cfg.full_net, task), seed)
    net, val_error = train(net, task.local("train"), task.local("val"), cfg.full_schedule, seed)
    freeze(net)
    return ExpertRecord(
        task_id=task.task_id,
        genome=genome,
        class_ids=task.class_ids,
        val_error=val_error,
        param_count=net.param_count,
        network=net,
        weights_digest=weights_digest(net),
    )


# -- evolution -------------------------------------------------------------

def _evaluate_members(members: Sequence[Individual], evaluator: FitnessEvaluator, task: TaskSpec,
                      seeds: Sequence[int], threads: int = 1) -> None:
    todo = [(ind, s) for ind, s in zip(members, seeds) if ind.fitness is None]

    def run(item):
        ind, seed = item
        try:
            return evaluator.evaluate(ind.genome, task, seed)
        except Exception as exc:  # noqa: BLE001 - any failing candidate gets worst error
            log.warning("evaluation failed for genome %s: %s", genome_hash(ind.genome), exc)
            return Fitness(1.0, evaluator.param_count(ind.genome, task))

    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, todo))
    else:
        results = [run(item) for item in todo]
    for (ind, _), fit in zip(todo, results):
        ind.fitness = fit


def make_offspring(parents: Sequence[Individual], rates: MutationRates, keys: Sequence[int]) -> list[Individual]:
    """Pair parents in order; each pair yields two mutated crossover children.

    Children that fall outside the genome space are regenerated from the same
    parents with the next seed stream.
    """
    children: list[Individual] = []
    for k in range(0, len(parents) - 1, 2):
        a, b = parents[k].genome, parents[k + 1].genome
        for attempt in range(MAX_OFFSPRING_ATTEMPTS):
            try:
                c1, c2 = crossover(a, b, derive_seed(*keys, k, _CROSS, attempt))
                c1 = mutate(c1, rates, derive_seed(*keys, k, _MUTATE, attempt, 0))
                c2 = mutate(c2, rates, derive_seed(*keys, k, _MUTATE, attempt, 1))
                break
            except InvariantViolationError:
                continue
        else:
            c1, c2 = a, b
        children += [Individual(c1), Individual(c2)]
    if len(parents) % 2:
        children.append(Individual(parents[-1].genome))
    return children


def select_solution(pop: Population | Sequence[Individual]) -> Individual:
    members = list(pop)
    if not members:
        raise PopulationStateError("cannot select a solution from an empty population")
    fronts = non_dominated_sort(members)
    first = fronts[0]
    best = min(first, key=lambda i: (members[i].fitness.error_rate, members[i].fitness.param_count, i))
    return members[best]


def _front_summary(pop: Population) -> list[list]:
    return [[m.fitness.error_rate, m.fitness.param_count] for m in pop if m.rank == 0]


def run_task_evolution(pop: Population, task: TaskSpec, evaluator: FitnessEvaluator, generations: int,
                       seed: int, rates: MutationRates | None = None, threads: int = 1,
                       events: list | None = None) -> tuple[Population, Individual]:
    if generations < 1:
        raise ConfigError("generations must be at least 1")
    if len(pop) < 2:
        raise PopulationStateError("population needs at least two members")
    rates = rates or MutationRates()
    t = task.task_id
    _evaluate_members(pop.members, evaluator, task,
                      [derive_seed(seed, t, 0, i, _EVAL) for i in range(len(pop))], threads)
    assign_rank_and_crowding(pop.members)
    _log_generation(events, t, 0, pop)

    for g in range(1, generations + 1):
        rng = np.random.default_rng(derive_seed(seed, t, g, _SELECT))
        parents = [binary_tournament(pop, rng) for _ in range(pop.capacity)]
        offspring = make_offspring(parents, rates, (seed, t, g))[: pop.capacity]
        _evaluate_members(offspring, evaluator, task,
                          [derive_seed(seed, t, g, i, _EVAL) for i in range(len(offspring))], threads)
        pop = environmental_selection(pop, offspring)
        _log_generation(events, t, g, pop)
    return pop, select_solution(pop)


def _log_generation(events, task_id, generation, pop):
    best = select_solution(pop)
    log.info("task %d gen %d: best error %.4f params %d", task_id, generation,
             best.fitness.error_rate, best.fitness.param_count)
    if events is not None:
        events.append({
            "event": "generation",
            "task": task_id,
            "generation": generation,
            "best": {"error_rate": best.fitness.error_rate, "param_count": best.fitness.param_count,
                     "genome": genome_hash(best.genome)},
            "front": _front_summary(pop),
            "population": [
                {"genome": genome_hash(m.genome), "error_rate": m.fitness.error_rate,
                 "param_count": m.fitness.param_count, "rank": m.rank, "crowding": m.crowding}
                for m in pop
            ],
        })


def initial_population(cfg: EclConfig) -> Population:
    members = [Individual(random_genome(derive_seed(cfg.master_seed, _INIT, i), cfg.node_range))
               for i in range(cfg.population_size)]
    return Population(members, cfg.population_size)


def _check_stream(stream: TaskStream) -> None:
    if stream.num_tasks == 0:
        raise ConfigError("task stream is empty")
    for task in stream:
        if len(task.train) == 0 or len(task.val) == 0:
            raise ConfigError(f"task {task.task_id} has an empty train or validation split")


def expert_event(record: ExpertRecord, kind: str) -> dict:
    return {"event": kind, "task": record.task_id, "genome": genome_hash(record.genome),
            "val_error": record.val_error, "param_count": record.param_count}


def run_ecl(stream: TaskStream, cfg: EclConfig, evaluator: FitnessEvaluator | None = None,
            threads: int = 1, on_archive: Callable[[ExpertRecord], None] | None = None):
    """Run the full per-task search/train/archive loop.

    Returns ``(archive, final_population, events)``.
    """
    _check_stream(stream)
    evaluator = evaluator or make_evaluator(cfg)
    events: list[dict] = []
    archive = ExpertArchive()
    pop = initial_population(cfg)
    for task in stream:
        # Fitness is relative to the task, so inherited members are re-evaluated.
        pop = Population([m.reset() for m in pop], cfg.population_size)
        events.append({"event": "task_start", "task": task.task_id,
                       "population": [genome_hash(m.genome) for m in pop]})
        pop, best = run_task_evolution(pop, task, evaluator, cfg.generations_for(task.task_id),
                                       cfg.master_seed, cfg.mutation_rates, threads, events)
        events.append({"event": "solution", "task": task.task_id, "genome": genome_hash(best.genome),
                       "error_rate": best.fitness.error_rate, "param_count": best.fitness.param_count})
        record = train_expert(best.genome, task, cfg, derive_seed(cfg.master_seed, task.task_id, _FULL))
        archive.append(record)
        events.append(expert_event(record, "expert"))
        if on_archive is not None:
            on_archive(record)
    return archive, pop, events


def run_multi_baseline(stream: TaskStream, fixed_genome: ArchGenome, cfg: EclConfig,
                       on_archive: Callable[[ExpertRecord], None] | None = None):
    """Train one independent copy of ``fixed_genome`` per task."""
    _check_stream(stream)
    fixed_genome.validate()
    archive = ExpertArchive()
    for task in stream:
        record = train_expert(fixed_genome, task, cfg, derive_seed(cfg.master_seed, task.task_id, _FULL))
        archive.append(record)
        if on_archive is not None:
            on_archive(record)
    return archive
