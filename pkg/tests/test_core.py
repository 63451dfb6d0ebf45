import json
import logging
from collections import Counter

import pytest

from ecl.config import EclConfig, load_config
from ecl.core import (
    ExpertArchive,
    SurrogateEvaluator,
    derive_seed,
    initial_population,
    make_offspring,
    net_for_task,
    run_ecl,
    run_multi_baseline,
    run_task_evolution,
    select_solution,
    surrogate_target,
)
from ecl.errors import ConfigError, PopulationStateError, UnknownTaskError
from ecl.genome import (
    ArchGenome,
    CellGenome,
    CellKind,
    MutationRates,
    NodeGene,
    OpKind,
    random_genome,
    serialize_genome,
    uniform_genome,
)
from ecl.moea import Fitness, Individual, Population, assign_rank_and_crowding
from ecl.network import NetworkConfig, TrainSchedule, count_parameters, error_rate
from ecl.tasks import synth_stream

SMALL_NET = NetworkConfig(2, 1)


def small_cfg(**kw):
    base = dict(
        population_size=6, generations_first=3, generations_later=2,
        search_schedule=TrainSchedule(1), full_schedule=TrainSchedule(1, 0.1, 1e-5),
        search_net=SMALL_NET, full_net=SMALL_NET, evaluator="surrogate",
    )
    base.update(kw)
    return EclConfig(**base)


@pytest.fixture(scope="module")
def stream():
    return synth_stream(2, 2, 20, 4, 0.3, 0)


def best_curve(events, task):
    return [e["best"]["error_rate"] for e in events if e["event"] == "generation" and e["task"] == task]


def test_derive_seed_separates_streams():
    seeds = {derive_seed(0, t, g, i) for t in range(3) for g in range(3) for i in range(3)}
    assert len(seeds) == 27
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)


def test_surrogate_is_deterministic_with_known_optimum(stream):
    ev = SurrogateEvaluator(SMALL_NET)
    g = random_genome(3)
    assert ev.evaluate(g, stream[0], 1) == ev.evaluate(g, stream[0], 99)
    target = surrogate_target(0)
    a, b = [op for op, w in zip(list(OpKind), target) if w]

    def chain(kind):
        ops = [a, b, a, b, a, b]
        nodes = [NodeGene(ops[0], (-2, -1))] + [NodeGene(ops[i], (-1, i - 1)) for i in range(1, 6)]
        return CellGenome(kind, tuple(nodes))
    optimum = ArchGenome(chain(CellKind.NORMAL), chain(CellKind.REDUCTION))
    assert ev.evaluate(optimum, stream[0], 0).error_rate == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_surrogate_best_error_monotone(stream, seed):
    cfg = small_cfg(population_size=10, master_seed=seed)
    events = []
    run_task_evolution(initial_population(cfg), stream[0], SurrogateEvaluator(SMALL_NET), 8, seed,
                       events=events)
    curve = best_curve(events, 0)
    assert len(curve) == 9
    assert all(b <= a for a, b in zip(curve, curve[1:]))


def test_evolution_is_bit_reproducible(stream):
    def run(threads):
        events = []
        pop, best = run_task_evolution(initial_population(small_cfg()), stream[0], SurrogateEvaluator(SMALL_NET),
                                       3, 7, threads=threads, events=events)
        return json.dumps(events), serialize_genome(best.genome)
    assert run(1) == run(1)
    assert run(1) == run(4)


def test_identical_population_without_mutation_is_stationary(stream):
    g = random_genome(5)
    pop = Population([Individual(g) for _ in range(6)], 6)
    out, best = run_task_evolution(pop, stream[0], SurrogateEvaluator(SMALL_NET), 3, 0,
                                   rates=MutationRates(0, 0, 0, 0))
    assert all(m.genome == g for m in out)
    assert best.genome == g


def test_offspring_from_identical_parents_differ_only_by_mutation():
    g = random_genome(5)
    parents = [Individual(g)] * 4
    kids = make_offspring(parents, MutationRates(0, 0, 0, 0), (0, 0, 1))
    assert len(kids) == 4 and all(k.genome == g for k in kids)


def test_select_solution_examples():
    g = random_genome(0)
    def pop(*fits):
        members = [Individual(g, Fitness(e, p)) for e, p in fits]
        assign_rank_and_crowding(members)
        return members
    p = pop((0.10, 9000), (0.12, 3000))
    assert select_solution(p) is p[0]
    p = pop((0.10, 9000), (0.10, 3000))
    assert select_solution(p) is p[1]
    p = pop((0.3, 5))
    assert select_solution(p) is p[0]
    p = pop((0.2, 5), (0.2, 5))
    assert select_solution(p) is p[0]
    with pytest.raises(PopulationStateError):
        select_solution([])


def test_single_task_run(stream):
    single = synth_stream(1, 2, 20, 4, 0.3, 0)
    archive, pop, events = run_ecl(single, small_cfg())
    assert len(archive) == 1
    assert len(pop) == 6
    assert [e["event"] for e in events].count("solution") == 1
    assert len(best_curve(events, 0)) == 4


def test_run_ecl_invariants(stream):
    cfg = small_cfg()
    archived = {}
    archive, pop, events = run_ecl(stream, cfg, on_archive=lambda r: archived.setdefault(
        r.task_id, error_rate(r.network, *stream[r.task_id].local("test"))))
    assert [r.task_id for r in archive] == [0, 1]
    assert [len(best_curve(events, t)) for t in (0, 1)] == [4, 3]

    # Every generation boundary holds exactly population_size members.
    gens = [e for e in events if e["event"] == "generation"]
    assert all(len(e["population"]) == cfg.population_size for e in gens)

    # The population entering task 1 is the population that left task 0.
    last0 = [e for e in gens if e["task"] == 0][-1]
    start1 = next(e for e in events if e["event"] == "task_start" and e["task"] == 1)
    assert Counter(m["genome"] for m in last0["population"]) == Counter(start1["population"])

    # Ledger matches the arithmetic count under the full network config.
    expected = sum(count_parameters(r.genome, net_for_task(cfg.full_net, stream[r.task_id])) for r in archive)
    assert archive.total_params == expected

    # Archived experts are untouched by later tasks.
    for r in archive:
        assert r.verify()
        assert error_rate(r.network, *stream[r.task_id].local("test")) == archived[r.task_id]


def test_run_ecl_is_deterministic(stream):
    a, _, ea = run_ecl(stream, small_cfg())
    b, _, eb = run_ecl(stream, small_cfg())
    assert [serialize_genome(r.genome) for r in a] == [serialize_genome(r.genome) for r in b]
    assert [(r.param_count, r.val_error, r.weights_digest) for r in a] == \
           [(r.param_count, r.val_error, r.weights_digest) for r in b]
    assert ea == eb


def test_evaluator_failure_assigns_worst_error(stream, caplog):
    bad = random_genome(1)

    class Flaky(SurrogateEvaluator):
        def evaluate(self, genome, task, seed):
            if genome == bad:
                raise FloatingPointError("diverged")
            return super().evaluate(genome, task, seed)

    ev = Flaky(SMALL_NET)
    pop = Population([Individual(bad), Individual(random_genome(2))], 2)
    with caplog.at_level(logging.WARNING, logger="ecl.core"):
        out, _ = run_task_evolution(pop, stream[0], ev, 1, 0, rates=MutationRates(0, 0, 0, 0))
    assert any("evaluation failed" in r.message for r in caplog.records)
    failed = [m for m in out if m.genome == bad]
    for m in failed:
        assert m.fitness == Fitness(1.0, ev.param_count(bad, stream[0]))


def test_evolution_preconditions(stream):
    pop = initial_population(small_cfg())
    with pytest.raises(ConfigError):
        run_task_evolution(pop, stream[0], SurrogateEvaluator(SMALL_NET), 0, 0)


def test_empty_train_split_rejected_before_training():
    s = synth_stream(1, 2, 1, 4, 0.3, 0)  # one sample per class lands entirely in test
    with pytest.raises(ConfigError):
        run_ecl(s, small_cfg())


def test_baseline_shares_one_genome(stream):
    g = uniform_genome(OpKind.IDENTITY)
    archive = run_multi_baseline(stream, g, small_cfg())
    assert len(archive) == stream.num_tasks
    assert len({serialize_genome(r.genome) for r in archive}) == 1
    assert all(r.verify() for r in archive)


def test_archive_order_and_lookup(stream):
    archive = run_multi_baseline(stream, random_genome(0), small_cfg())
    with pytest.raises(UnknownTaskError):
        archive.get(5)
    fresh = ExpertArchive()
    with pytest.raises(PopulationStateError):
        fresh.append(archive.get(1))


def test_config_round_trip_and_strictness(tmp_path):
    cfg = small_cfg(master_seed=3)
    assert EclConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg
    data = cfg.to_dict()
    data["populaton_size"] = 4
    with pytest.raises(ConfigError, match="populaton_size"):
        EclConfig.from_dict(data)
    data = cfg.to_dict()
    data["search_net"]["width"] = 4
    with pytest.raises(ConfigError):
        EclConfig.from_dict(data)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        EclConfig(population_size=1)


def test_paper_defaults():
    cfg = EclConfig()
    assert (cfg.population_size, cfg.generations_first, cfg.generations_later) == (20, 10, 5)
    assert (cfg.search_schedule.epochs, cfg.search_schedule.lr_init, cfg.search_schedule.lr_min) == (10, 0.1, 0.001)
    assert (cfg.full_schedule.epochs, cfg.full_schedule.lr_min) == (200, 1e-5)
    assert (cfg.search_net.initial_channels, cfg.search_net.n_repeat) == (16, 1)
    assert (cfg.full_net.initial_channels, cfg.full_net.n_repeat) == (64, 3)
    assert (cfg.full_schedule.momentum, cfg.full_schedule.weight_decay) == (0.9, 5e-4)


@pytest.mark.parametrize("seed", range(5))
def test_first_front_never_regresses(stream, seed):
    events = []
    run_task_evolution(initial_population(small_cfg(population_size=8)), stream[1],
                       SurrogateEvaluator(SMALL_NET), 10, seed, events=events)
    fronts = [[tuple(v) for v in e["front"]] for e in events if e["event"] == "generation"]
    for old, new in zip(fronts, fronts[1:]):
        for e, p in old:
            assert any(e2 <= e and p2 <= p for e2, p2 in new)
