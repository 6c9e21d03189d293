import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erapt.attack import PerturbationBall, pgd_step
from erapt.evolution import (
    CROSSOVER,
    MUTATED,
    SELECTED,
    EvolutionConfig,
    Population,
    _pair,
    crossover,
    dump_trace,
    evaluate_fitness,
    evolve_iteration,
    final_selected,
    init_population,
    mutate,
    run_evolution,
    select_top_third,
    top_third_indices,
)
from erapt.model import LINEAR, TANH, ModelInitSpec, PromptedClassifier, init_model, loss_ce, predict
from erapt.numcore import RandomStream

from oracles import brute_top_third, corner_max_ce

BALL = PerturbationBall(0.1)


def model2(kind=TANH, seed=0):
    return init_model(ModelInitSpec(2, 3, 6, 3, kind, init_seed=seed))


def fresh(fitness, dim=2):
    n = len(fitness)
    return Population(np.zeros((n, dim)), BALL, fitness=np.asarray(fitness, dtype=float))


def test_config_validation():
    with pytest.raises(ValueError, match="evolution.N"):
        EvolutionConfig(N=10)
    with pytest.raises(ValueError, match="evolution.N"):
        EvolutionConfig(N=3)
    EvolutionConfig(N=6)
    with pytest.raises(ValueError):
        EvolutionConfig(iterations=0)
    with pytest.raises(ValueError):
        EvolutionConfig(phi=1.5)


def test_init_population():
    cfg = EvolutionConfig(N=9)
    pop = init_population(cfg, BALL, 4, RandomStream(1))
    assert pop.size == 9 and pop.deltas.shape == (9, 4)
    assert np.max(np.abs(pop.deltas)) <= 0.1
    assert not pop.fresh
    again = init_population(cfg, BALL, 4, RandomStream(1))
    np.testing.assert_array_equal(pop.deltas, again.deltas)
    tiny = init_population(cfg, PerturbationBall(1e-300), 4, RandomStream(1))
    assert np.max(np.abs(tiny.deltas)) <= 1e-300
    zero = init_population(EvolutionConfig(N=9, init="zero"), BALL, 4, RandomStream(1))
    np.testing.assert_array_equal(zero.deltas, 0.0)


def test_fitness_matches_independent_recompute():
    m = model2()
    x, y = np.array([0.2, -0.5]), 1
    pop = evaluate_fitness(init_population(EvolutionConfig(), BALL, 2, RandomStream(4)), m, x, y)
    assert pop.fresh
    for d, f in zip(pop.deltas, pop.fitness):
        assert f == pytest.approx(loss_ce(m, x + d, y), rel=1e-13)


def test_identical_members_identical_fitness():
    m = model2()
    pop = Population(np.tile([0.03, -0.01], (6, 1)), BALL)
    f = evaluate_fitness(pop, m, [0.1, 0.1], 0).fitness
    assert np.all(f == f[0])


def test_misclassifying_delta_has_larger_fitness():
    # features z = (x, 1); label 0 is the x axis, so x = 2 is correct and x = 0.5 is not
    m = PromptedClassifier(LINEAR, np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]),
                           np.eye(2), np.array([1.0]), 1.0)
    x = np.array([2.0])
    pop = Population(np.array([[0.0], [-1.5], [0.0]]), PerturbationBall(1.5))
    assert predict(m, x) == 0 and predict(m, x - 1.5) == 1
    f = evaluate_fitness(pop, m, x, 0).fitness
    assert f[1] > f[0]


def test_selection_example():
    sel = select_top_third(fresh([3.0, 1.0, 2.0, 0.5, 2.5, 0.1, 0.2, 0.3, 0.4]))
    assert sel.origin == [0, 4, 2]
    np.testing.assert_array_equal(sel.fitness, [3.0, 2.5, 2.0])
    assert sel.tags == [SELECTED] * 3
    assert select_top_third(fresh([1.0] * 9)).origin == [0, 1, 2]


def test_selection_requires_fresh_fitness():
    with pytest.raises(ValueError):
        select_top_third(Population(np.zeros((9, 2)), BALL))


@settings(max_examples=300)
@given(st.integers(2, 8).flatmap(lambda k: st.lists(st.sampled_from([0.0, 0.5, 1.0, 2.0, -1.0]) | st.floats(-5, 5),
                                                     min_size=3 * k, max_size=3 * k)))
def test_selection_matches_sort(fit):
    idx = top_third_indices(fit)
    assert list(idx) == brute_top_third(fit)
    assert np.mean(np.asarray(fit)[idx]) >= np.mean(fit) - 1e-12


def test_mutate():
    sel = Population(np.array([[0.05, -0.09], [0.1, 0.0]]), BALL)
    same = mutate(sel, 0.0, RandomStream(1))
    np.testing.assert_array_equal(same.deltas, sel.deltas)
    for s in range(50):
        m = mutate(sel, 0.1, RandomStream(s))
        assert np.max(np.abs(m.deltas)) <= 0.1
        assert m.tags == [MUTATED] * 2
    # before projection the noise is bounded by phi * eps; check on interior members
    inner = Population(np.zeros((3, 5)), BALL)
    m = mutate(inner, 0.1, RandomStream(7))
    assert np.max(np.abs(m.deltas)) <= 0.1 * 0.1


def test_pair_enumeration_covers_all_pairs():
    for m in range(2, 7):
        pairs = [_pair(k, m) for k in range(m * (m - 1) // 2)]
        assert len(set(pairs)) == len(pairs)
        assert all(i < j < m for i, j in pairs)
    with pytest.raises(IndexError):
        _pair(3, 3)


def test_crossover_endpoints_and_midpoint():
    a, b = np.array([0.5, -0.5]), np.array([-0.5, 0.5])
    lerp = lambda lam: b + lam * (a - b)
    np.testing.assert_array_equal(lerp(0.0), b)
    np.testing.assert_allclose(lerp(1.0), a, atol=1e-16)
    np.testing.assert_array_equal(lerp(0.5), [0.0, 0.0])


def test_crossover_children_are_convex_combinations():
    ball = PerturbationBall(0.5)
    sel = Population(np.array([[0.5, -0.5], [-0.5, 0.5], [0.2, 0.2]]), ball)
    for s in range(30):
        c = crossover(sel, RandomStream(s))
        assert c.size == 3 and c.tags == [CROSSOVER] * 3
        assert np.max(np.abs(c.deltas)) <= 0.5
        # each child lies on the segment between two distinct parents
        for child in c.deltas:
            ok = False
            for i in range(3):
                for j in range(i + 1, 3):
                    d = sel.deltas[i] - sel.deltas[j]
                    lam = np.dot(child - sel.deltas[j], d) / np.dot(d, d)
                    if -1e-12 <= lam <= 1 + 1e-12 and np.allclose(sel.deltas[j] + lam * d, child, atol=1e-14):
                        ok = True
            assert ok


def test_crossover_of_identical_parents_is_exact():
    d = np.array([0.0123456789, -0.0987654321])
    sel = Population(np.tile(d, (3, 1)), BALL)
    np.testing.assert_array_equal(crossover(sel, RandomStream(2)).deltas, np.tile(d, (3, 1)))


def test_crossover_needs_two_parents():
    with pytest.raises(ValueError):
        crossover(Population(np.zeros((1, 2)), BALL), RandomStream(0))


def test_evolve_iteration_shape_order_and_elitism():
    m = model2()
    x, y = np.array([0.3, 0.3]), 0
    cfg = EvolutionConfig(N=9, phi=0.1, iterations=1, step_size=0.03)
    pop = init_population(cfg, BALL, 2, RandomStream(5))
    trace = []
    new = evolve_iteration(pop, m, x, y, BALL, cfg, RandomStream(6), trace)
    assert new.size == 9 and not new.fresh
    assert new.tags == [SELECTED] * 3 + [MUTATED] * 3 + [CROSSOVER] * 3
    assert np.max(np.abs(new.deltas)) <= 0.1
    stepped = pgd_step(m, x, y, pop.deltas, BALL, 0.03)
    best = stepped[int(np.argmax(trace[0]["fitness"]))]
    np.testing.assert_array_equal(new.deltas[0], best)
    assert trace[0]["selected_fitness"][0] == max(trace[0]["fitness"])


def test_evolve_deterministic():
    m = model2(seed=3)
    cfg = EvolutionConfig(N=12, iterations=3, step_size=0.02)
    a = run_evolution(m, [0.1, -0.2], 2, BALL, cfg, RandomStream(8))
    b = run_evolution(m, [0.1, -0.2], 2, BALL, cfg, RandomStream(8))
    np.testing.assert_array_equal(a.deltas, b.deltas)


@pytest.mark.parametrize("seed", range(10))
def test_post_pgd_fitness_below_corner_max(seed):
    r = np.random.default_rng(seed)
    m = init_model(ModelInitSpec(2, 2, 3, 2, LINEAR, init_seed=seed)).with_prompt(r.normal(size=2))
    x, y = r.normal(size=2), int(r.integers(2))
    eps = 0.05
    ball = PerturbationBall(eps)
    trace = []
    run_evolution(m, x, y, ball, EvolutionConfig(9, 0.1, 3, eps / 2), RandomStream(seed), trace)
    cap = corner_max_ce(m, x, y, eps)
    for rec in trace:
        assert max(rec["fitness"]) <= cap + 1e-12


def test_final_selected_definition():
    m = model2(seed=1)
    x, y = np.array([0.0, 0.4]), 1
    pop = run_evolution(m, x, y, BALL, EvolutionConfig(iterations=2, step_size=0.05), RandomStream(3))
    fs = final_selected(pop, m, x, y)
    ref = select_top_third(evaluate_fitness(pop, m, x, y))
    np.testing.assert_array_equal(fs.deltas, ref.deltas)
    assert fs.size == 3
    assert np.all(np.diff(fs.fitness) <= 0)


def test_trace_dump(tmp_path):
    m = model2()
    trace = []
    run_evolution(m, [0.1, 0.2], 0, BALL, EvolutionConfig(iterations=2, step_size=0.05), RandomStream(1), trace)
    p = tmp_path / "trace.jsonl"
    dump_trace(trace, p)
    recs = [json.loads(l) for l in p.read_text().splitlines()]
    assert [r["iteration"] for r in recs] == [1, 2]
    assert recs[1]["tags"] == ["selected"] * 3 + ["mutated"] * 3 + ["crossover"] * 3
