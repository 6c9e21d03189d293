import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erapt.attack import AttackConfig, PerturbationBall
from erapt.dataio import LabeledDataset, gen_two_moons
from erapt.evolution import EvolutionConfig, run_evolution
from erapt.evaluation import (
    accuracy,
    lipschitz_estimate,
    per_class_accuracy,
    robust_accuracy,
    robustness_report,
    verify_theorem,
)
from erapt.model import LINEAR, TANH, ModelInitSpec, PromptedClassifier, grad_input_ce, init_model, loss_ce, predict
from erapt.numcore import RandomStream


def one_d_model(prompt=1.0):
    # features (x, p); label 0 along the first axis
    return PromptedClassifier(LINEAR, np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]),
                              np.eye(2), np.array([prompt]), 1.0)


def moons_model(seed=0):
    return init_model(ModelInitSpec(2, 3, 8, 2, TANH, init_seed=seed, tau_logit=0.2))


def test_accuracy_examples():
    m = one_d_model()
    data = LabeledDataset(np.array([[2.0], [3.0], [0.5], [-1.0]]), np.array([0, 0, 0, 1]), 2)
    # predictions: 0, 0, 1, 1
    assert accuracy(m, data) == 0.75
    assert per_class_accuracy(m, data) == [2 / 3, 1.0]
    all_right = LabeledDataset(data.inputs, predict(m, data.inputs), 2)
    assert accuracy(m, all_right) == 1.0
    with pytest.raises(ValueError):
        accuracy(m, LabeledDataset(np.zeros((0, 1)), np.zeros(0, dtype=int), 2))


def test_robust_accuracy_examples():
    m = one_d_model()
    # the boundary is x = 1: both points survive a 0.5 ball, only x = 2 survives 0.9
    data = LabeledDataset(np.array([[2.0], [1.6]]), np.array([0, 0]), 2)
    atk = AttackConfig(5, 0.2)
    assert robust_accuracy(m, data, PerturbationBall(0.5), atk) == 1.0
    assert robust_accuracy(m, data, PerturbationBall(0.5 + 1e-9), AttackConfig(10, 0.1)) == 1.0
    assert robust_accuracy(m, data, PerturbationBall(0.9), atk) == 0.5


def test_robust_bounded_by_natural_and_tiny_eps():
    data = gen_two_moons(40, 0.1, RandomStream(3))
    m = moons_model(1)
    nat = accuracy(m, data)
    assert robust_accuracy(m, data, PerturbationBall(1e-12), AttackConfig(5, 1e-12)) == nat
    for eps in (0.01, 0.1, 0.5):
        assert robust_accuracy(m, data, PerturbationBall(eps), AttackConfig(10, eps / 4)) <= nat


def test_robust_monotone_in_epsilon():
    data = gen_two_moons(40, 0.1, RandomStream(3))
    m = moons_model(2)
    # same relative schedule: a larger ball contains every trajectory of the smaller one's scaled attack
    vals = [robust_accuracy(m, data, PerturbationBall(e), AttackConfig(20, e / 4)) for e in (0.02, 0.1, 0.3, 1.0)]
    assert all(a >= b - 0.05 for a, b in zip(vals, vals[1:]))
    assert vals[0] >= vals[-1]


def test_report():
    data = gen_two_moons(10, 0.1, RandomStream(3))
    m = moons_model()
    r = robustness_report(m, data, None, None)
    assert r.robust_acc == r.natural_acc and r.attack_steps == 0
    r = robustness_report(m, data, PerturbationBall(0.1), AttackConfig(3, 0.05))
    d = json.loads(r.to_json())
    assert d["attack_steps"] == 3 and len(d["per_class_acc"]) == 2
    with pytest.raises(ValueError):
        robust_accuracy(m, data, PerturbationBall(0.1), AttackConfig(3, 0.05, True))


def test_lipschitz_estimate_examples():
    pts = np.array([[0.0], [1.0], [3.0]])
    assert lipschitz_estimate(pts, np.array([0.0, 2.0, 3.0])) == 2.0
    assert lipschitz_estimate(pts, np.zeros(3)) == 0.0
    # coincident points use the distance floor
    assert lipschitz_estimate(np.zeros((2, 1)), np.array([0.0, 1e-12])) == pytest.approx(1e-3)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 3.0), st.floats(0.05, 0.4), st.integers(0, 1000))
def test_lipschitz_below_gradient_bound(x0, eps, seed):
    # secant slopes cannot exceed the largest derivative on the segment
    m = one_d_model(0.7)
    grid = np.linspace(x0 - eps, x0 + eps, 4001)
    gmax = max(abs(float(grad_input_ce(m, [v], 1)[0])) for v in grid)
    pts = RandomStream(seed).uniform(-eps, eps, (200, 1))
    L = lipschitz_estimate(pts, np.atleast_1d(loss_ce(m, x0 + pts, 1)))
    assert L <= gmax * (1 + 1e-3)


def test_theorem_constant_model():
    # zero prompt in 1-D: the loss is scale invariant, so it is constant for x > 0
    m = init_model(ModelInitSpec(1, 1, 2, 2, LINEAR, init_seed=0))
    x = np.array([1.0])
    ball = PerturbationBall(0.5)
    pop = np.linspace(-0.5, 0.5, 11)[:, None]
    r = verify_theorem(m, x, 0, pop, ball, 1000, RandomStream(1))
    assert r.violation_rate == 0.0
    assert r.L_hat <= 1e-6
    assert r.gamma == pytest.approx(loss_ce(m, x, 0), rel=1e-12)


def test_theorem_gamma_is_population_mean():
    m = moons_model(3)
    x = np.array([0.2, 0.4])
    ball = PerturbationBall(0.1)
    pop = run_evolution(m, x, 1, ball, EvolutionConfig(9, 0.1, 2, 0.05), RandomStream(2))
    r = verify_theorem(m, x, 1, pop, ball, 200, RandomStream(4))
    assert r.gamma == pytest.approx(np.mean(loss_ce(m, x + pop.deltas, 1)), rel=1e-14)
    assert 0 <= r.eta_cover <= 0.2 and r.L_hat >= 0
    assert r.bound == r.gamma + r.L_hat * r.eta_cover
    assert not r.degenerate


def test_theorem_cover_radius_shrinks_with_more_members():
    m = moons_model(3)
    x = np.array([0.2, 0.4])
    ball = PerturbationBall(0.1)
    s = RandomStream(9).uniform(-0.1, 0.1, (30, 2))
    etas = [verify_theorem(m, x, 0, s[:k], ball, 300, RandomStream(5)).eta_cover for k in (3, 10, 30)]
    assert etas[0] >= etas[1] >= etas[2]


def test_theorem_degenerate_flag_and_sample_minimum():
    m = moons_model()
    ball = PerturbationBall(0.1)
    r = verify_theorem(m, [0.1, 0.1], 0, np.zeros((6, 2)), ball, 100, RandomStream(0))
    assert r.degenerate
    with pytest.raises(ValueError):
        verify_theorem(m, [0.1, 0.1], 0, np.zeros((6, 2)), ball, 99, RandomStream(0))
    json.loads(r.to_json())
