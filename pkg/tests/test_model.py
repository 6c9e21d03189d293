import math

import numpy as np
import pytest

from erapt.model import (
    BACKBONES,
    LINEAR,
    TANH,
    ModelInitSpec,
    PromptedClassifier,
    dumps_model,
    forward,
    frozen_checksum,
    grad_input_ce,
    grad_input_kl,
    grad_prompt_ce,
    grad_prompt_kl,
    init_model,
    loads_model,
    loss_ce,
    loss_kl,
    predict,
)
from erapt.numcore import finite_diff_gradient

from oracles import mp_ce, mp_kl, rel_err


def random_model(seed, kind, tau=None, dims=(3, 4, 5, 3)):
    r = np.random.default_rng(seed)
    if tau is None:
        tau = float(np.exp(r.uniform(math.log(0.07), math.log(2.0))))
    m = init_model(ModelInitSpec(*dims, backbone_kind=kind, init_seed=seed, tau_logit=tau))
    return m.with_prompt(r.normal(size=dims[1]) * 0.5), r


def test_init_deterministic_and_shapes():
    spec = ModelInitSpec(2, 3, 4, 3, TANH, init_seed=7)
    a, b = init_model(spec), init_model(spec)
    assert frozen_checksum(a) == frozen_checksum(b)
    np.testing.assert_array_equal(a.W_hidden, b.W_hidden)
    np.testing.assert_array_equal(a.prompt, np.zeros(3))
    assert a.prototypes.shape == (3, 4)
    assert init_model(ModelInitSpec(2, 3, 4, 3, LINEAR)).W_hidden is None


def test_frozen_arrays_are_read_only():
    m = init_model(ModelInitSpec(2, 3, 4, 2))
    with pytest.raises(ValueError):
        m.W_in[0, 0] = 1.0


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelInitSpec(0, 1, 1, 1)
    with pytest.raises(ValueError):
        ModelInitSpec(1, 1, 1, 1, backbone_kind="mlp")
    with pytest.raises(ValueError):
        ModelInitSpec(1, 1, 1, 1, tau_logit=0.0)


def test_forward_matches_scalar_rederivation():
    m = init_model(ModelInitSpec(2, 2, 2, 2, LINEAR, init_seed=3)).with_prompt([0.3, -0.2])
    x = [0.7, -1.1]
    z = [sum(m.W_in[i][k] * x[k] for k in range(2)) + sum(m.W_prompt[i][k] * m.prompt[k] for k in range(2))
         for i in range(2)]
    nz = math.hypot(*z)
    logits = []
    for c in m.prototypes:
        logits.append((z[0] * c[0] + z[1] * c[1]) / (nz * math.hypot(*c)) / m.tau_logit)
    e = [math.exp(v) for v in logits]
    probs = [v / sum(e) for v in e]
    feats, lg, pr = forward(m, x)
    np.testing.assert_allclose(feats, z, rtol=1e-14)
    np.testing.assert_allclose(lg, logits, rtol=1e-13)
    np.testing.assert_allclose(pr, probs, rtol=1e-12)


def test_equal_prototypes_give_equal_logits():
    m = init_model(ModelInitSpec(2, 2, 3, 3, TANH, init_seed=1))
    protos = m.prototypes.copy()
    protos[2] = protos[0]
    m2 = PromptedClassifier(m.backbone_kind, m.W_in, m.W_prompt, protos, m.prompt, m.tau_logit, m.W_hidden)
    _, lg, _ = forward(m2, [0.4, 0.9])
    assert lg[0] == lg[2]


@pytest.mark.parametrize("kind", BACKBONES)
def test_tau_scaling(kind):
    m, r = random_model(0, kind, tau=0.2)
    X = r.normal(size=(50, 3))
    _, lg, _ = forward(m, X)
    _, lg_half, _ = forward(m.with_tau(0.1), X)
    np.testing.assert_allclose(lg_half, 2 * lg, rtol=1e-14)
    for c in (0.1, 0.5, 3.0, 17.0):
        np.testing.assert_array_equal(predict(m.with_tau(0.2 * c), X), predict(m, X))
    assert loss_ce(m.with_tau(0.4), X[0], 1) != loss_ce(m, X[0], 1)


@pytest.mark.parametrize("kind", BACKBONES)
def test_logits_bounded(kind):
    m, r = random_model(5, kind)
    _, lg, _ = forward(m, r.normal(size=(200, 3)) * 5)
    assert np.all(np.abs(lg) <= 1 / m.tau_logit + 1e-12)


def test_zero_feature_norm_is_error():
    m = init_model(ModelInitSpec(1, 1, 2, 2, LINEAR))
    with pytest.raises(ValueError, match="zero norm"):
        forward(m, [0.0])


def test_dimension_mismatch():
    m = init_model(ModelInitSpec(2, 1, 2, 2))
    with pytest.raises(ValueError):
        forward(m, [1.0, 2.0, 3.0])


def test_single_class_has_zero_loss_and_gradients():
    m = init_model(ModelInitSpec(2, 2, 3, 1, TANH, init_seed=2))
    x = np.array([0.5, -0.3])
    assert loss_ce(m, x, 0) == 0.0
    np.testing.assert_array_equal(grad_input_ce(m, x, 0), 0.0)
    np.testing.assert_array_equal(grad_prompt_ce(m, x, 0), 0.0)


@pytest.mark.parametrize("kind", BACKBONES)
@pytest.mark.parametrize("seed", range(10))
def test_ce_gradients_against_fd(kind, seed):
    m, r = random_model(seed, kind)
    x = r.normal(size=3)
    y = int(r.integers(3))
    g = finite_diff_gradient(lambda v: mp_ce(m, v, y), x)
    assert rel_err(grad_input_ce(m, x, y), g) < 1e-6
    g = finite_diff_gradient(lambda p: mp_ce(m, x, y, p), m.prompt)
    assert rel_err(grad_prompt_ce(m, x, y), g) < 1e-6


@pytest.mark.parametrize("kind", BACKBONES)
@pytest.mark.parametrize("seed", range(10))
def test_kl_gradients_against_fd(kind, seed):
    m, r = random_model(100 + seed, kind)
    x = r.normal(size=3)
    xa = x + r.uniform(-1, 1, 3)
    g = finite_diff_gradient(lambda v: mp_kl(m, x, v), xa)
    assert rel_err(grad_input_kl(m, x, xa), g) < 1e-6
    g = finite_diff_gradient(lambda p: mp_kl(m, x, xa, p), m.prompt)
    assert rel_err(grad_prompt_kl(m, x, xa), g) < 1e-6


@pytest.mark.parametrize("kind", BACKBONES)
def test_ce_gradient_double_precision_fd(kind):
    # the plain double-precision oracle is informative away from saturation
    m, r = random_model(3, kind, tau=0.5)
    x = r.normal(size=3)
    g = finite_diff_gradient(lambda v: loss_ce(m, v, 0), x)
    assert rel_err(grad_input_ce(m, x, 0), g) < 1e-6


@pytest.mark.parametrize("kind", BACKBONES)
def test_kl_minimum_at_identical_inputs(kind):
    m, r = random_model(4, kind)
    x = r.normal(size=3)
    assert loss_kl(m, x, x) == 0.0
    assert np.linalg.norm(grad_input_kl(m, x, x)) < 1e-9


def test_kl_positive_when_prediction_flips():
    m = init_model(ModelInitSpec(2, 2, 4, 2, LINEAR, init_seed=8))
    X = np.random.default_rng(0).normal(size=(400, 2)) * 3
    pred = predict(m, X)
    a = X[np.flatnonzero(pred == 0)[0]]
    b = X[np.flatnonzero(pred == 1)[0]]
    assert loss_kl(m, a, b) > 0


def test_batched_losses_match_rowwise():
    m, r = random_model(9, TANH)
    X = r.normal(size=(6, 3))
    losses = loss_ce(m, X, 2)
    for i in range(6):
        assert losses[i] == pytest.approx(loss_ce(m, X[i], 2), rel=1e-13)


@pytest.mark.parametrize("kind", BACKBONES)
def test_serialization_round_trip_bit_exact(kind):
    m, _ = random_model(12, kind)
    m2 = loads_model(dumps_model(m))
    assert frozen_checksum(m2) == frozen_checksum(m)
    np.testing.assert_array_equal(m2.prompt, m.prompt)
    assert dumps_model(m2) == dumps_model(m)


def test_serialization_missing_key():
    text = dumps_model(init_model(ModelInitSpec(1, 1, 2, 2)))
    bad = "\n".join(l for l in text.splitlines() if not l.startswith("prompt"))
    with pytest.raises(ValueError, match="prompt"):
        loads_model(bad)
