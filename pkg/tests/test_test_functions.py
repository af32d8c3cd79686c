import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from witness_lab.benchmarks import build_mab_tree_family
from witness_lab.cdp import conditional
from witness_lab.errors import StructureError
from witness_lab.misfit import witnessed_misfit_exact
from witness_lab.random_models import random_class
from witness_lab.rng import stream
from witness_lab.test_functions import (
    ExpFamilyClass,
    FiniteClass,
    TvBall,
    WitnessFunction,
    bellman_class,
    bellman_function,
    build_scheffe_class,
    cells_supremum,
    expfam_supremum,
    factored_supremum,
    tv_supremum,
)

from conftest import chain_model


def test_bellman_function_of_zero_reward_model_is_reward():
    m = chain_model(H=2)
    zero = type(m)(2, 2, m.initial, m.transitions, m.reward_values,
                   tuple(np.stack([np.ones((1, 2)), np.zeros((1, 2))], -1) for _ in range(2)))
    f = bellman_function(zero)
    for h in (1, 2):
        assert np.allclose(np.broadcast_to(f.at(h), (1, 2, 2, 1))[0, 0, :, 0], m.reward_values)


def test_bellman_function_on_two_level_bandit():
    eps = 0.1
    fam, ti = build_mab_tree_family(2, 2, eps)
    truth = fam[ti]
    f = bellman_function(truth)
    cond = conditional(truth, 1, truth.reward_values)
    expected = (np.broadcast_to(f.at(1), cond.shape) * cond).sum(axis=(2, 3))[0]
    assert sorted(expected.round(12)) == pytest.approx([0.5, 0.5 + eps])


def test_tv_examples():
    assert tv_supremum([0.2, 0.8], [0.2, 0.8])[0] == 0.0
    assert tv_supremum([1.0, 0.0, 0.0], [0.0, 0.0, 1.0])[0] == 2.0
    value, sign = tv_supremum([0.7, 0.3], [0.4, 0.6])
    assert value == pytest.approx(0.6)
    assert np.array_equal(sign, [1.0, -1.0])


def test_tv_support_mismatch():
    with pytest.raises(StructureError):
        tv_supremum([1.0], [0.5, 0.5])


def test_factored_and_expfam_suprema():
    assert factored_supremum([0.0, 0.0]) == 0.0
    assert factored_supremum([0.6, 0.8]) == pytest.approx(1.4)
    assert expfam_supremum([0.0, 0.0]) == 0.0
    assert expfam_supremum([3.0, 4.0]) == pytest.approx(5.0)
    with pytest.raises(StructureError):
        factored_supremum([0.1, -0.2])


def test_scheffe_class_size_bound():
    models, _ = random_class(stream(1, "sch-size"), 2, 2, 2, 3)
    sc = build_scheffe_class(models)
    assert sc.size() <= 16
    assert sc.size() <= 2 * len(models) ** 3 * 2


def test_scheffe_singleton_class_is_zero():
    models, _ = random_class(stream(2, "sch-one"), 1, 3, 2, 3)
    sc = build_scheffe_class(models)
    assert all(f.sup_norm() == 0.0 for f in sc.functions)
    for h in range(1, 4):
        assert witnessed_misfit_exact(models[0], models[0], models[0], h, sc) == 0.0


def test_finite_class_closes_under_negation():
    models, _ = random_class(stream(3, "neg"), 3, 2, 2, 3)
    F = bellman_class(models)
    assert F.is_symmetric
    D = stream(3, "D").normal(size=(models[0].level_sizes[0], 2, 2, models[0].level_sizes[1]))
    vals = F.values(D, 1)
    assert np.isclose(F.supremum(D, 1)[0], np.abs(vals).max())


def test_finite_class_round_trip():
    models, _ = random_class(stream(4, "rt"), 2, 2, 2, 3)
    F = bellman_class(models)
    G = FiniteClass.from_dict(F.to_dict())
    D = stream(4, "D").normal(size=(models[0].level_sizes[1], 2, 2, models[0].level_sizes[2]))
    assert G.supremum(D, 2)[0] == pytest.approx(F.supremum(D, 2)[0])


def test_norm_bound_is_enforced():
    rv = np.array([0.0, 1.0])
    big = WitnessFunction((np.full((1, 1, 2, 1), 3.0),), rv)
    with pytest.raises(StructureError):
        FiniteClass([big], norm_bound=2.0)


def test_expfam_class_supremum_is_norm_per_pair():
    F = ExpFamilyClass([np.eye(2).reshape(1, 2, 2)])
    D = np.zeros((1, 1, 1, 2))
    D[0, 0, 0] = [0.3, -0.3]
    assert F.supremum(D, 1)[0] == pytest.approx(np.hypot(0.3, 0.3))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(0.01, 1.0)), arrays(np.float64, 6, elements=st.floats(0.01, 1.0)))
def test_tv_is_a_metric_on_distributions(p, q):
    p, q = p / p.sum(), q / q.sum()
    v = tv_supremum(p, q)[0]
    assert 0.0 <= v <= 2.0 + 1e-12
    assert v == pytest.approx(tv_supremum(q, p)[0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 2, 1, 3), elements=st.floats(-1, 1)))
def test_tv_ball_dominates_any_bounded_function(D):
    ball = TvBall(1)
    f = np.sign(D) * 0.5
    assert (f * D).sum() <= ball.supremum(D, 1)[0] + 1e-12
    assert TvBall(2).supremum(D, 1)[0] == pytest.approx(2 * ball.supremum(D, 1)[0])
    assert cells_supremum([D]) == pytest.approx(ball.supremum(D, 1)[0])
