import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from daftnet.metrics import (NoEventsError, SurvivalLabel, balanced_accuracy, cox_ph_loss, cross_entropy, default_tau,
                             km_censoring, uno_cindex)
from daftnet.tensor import Tensor, grad_check

from cases import cindex_instance
from oracles import cox_enumeration, g_left, g_right, ipcw_cindex_pairs, product_limit, softmax_ce


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- cross entropy ------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    assert cross_entropy(t64(np.zeros((4, 3))), [0, 1, 2, 1]).item() == pytest.approx(math.log(3), abs=1e-12)


def test_cross_entropy_saturates():
    logits = np.zeros((2, 3))
    logits[[0, 1], [2, 0]] = 30
    assert cross_entropy(t64(logits), [2, 0]).item() < 1e-9


def test_cross_entropy_matches_direct_softmax():
    assert cross_entropy(t64([[1, 2, 3]]), [0]).item() == pytest.approx(softmax_ce([[1, 2, 3]], [0]), abs=1e-10)
    assert softmax_ce([[1, 2, 3]], [0]) == pytest.approx(3 - 1 + math.log(math.exp(-2) + math.exp(-1) + 1), abs=1e-12)
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((6, 3))
    labels = rng.integers(0, 3, 6)
    assert cross_entropy(t64(logits), labels).item() == pytest.approx(softmax_ce(logits, labels), abs=1e-10)


def test_cross_entropy_rejects_empty_and_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(t64(np.zeros((0, 3))), [])
    with pytest.raises(ValueError):
        cross_entropy(t64(np.zeros((1, 3))), [3])


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(0, 2))
def test_cross_entropy_non_negative(row, label):
    assert cross_entropy(t64([row]), [label]).item() >= -1e-12


def test_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    assert grad_check(lambda z: cross_entropy(z, [0, 2, 1, 1]), [rng.standard_normal((4, 3))]) < 1e-6


# -- Cox ------------------------------------------------------------------------

def test_cox_two_subject_case():
    loss = cox_ph_loss(t64([0.0, 0.0]), [SurvivalLabel(1.0, True), SurvivalLabel(2.0, False)]).item()
    assert abs(loss - math.log(2)) < 1e-12


def test_cox_shift_invariance():
    rng = np.random.default_rng(2)
    risk = rng.standard_normal(8)
    labels = (rng.uniform(1, 5, 8), rng.uniform(size=8) < 0.6)
    labels[1][0] = True
    a = cox_ph_loss(t64(risk), labels).item()
    b = cox_ph_loss(t64(risk + 5.0), labels).item()
    assert abs(a - b) < 1e-10


@pytest.mark.parametrize("n,seed", [(4, 0), (4, 1), (6, 2), (6, 3)])
def test_cox_matches_risk_set_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    risk = rng.standard_normal(n)
    time = rng.integers(1, 4, n).astype(float)  # integer times force ties
    event = rng.uniform(size=n) < 0.6
    event[0] = True
    got = cox_ph_loss(t64(risk), (time, event)).item()
    assert abs(got - cox_enumeration(risk, time, event)) < 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cox_gradient(seed):
    rng = np.random.default_rng(seed)
    time = rng.uniform(1, 5, 6)
    event = rng.uniform(size=6) < 0.5
    event[seed] = True
    assert grad_check(lambda r: cox_ph_loss(r, (time, event)), [rng.standard_normal(6)]) < 1e-6


def test_cox_needs_an_event():
    with pytest.raises(NoEventsError, match="resample"):
        cox_ph_loss(t64([0.1, 0.2]), ([1.0, 2.0], [False, False]))


def test_survival_label_validation():
    with pytest.raises(ValueError):
        SurvivalLabel(0.0, True)
    with pytest.raises(ValueError):
        SurvivalLabel(float("inf"), False)


# -- balanced accuracy ------------------------------------------------------------

def test_balanced_accuracy_examples():
    assert balanced_accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert balanced_accuracy([0] * 10, [0] * 9 + [1]) == 0.5
    assert balanced_accuracy([0, 1, 1, 1, 2, 0], [0, 0, 1, 1, 2, 2]) == pytest.approx(2 / 3)
    score, recalls = balanced_accuracy([0, 1, 1, 1, 2, 0], [0, 0, 1, 1, 2, 2], return_recalls=True)
    assert recalls == {0: 0.5, 1: 1.0, 2: 0.5}


def test_balanced_accuracy_requires_classes_present():
    with pytest.raises(ValueError, match="absent"):
        balanced_accuracy([0, 1], [0, 1], classes=[0, 1, 2])
    with pytest.raises(ValueError):
        balanced_accuracy([0], [0, 1])


# -- Kaplan-Meier censoring -----------------------------------------------------------

def test_km_without_censoring_is_one():
    g = km_censoring(([1.0, 2.0, 3.0], [True, True, True]))
    assert np.all(g(np.array([0.5, 1, 2.5, 10])) == 1)


def test_km_single_censored_subject():
    g = km_censoring(([2.0], [False]))
    assert g(1.999) == 1 and g(2.0) == 0 and g(5.0) == 0


def test_km_named_example():
    g = km_censoring(([1.0, 2.0, 3.0, 4.0], [True, False, True, False]))
    steps = product_limit([1.0, 2.0, 3.0, 4.0], [False, True, False, True])
    assert g(0.0) == 1 and g(1.0) == 1
    assert g(2.0) == g_right(steps, 2.0) == pytest.approx(2 / 3, abs=1e-15)
    assert g(3.5) == g(2.0) and g(4.0) == 0
    assert g.left(2.0) == 1 and g.left(4.0) == g(2.0)


@pytest.mark.parametrize("n", range(1, 9))
def test_km_equals_product_limit_for_every_censor_pattern(n):
    rng = np.random.default_rng(n)
    time = rng.integers(1, 5, n).astype(float)
    grid = np.concatenate([np.unique(time), np.unique(time) - 0.5, [0.0, 10.0]])
    for flags in itertools.product([False, True], repeat=n):
        censored = list(flags)
        g = km_censoring((time, ~np.array(censored)))
        steps = product_limit(list(time), censored)
        values = g(grid)
        assert np.all(np.diff(g(np.sort(grid))) <= 0)
        for t, v in zip(grid, values):
            assert v == pytest.approx(g_right(steps, t), abs=1e-15)
            assert g.left(t) == pytest.approx(g_left(steps, t), abs=1e-15)


# -- Uno c-index -------------------------------------------------------------------

def test_cindex_perfect_and_tied():
    time = np.array([1.0, 2.0, 3.0, 4.0])
    event = np.ones(4, bool)
    assert uno_cindex(-time, (time, event)) == 1.0
    assert uno_cindex(np.zeros(4), (time, event)) == 0.5


@pytest.mark.parametrize("seed", range(50))
def test_cindex_matches_pairwise_ipcw_oracle(seed):
    risk, time, event = cindex_instance(seed)
    tau = default_tau((time, event))
    got = uno_cindex(risk, (time, event), tau=tau)
    assert abs(got - ipcw_cindex_pairs(risk, time, event, tau)) < 1e-12


def test_cindex_named_twelve_subject_case():
    rng = np.random.default_rng(12)
    time = rng.permutation(np.arange(1, 13)).astype(float)
    event = np.ones(12, bool)
    event[rng.choice(np.flatnonzero(time < 12), 4, replace=False)] = False
    risk = rng.standard_normal(12)
    assert (~event).sum() == 4
    got = uno_cindex(risk, (time, event), tau=np.inf)
    assert abs(got - ipcw_cindex_pairs(risk, time, event, np.inf)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_cindex_equals_auc_for_binary_uncensored_outcome(seed):
    rng = np.random.default_rng(seed)
    n = 14
    y = rng.uniform(size=n) < 0.5
    y[:2] = [True, False]
    time = np.where(y, 1.0, 2.0)  # cases fail first, controls later; nobody censored
    risk = np.round(rng.standard_normal(n), 1)
    got = uno_cindex(risk, (time, np.ones(n, bool)), tau=np.inf)
    assert abs(got - roc_auc_score(y, risk)) < 1e-12


def test_cindex_monotone_transform_and_flip():
    risk, time, event = cindex_instance(7, n=15)
    risk = risk + np.arange(15) * 1e-3  # break ties
    base = uno_cindex(risk, (time, event))
    assert uno_cindex(2 * risk + 1, (time, event)) == base
    assert uno_cindex(risk ** 3, (time, event)) == base
    assert uno_cindex(-risk, (time, event)) == pytest.approx(1 - base, abs=1e-12)


def test_cindex_errors():
    with pytest.raises(ValueError, match="comparable"):
        uno_cindex([0.1, 0.2], ([1.0, 1.0], [True, True]))
    with pytest.raises(ValueError, match="comparable"):
        uno_cindex([0.1, 0.2, 0.3], ([1.0, 2.0, 3.0], [True, False, False]))


def test_default_tau_is_last_event_with_positive_weight():
    time = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    event = np.array([True, False, True, True, False])
    assert default_tau((time, event)) == 4.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_cindex_oracle_property(seed):
    risk, time, event = cindex_instance(seed)
    tau = default_tau((time, event))
    try:
        got = uno_cindex(risk, (time, event), tau=tau)
    except ValueError:
        return
    assert abs(got - ipcw_cindex_pairs(risk, time, event, tau)) < 1e-12
