import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ubw.dispersibility import PredictionTable, d_c, d_p, d_s, entropy, class_bound_witness
from ubw.errors import ConfigError, DomainError


def d_p_oracle(labels, preds):
    n = len(labels)
    total = 0.0
    for j in set(labels):
        group = [p for y, p in zip(labels, preds) if y == j]
        counts = Counter(group)
        total += len(group) * oracles.entropy_oracle([c / len(group) for c in counts.values()])
    return total / n


def d_c_oracle(labels, probs):
    total = 0.0
    for j in set(labels.tolist()):
        rows = probs[labels == j]
        total += len(rows) * oracles.entropy_oracle(rows.mean(axis=0))
    return total / len(labels)


# -- entropy ---------------------------------------------------------------


def test_entropy_examples():
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    assert entropy(np.full(10, 0.1)) == pytest.approx(math.log(10), abs=1e-12)
    assert entropy([0.75, 0.25]) == pytest.approx(0.562335, abs=1e-6)


def test_entropy_rejects_bad_vectors():
    with pytest.raises(DomainError):
        entropy([1.2, -0.2])
    with pytest.raises(DomainError):
        entropy([0.5, 0.4])


# -- d_p -------------------------------------------------------------------


def test_d_p_single_label_is_zero():
    t = PredictionTable([1, 2, 3, 2, 1], 3, predictions=[2, 2, 2, 2, 2])
    assert d_p(t) == 0.0


def test_d_p_two_sample_class():
    # class 1 predicted {1, 2}; class 2 has one sample
    t = PredictionTable([1, 1, 2], 2, predictions=[1, 2, 2])
    assert d_p(t) == pytest.approx(2 / 3 * math.log(2), abs=1e-12)


@pytest.mark.parametrize("k", [2, 5, 10])
def test_d_p_uniform_spread_is_log_k(k):
    labels = np.repeat(np.arange(1, k + 1), k)
    preds = np.tile(np.arange(1, k + 1), k)
    assert abs(d_p(PredictionTable(labels, k, predictions=preds)) - math.log(k)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_d_p_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 11))
    n = int(rng.integers(1, 80))
    labels = rng.integers(1, k + 1, n)
    preds = rng.integers(1, k + 1, n)
    assert d_p(PredictionTable(labels, k, predictions=preds)) == pytest.approx(
        d_p_oracle(labels.tolist(), preds.tolist()), abs=1e-12)


# -- d_s / d_c -------------------------------------------------------------


def test_two_row_values():
    t = PredictionTable([1, 1], 2, probs=[[0.5, 0.5], [1.0, 0.0]])
    assert abs(d_s(t) - 0.346574) <= 1e-6
    assert abs(d_c(t) - 0.562335) <= 1e-6


def test_one_hot_and_uniform_rows():
    oh = PredictionTable([1, 2], 3, probs=np.eye(3)[[0, 2]])
    assert d_s(oh) == 0.0
    uni = PredictionTable([1, 2, 3], 3, probs=np.full((3, 3), 1 / 3))
    assert d_s(uni) == pytest.approx(math.log(3), abs=1e-12)


def test_identical_rows_give_jensen_equality():
    row = [0.2, 0.3, 0.5]
    t = PredictionTable([2, 2, 2], 3, probs=[row] * 3)
    assert d_c(t) == pytest.approx(d_s(t), abs=1e-12)


def test_single_sample():
    t = PredictionTable([1], 2, probs=[[0.3, 0.7]])
    assert d_c(t) == pytest.approx(d_s(t), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_d_s_d_c_match_oracle(seed):
    labels, k, probs = oracles.random_table(np.random.default_rng(seed))
    t = PredictionTable(labels, k, probs=probs)
    assert d_s(t) == pytest.approx(np.mean([oracles.entropy_oracle(r) for r in probs]), abs=1e-12)
    assert d_c(t) == pytest.approx(d_c_oracle(labels, probs), abs=1e-12)


# -- invariants ------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_and_relabel_invariance(seed):
    rng = np.random.default_rng(seed)
    labels, k, probs = oracles.random_table(rng)
    preds = probs.argmax(axis=1) + 1
    base = PredictionTable(labels, k, predictions=preds, probs=probs)
    order = rng.permutation(len(labels))
    sig = rng.permutation(k)  # class j -> sig[j-1] + 1
    moved = PredictionTable(sig[labels[order] - 1] + 1, k, predictions=sig[preds[order] - 1] + 1,
                            probs=probs[order][:, np.argsort(sig)])
    for f in (d_p, d_s, d_c):
        assert f(moved) == pytest.approx(f(base), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bounds(seed):
    rng = np.random.default_rng(seed)
    labels, k, probs = oracles.random_table(rng)
    t = PredictionTable(labels, k, predictions=rng.integers(1, k + 1, len(labels)), probs=probs)
    for f in (d_p, d_s, d_c):
        assert -1e-15 <= f(t) <= math.log(k) + 1e-12


def test_class_bound_two_row_case():
    dc, bound, holds = class_bound_witness(PredictionTable([1, 1], 2, probs=[[0.5, 0.5], [1.0, 0.0]]))
    assert dc == pytest.approx(0.562335, abs=1e-6)
    assert bound == pytest.approx(0.173287, abs=1e-6)
    assert holds


def test_class_bound_fuzz():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        labels, k, probs = oracles.random_table(rng)
        assert class_bound_witness(PredictionTable(labels, k, probs=probs))[2]


def test_class_bound_needs_two_samples():
    with pytest.raises(ConfigError):
        class_bound_witness(PredictionTable([1], 2, probs=[[0.5, 0.5]]))


def test_class_bound_all_one_hot_is_equality():
    dc, bound, holds = class_bound_witness(PredictionTable([1, 2], 2, probs=np.eye(2)))
    assert dc == bound == 0.0 and not holds


# -- table validation and CSV ----------------------------------------------


def test_table_validation():
    with pytest.raises(ConfigError):
        PredictionTable([0, 1], 2, predictions=[1, 1])
    with pytest.raises(ConfigError):
        PredictionTable([1, 2], 2, predictions=[1, 3])
    with pytest.raises(DomainError):
        PredictionTable([1], 2, probs=[[0.6, 0.6]])


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    labels, k, probs = oracles.random_table(rng)
    t = PredictionTable(labels, k, probs=probs)
    t.to_csv(tmp_path / "p.csv")
    back = PredictionTable.from_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.probs, probs)
    np.testing.assert_array_equal(back.labels, labels)
    h = PredictionTable([1, 2, 2], 3, predictions=[3, 1, 1])
    h.to_csv(tmp_path / "h.csv")
    assert d_p(PredictionTable.from_csv(tmp_path / "h.csv", 3)) == d_p(h)
