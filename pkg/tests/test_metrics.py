import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elite.datasets import IGNORE
from elite.errors import ContractError
from elite.metrics import ConfusionMatrix, throughput


def _cm(truth, pred, classes):
    cm = ConfusionMatrix(classes)
    cm.update(truth, pred)
    return cm


def test_hand_miou_is_seven_twelfths():
    cm = _cm([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert cm.iou_per_class() == [0.5, 2 / 3]
    assert cm.miou() == float(Fraction(7, 12))


def test_perfect_prediction():
    assert _cm([0, 1, 1], [0, 1, 1], 2).miou() == 1.0


def test_absent_class_is_excluded():
    cm = _cm([0, 0, 1, 1], [0, 1, 1, 1], 3)
    assert cm.iou_per_class()[2] is None
    assert cm.miou() == float(Fraction(7, 12))


def test_ignore_truth_is_skipped():
    assert _cm([0, IGNORE], [0, 1], 2).total == 1


def test_empty_matrix_errors():
    with pytest.raises(ContractError):
        ConfusionMatrix(2).miou()


def test_out_of_range_ids():
    with pytest.raises(IndexError):
        _cm([0], [5], 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(2, 5), st.integers(0, 10_000))
def test_order_merge_and_relabel_invariance(n, c, seed):
    rng = np.random.default_rng(seed)
    t, p = rng.integers(0, c, n), rng.integers(0, c, n)
    whole = _cm(t, p, c)
    perm = rng.permutation(n)
    assert np.array_equal(_cm(t[perm], p[perm], c).counts, whole.counts)
    k = int(rng.integers(0, n + 1))
    merged = _cm(t[:k], p[:k], c).merge(_cm(t[k:], p[k:], c))
    assert np.array_equal(merged.counts, whole.counts)
    relabel = rng.permutation(c)
    assert _cm(relabel[t], relabel[p], c).miou() == pytest.approx(whole.miou(), abs=1e-12)


def test_report_keys():
    rep = _cm([0, 1], [0, 0], 2).report()
    assert set(rep) == {"classes", "iou", "miou", "samples", "support"}
    assert rep["support"] == [1, 1]


def test_throughput_sleep_rate():
    rate = throughput(lambda: time.sleep(0.01), warmup_iters=1, timed_iters=10)
    assert 80 <= rate <= 120


def test_throughput_excludes_warmup():
    calls = []

    def work():
        if not calls:
            time.sleep(0.3)
        calls.append(1)

    assert throughput(work, warmup_iters=1, timed_iters=5) > 100


def test_throughput_needs_iterations():
    with pytest.raises(ContractError):
        throughput(lambda: None, timed_iters=0)
