import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elite import autodiff as ad
from elite import nets
from elite.datasets import IGNORE, synth_scene
from elite.errors import ContractError
from elite.geometry import PixelCorrespondences


def jaccard_delta(mispredicted, fg):
    """Jaccard loss of a set of mispredicted indices, ``fg`` the foreground set."""
    bg_errors = len(mispredicted - fg)
    return len(mispredicted) / (len(fg) + bg_errors)


def lovasz_bruteforce(errors, fg):
    """Extension of a submodular set function = max over greedy orderings."""
    n = len(errors)
    best = -np.inf
    for perm in itertools.permutations(range(n)):
        total, prev, chosen = 0.0, 0.0, set()
        for i in perm:
            chosen.add(i)
            cur = jaccard_delta(chosen, fg)
            total += errors[i] * (cur - prev)
            prev = cur
        best = max(best, total)
    return best


def lovasz_oracle(p, y):
    per_class = []
    for c in sorted(set(y.tolist())):
        fg = set(np.flatnonzero(y == c).tolist())
        err = np.where(y == c, 1 - p[:, c], p[:, c])
        per_class.append(lovasz_bruteforce(err, fg))
    return float(np.mean(per_class))


def _probs(rng, n, c):
    x = rng.normal(scale=2, size=(n, c))
    e = np.exp(x - x.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


# ------------------------------------------------------------ losses

def test_wce_ln2():
    assert nets.loss_wce(ad.const([[0.5, 0.5]]), [0], [1, 1]).item() == pytest.approx(np.log(2), abs=1e-12)


def test_wce_perfect_and_ignore():
    assert nets.loss_wce(ad.const([[1.0, 0.0]]), [0], [1, 1]).item() == 0.0
    out = nets.loss_wce(ad.const([[0.3, 0.7]]), [IGNORE], [1, 1])
    assert out.item() == 0.0 and out.empty


def test_lovasz_single_point():
    assert nets.loss_lovasz(ad.const([[0.3, 0.7]]), [0]).item() == pytest.approx(0.7)


def test_lovasz_perfect_is_zero():
    assert nets.loss_lovasz(ad.const([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item() == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 4), st.integers(0, 10_000))
def test_lovasz_matches_bruteforce(n, c, seed):
    rng = np.random.default_rng(seed)
    p = _probs(rng, n, c)
    y = rng.integers(0, c, n)
    assert nets.loss_lovasz(ad.const(p), y).item() == pytest.approx(lovasz_oracle(p, y), abs=1e-9)


def test_kl_hand_value():
    v = nets.loss_kl(np.array([[0.5, 0.5]]), ad.const([[0.9, 0.1]])).item()
    assert v == pytest.approx(0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1), abs=1e-12)
    assert round(v, 4) == 0.5108


def test_kl_equal_zero_and_empty_and_mismatch():
    t = np.array([[0.2, 0.8]])
    assert nets.loss_kl(t, ad.const(t)).item() == pytest.approx(0.0, abs=1e-15)
    out = nets.loss_kl(np.zeros((0, 2)), ad.const(np.zeros((0, 2))))
    assert out.empty and out.item() == 0.0
    with pytest.raises(ContractError):
        nets.loss_kl(np.ones((2, 2)) / 2, ad.const(np.ones((1, 2)) / 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 5), st.integers(0, 10_000))
def test_kl_nonnegative(n, c, seed):
    rng = np.random.default_rng(seed)
    assert nets.loss_kl(_probs(rng, n, c), ad.const(_probs(rng, n, c))).item() >= -1e-15


def test_kl_teacher_is_detached():
    t = ad.param(_probs(np.random.default_rng(0), 3, 2))
    s = ad.param(np.random.default_rng(1).normal(size=(3, 2)))
    ad.backward(nets.loss_kl(t, ad.softmax_rows(s)))
    assert np.all(t.grad == 0) and np.any(s.grad != 0)


def _logit_loss(fn, n=8, c=3, seed=0):
    rng = np.random.default_rng(seed)
    z = ad.param(rng.normal(size=(n, c)))
    y = rng.integers(0, c, n)
    y[0] = IGNORE
    return z, y, rng


def test_wce_gradient():
    z, y, rng = _logit_loss(nets.loss_wce)
    w = rng.uniform(0.5, 2, 3)
    assert ad.grad_check(lambda: nets.loss_wce(ad.softmax_rows(z), y, w), [z], n_samples=24) < 1e-4


def test_lovasz_gradient():
    z, y, _ = _logit_loss(nets.loss_lovasz, n=20, c=3, seed=4)
    # continuous random errors: sort ties have probability zero, and eps is small
    assert ad.grad_check(lambda: nets.loss_lovasz(ad.softmax_rows(z), y), [z], eps=1e-6, n_samples=50) < 1e-4


def test_kl_gradient():
    rng = np.random.default_rng(5)
    t = _probs(rng, 10, 4)
    z = ad.param(rng.normal(size=(10, 4)))
    assert ad.grad_check(lambda: nets.loss_kl(t, ad.softmax_rows(z)), [z], n_samples=40) < 1e-4


# ------------------------------------------------------------ student

def test_student_shapes():
    rng = np.random.default_rng(0)
    cloud = rng.normal(size=(10, 4))
    st_ = nets.StudentNet(3, stages=2, hidden=16, rng=rng)
    outs, final = nets.student_forward(st_, cloud)
    assert len(outs) == 2
    for o in outs:
        assert o.features.shape == (10, 16) and o.scores.shape == (10, 3)
        np.testing.assert_allclose(o.scores.value.sum(1), 1.0, atol=1e-9)
    assert final.shape == (10, 3)


def test_student_empty_cloud():
    with pytest.raises(ContractError):
        nets.student_forward(nets.StudentNet(3, stages=1), np.zeros((0, 4)))


def test_zero_classifier_is_uniform():
    s = nets.StudentNet(3, stages=1, hidden=8)
    s.head_w[0].value[:] = 0.0
    outs, _ = nets.student_forward(s, np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_allclose(outs[0].scores.value, 1 / 3)


def test_pool_unpool_law():
    cloud = np.array([[0.01, 0.02, 0.0, 0.1], [0.05, 0.03, 0.01, 0.9], [3.0, 3.0, 3.0, 0.5]])
    s = nets.StudentNet(2, stages=2, hidden=8, base_edge=0.2)
    outs, _ = nets.student_forward(s, cloud)
    for o in outs:
        np.testing.assert_array_equal(o.features.value[0], o.features.value[1])
        np.testing.assert_array_equal(o.scores.value[0], o.scores.value[1])


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    cloud = rng.normal(size=(30, 4))
    perm = rng.permutation(30)
    s = nets.StudentNet(3, stages=3, hidden=8, rng=rng)
    _, a = nets.student_forward(s, cloud)
    _, b = nets.student_forward(s, cloud[perm])
    np.testing.assert_allclose(b.value, a.value[perm], atol=1e-12)


def test_student_param_count():
    s = nets.StudentNet(4, stages=2, hidden=8)
    want = (4 * 8 + 8 + 8 * 4 + 4) + (8 * 8 + 8 + 8 * 4 + 4) + (16 * 4 + 4)
    assert sum(p.value.size for p in s.parameters()) == want


def test_student_gradient():
    rng = np.random.default_rng(8)
    cloud = rng.normal(size=(12, 4))
    s = nets.StudentNet(3, stages=2, hidden=6, rng=rng)
    inputs = s.inputs(cloud)
    y = rng.integers(0, 3, 12)

    def loss():
        _, final = s.forward(inputs)
        return nets.loss_wce(final, y, np.ones(3))

    assert ad.grad_check(loss, s.parameters(), n_samples=60) < 1e-4


# ------------------------------------------------------------ teacher

def test_patch_features_contract():
    with pytest.raises(ContractError):
        nets.patch_features(np.zeros((10, 10, 3)), 3)


def test_teacher_shapes_and_gradient():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(8, 8, 3))
    t = nets.TeacherNet(3, stages=2, hidden=8, grid=4, adapter="lora", rank=2, base_rng=rng, rng=rng)
    outs = nets.teacher_forward(t, image)
    assert [o.features.shape for o in outs] == [(16, 8)] * 2
    assert [o.scores.shape for o in outs] == [(16, 3)] * 2
    feats0, _ = nets.patch_features(image, 4)
    for a in t.adapters:
        a.B.value[:] = rng.normal(scale=0.1, size=a.B.shape)

    def loss():
        fs = t.forward(feats0)
        return nets.loss_wce(t.decode_final(fs), np.arange(16) % 3, np.ones(3))

    assert ad.grad_check(loss, t.parameters(), n_samples=60) < 1e-4


def test_single_patch_gives_identical_rows():
    t = nets.TeacherNet(2, stages=1, hidden=8, grid=1, rank=2)
    feats0, grid = nets.patch_features(np.random.default_rng(1).integers(0, 256, (6, 6, 3)), 1)
    f = t.forward(feats0)[0]
    corr = PixelCorrespondences(np.arange(3), np.array([0, 3, 5]), np.array([5, 1, 0]), np.ones(3))
    rows = nets.patch_decode(t, 0, f, grid, corr).value
    assert np.all(rows == rows[0])


def test_patch_decode_index_arithmetic():
    t = nets.TeacherNet(3, stages=1, hidden=8, grid=2, rank=2)
    feats0, grid = nets.patch_features(np.random.default_rng(2).integers(0, 256, (4, 6, 3)), 2)
    f = t.forward(feats0)[0]
    whole = t.decode(0, f).value
    # row 3 (lower half), col 1 (left third of 6 -> left half) is patch (1, 0)
    corr = PixelCorrespondences(np.array([0]), np.array([1]), np.array([3]), np.ones(1))
    np.testing.assert_array_equal(nets.patch_decode(t, 0, f, grid, corr).value[0], whole[1 * 2 + 0])
    empty = PixelCorrespondences(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    assert nets.patch_decode(t, 0, f, grid, empty).shape[0] == 0


def test_teacher_frozen_parts_are_not_parameters():
    t = nets.TeacherNet(3, stages=2, hidden=8, grid=4, rank=2)
    ids = {id(p) for p in t.parameters()}
    assert all(id(a.W0) not in ids for a in t.adapters)
    assert id(t.embed_w) not in ids


def test_synth_scene_divides_default_grid():
    s = synth_scene(0)
    feats0, grid = nets.patch_features(s.image, 16)
    assert feats0.shape == (256, 5)
