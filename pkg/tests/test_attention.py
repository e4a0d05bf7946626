import numpy as np
import pytest

from fdcheck import numeric_grad, rel_err
from vqacoin import diffmath as dm
from vqacoin.attention import (
    AttentionMap,
    BilinearGlimpse,
    SelfAttentionHead,
    bilinear_attend,
    glimpse_stack,
    self_attend,
    si_branch,
)
from vqacoin.diffmath import Tensor
from vqacoin.errors import DegenerateMaskError, DimensionError


def test_singleton_self_attention(rng):
    head = SelfAttentionHead(4, rng)
    h = Tensor(rng.normal(size=(1, 4)))
    c, w = self_attend(h, head)
    assert w.data.tolist() == [1.0]
    np.testing.assert_array_equal(c.data, h.data)


def test_identical_rows_share_weight(rng):
    head = SelfAttentionHead(4, rng)
    row = rng.normal(size=4)
    _, w = self_attend(Tensor(np.stack([row, row])), head)
    np.testing.assert_allclose(w.data, [0.5, 0.5], atol=1e-15)


def test_masked_position_gets_no_weight_or_gradient(rng):
    head = SelfAttentionHead(4, rng)
    h = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    c, w = self_attend(h, head, mask)
    assert np.all(w.data[~mask] == 0.0)
    dm.backward(dm.reduce_sum(c * Tensor(rng.normal(size=c.shape))))
    assert np.all(h.grad[0, 3:] == 0.0)


def test_fully_masked_question_is_degenerate(rng):
    head = SelfAttentionHead(4, rng)
    with pytest.raises(DegenerateMaskError):
        self_attend(Tensor(rng.normal(size=(3, 4))), head, np.zeros(3, dtype=bool))


def test_self_attention_is_shift_invariant(rng):
    head = SelfAttentionHead(4, rng)
    h = Tensor(rng.normal(size=(6, 4)))
    _, w = self_attend(h, head)
    shifted = dm.softmax(head.scores(dm.reshape(h, (1, 6, 4))) + 3.7, axis=-1)
    np.testing.assert_allclose(shifted.data[0], w.data, rtol=0, atol=1e-15)


def test_self_attention_gradients(rng):
    head = SelfAttentionHead(3, rng)
    h = rng.normal(size=(2, 4, 3))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
    proj = rng.normal(size=(2, 4, 3))

    def value():
        return float(np.sum(self_attend(Tensor(h), head, mask)[0].data * proj))

    ht = Tensor(h, requires_grad=True)
    dm.backward(dm.reduce_sum(self_attend(ht, head, mask)[0] * Tensor(proj)), head.parameters())
    assert rel_err(ht.grad, numeric_grad(value, h)) <= 1e-4
    for p in head.parameters():
        assert rel_err(p.grad, numeric_grad(value, p.data)) <= 1e-4


def test_singleton_bilinear(rng):
    g = BilinearGlimpse(5, 4, 3, 2, rng)
    x, y = Tensor(rng.normal(size=(1, 5))), Tensor(rng.normal(size=(1, 4)))
    joint, att = bilinear_attend(x, y, g)
    assert att.data.tolist() == [[1.0]]
    expect = dm.relu(g.u_out(x)).data[0] * dm.relu(g.v_out(y)).data[0]
    np.testing.assert_allclose(joint.data, expect, atol=1e-15)


def test_bilinear_map_mass(rng):
    g = BilinearGlimpse(5, 4, 3, 2, rng)
    _, att = bilinear_attend(Tensor(rng.normal(size=(7, 5))), Tensor(rng.normal(size=(5, 4))), g)
    assert att.shape == (7, 5)
    assert abs(att.data.sum() - 1.0) <= 1e-12 and np.all(att.data >= 0)


def test_duplicated_object_splits_its_mass(rng):
    g = BilinearGlimpse(5, 4, 3, 2, rng)
    x = rng.normal(size=(3, 5))
    y = Tensor(rng.normal(size=(4, 4)))
    joint, att = bilinear_attend(Tensor(x), y, g)
    joint2, att2 = bilinear_attend(Tensor(np.vstack([x, x[1:2]])), y, g)
    np.testing.assert_allclose(att2.data[1], att2.data[3], atol=1e-15)
    xo, yo = dm.relu(g.u_out(Tensor(x))).data, dm.relu(g.v_out(y)).data

    def brute(amap):
        return sum(amap[i, j] * xo[i] * yo[j] for i in range(3) for j in range(4))

    np.testing.assert_allclose(joint.data, brute(att.data), atol=1e-12)
    # folding the copy's mass back onto the original row gives the same joint vector
    merged = np.vstack([att2.data[0], att2.data[1] + att2.data[3], att2.data[2]])
    assert abs(merged.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(joint2.data, brute(merged), atol=1e-12)


def test_object_permutation_equivariance(rng):
    g = BilinearGlimpse(5, 4, 3, 6, rng)
    x, y = rng.normal(size=(6, 5)), Tensor(rng.normal(size=(4, 4)))
    perm = rng.permutation(6)
    joint, att = bilinear_attend(Tensor(x), y, g)
    joint_p, att_p = bilinear_attend(Tensor(x[perm]), y, g)
    np.testing.assert_allclose(att_p.data, att.data[perm], atol=1e-10)
    np.testing.assert_allclose(joint_p.data, joint.data, atol=1e-10)


def test_masked_pairs_are_exact_zeros(rng):
    g = BilinearGlimpse(5, 4, 3, 2, rng)
    xm = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    ym = np.array([[1, 0], [1, 1]], dtype=bool)
    _, att = bilinear_attend(Tensor(rng.normal(size=(2, 3, 5))), Tensor(rng.normal(size=(2, 2, 4))), g, xm, ym)
    pair = xm[:, :, None] & ym[:, None, :]
    assert np.all(att.data[~pair] == 0.0)
    np.testing.assert_allclose(att.data.sum(axis=(1, 2)), 1.0, atol=1e-12)
    with pytest.raises(DegenerateMaskError):
        bilinear_attend(Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(2, 4))), g, np.zeros(3, bool))


def test_bilinear_gradients(rng):
    g = BilinearGlimpse(3, 4, 2, 3, rng)
    x, y = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 2, 4))
    proj = rng.normal(size=(2, 3))

    def value():
        return float(np.sum(bilinear_attend(Tensor(x), Tensor(y), g)[0].data * proj))

    xt, yt = Tensor(x, requires_grad=True), Tensor(y, requires_grad=True)
    dm.backward(dm.reduce_sum(bilinear_attend(xt, yt, g)[0] * Tensor(proj)), g.parameters())
    assert rel_err(xt.grad, numeric_grad(value, x)) <= 1e-4
    assert rel_err(yt.grad, numeric_grad(value, y)) <= 1e-4
    for p in g.parameters():
        assert rel_err(p.grad, numeric_grad(value, p.data)) <= 1e-4


def test_zero_glimpse_is_a_no_op(rng):
    q0 = Tensor(rng.normal(size=(5, 4)))
    q1, maps = glimpse_stack(Tensor(rng.normal(size=(3, 6))), q0, [BilinearGlimpse(6, 4, 3, 4, rng).zero_()])
    np.testing.assert_array_equal(q1.data, q0.data)
    assert len(maps) == 1


def test_glimpse_stack_shapes_at_full_extents(rng):
    glimpses = [BilinearGlimpse(20, 12, 8, 12, rng) for _ in range(8)]
    q, maps = glimpse_stack(Tensor(rng.normal(size=(36, 20))), Tensor(rng.normal(size=(14, 12))), glimpses)
    assert q.shape == (14, 12)
    assert [m.shape for m in maps] == [(36, 14)] * 8


def test_two_glimpses_equal_manual_composition(rng):
    x, q0 = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(3, 5)))
    gs = [BilinearGlimpse(6, 5, 3, 5, rng) for _ in range(2)]
    q2, _ = glimpse_stack(x, q0, gs)
    f1, _ = bilinear_attend(x, q0, gs[0])
    q1 = q0.data + f1.data
    f2, _ = bilinear_attend(x, Tensor(q1), gs[1])
    np.testing.assert_allclose(q2.data, q1 + f2.data, atol=1e-14)


def test_post_glimpse_hook_can_replace_the_joint_vector(rng):
    x, q0 = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(3, 5)))
    calls = []

    def hook(g, joint, att):
        calls.append((g, att.shape))
        return joint * 0.0

    q, _ = glimpse_stack(x, q0, [BilinearGlimpse(6, 5, 3, 5, rng) for _ in range(2)], post_glimpse=hook)
    assert calls == [(0, (4, 3)), (1, (4, 3))]
    np.testing.assert_array_equal(q.data, q0.data)


def test_si_branch(rng):
    s, c = Tensor(rng.normal(size=(40, 6))), Tensor(rng.normal(size=(14, 6)))
    out, att = si_branch(s, c, BilinearGlimpse(6, 6, 4, 6, rng))
    assert att.shape == (40, 14)
    diff = out.data - c.data
    np.testing.assert_allclose(diff, np.broadcast_to(diff[0], diff.shape), atol=1e-14)
    zero, _ = si_branch(s, c, BilinearGlimpse(6, 6, 4, 6, rng).zero_())
    np.testing.assert_array_equal(zero.data, c.data)
    with pytest.raises(DimensionError):
        si_branch(s, c, BilinearGlimpse(6, 6, 4, 5, rng))


def test_glimpse_stack_needs_a_glimpse(rng):
    with pytest.raises(DimensionError):
        glimpse_stack(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), [])


def test_attention_map_json(rng):
    amap = AttentionMap(np.full((2, 3), 1 / 6), ["s0", "s1"], ["q0", "q1", "q2"])
    record = amap.to_json()
    assert record["rows"] == ["s0", "s1"] and record["cols"] == ["q0", "q1", "q2"]
    assert np.asarray(record["weights"]).shape == (2, 3)
