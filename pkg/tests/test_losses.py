import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simtoken.losses import (LAMBDA, TAU, batch_mean, build_positive_sets, loss_mask, loss_sa, loss_text,
                             total_loss, unit_rows)
from simtoken.numerics import Graph, ShapeError, grad_check


def sa_value(q, P, tau=TAU, normalize=False):
    g = Graph()
    return loss_sa(g, g.const(np.asarray(q, float)), [g.const(np.asarray(p, float)) for p in P], tau,
                   normalize).value.item()


def brute_sa(q, P, tau):
    """Direct evaluation of the positive-set cross-entropy with plain floats."""
    sims = [sum(a * b for a, b in zip(q, p)) / tau for p in P]
    denom = sum(math.exp(s) for s in sims)
    return -sum(math.log(math.exp(s) / denom) for s in sims) / len(P)


# L_sa analytic oracles

def test_single_positive_gives_exactly_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sa_value(rng.normal(size=5), [rng.normal(size=5)]) == 0.0


def test_equal_similarities_give_ln_k():
    q = np.array([1.0, 2.0])
    P = [[3.0, 0.0], [1.0, 1.0], [-1.0, 2.0]]  # every dot product is 3
    assert abs(sa_value(q, P) - math.log(3)) <= 1e-12
    for K in (2, 5, 8):
        assert sa_value(q, [[3.0, 0.0]] * K) == pytest.approx(math.log(K), abs=1e-12)


def test_two_axis_example_matches_brute_force():
    q, P = [1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]
    expected = brute_sa(q, P, 0.07)
    assert abs(sa_value(q, P, 0.07) - expected) <= 1e-10
    # closed form: both log-softmax terms carry the ln(1 + e^(-1/tau)) correction
    assert expected == pytest.approx(1 / (2 * 0.07) + math.log1p(math.exp(-1 / 0.07)), abs=1e-12)
    assert expected == pytest.approx(7.1429, abs=5e-5)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
def test_agrees_with_brute_force_on_random_sets(K, d, seed):
    rng = np.random.default_rng(seed)
    q, P = rng.normal(size=d) * 0.1, rng.normal(size=(K, d)) * 0.1
    assert sa_value(q, P) == pytest.approx(brute_sa(q, P, TAU), rel=1e-10, abs=1e-12)


@settings(max_examples=50)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_lower_bound_is_ln_k(K, seed):
    # cross-entropy against uniform is minimised by the uniform softmax
    rng = np.random.default_rng(seed)
    assert sa_value(rng.normal(size=3) * 0.1, rng.normal(size=(K, 3)) * 0.1) >= math.log(K) - 1e-12


@settings(max_examples=50)
@given(st.integers(2, 6), st.floats(0.1, 10.0), st.integers(0, 10_000))
def test_argmax_invariant_to_similarity_scale(K, c, seed):
    rng = np.random.default_rng(seed)
    q, P = rng.normal(size=4), rng.normal(size=(K, 4))
    assert np.argmax(P @ q / TAU) == np.argmax(c * (P @ q) / TAU)
    # scaling the temperature by 1/c is the same as scaling every similarity by c
    assert sa_value(q, P, TAU / c) == pytest.approx(sa_value(c * q, P, TAU), rel=1e-10)


def test_member_order_does_not_matter():
    rng = np.random.default_rng(1)
    q, P = rng.normal(size=4), rng.normal(size=(4, 4))
    assert sa_value(q, P) == pytest.approx(sa_value(q, P[::-1]), abs=1e-12)


def test_empty_positive_set_contributes_nothing():
    g = Graph()
    assert loss_sa(g, g.const(np.ones(3)), []) is None
    assert batch_mean(g, [None, None]) is None


def test_mismatched_widths_rejected():
    g = Graph()
    with pytest.raises(ShapeError):
        loss_sa(g, g.const(np.ones(3)), [g.const(np.ones(4))])


def test_gradients_reach_anchor_and_every_member():
    rng = np.random.default_rng(2)
    q0, P0 = rng.normal(size=(1, 3)), rng.normal(size=(3, 3))
    g = Graph()
    q = g.param(q0)
    members = [g.param(P0[i]) for i in range(3)]
    grads = g.backward(loss_sa(g, q, members))
    assert np.abs(grads[q.id]).sum() > 0
    assert all(np.abs(grads[m.id]).sum() > 0 for m in members)
    assert grad_check(lambda g, x: loss_sa(g, g.const(q0), [g.reshape(g.slice(x, 0, i, i + 1), (3,))
                                                            for i in range(3)]), P0).passed


def test_cosine_variant_is_scale_free():
    rng = np.random.default_rng(3)
    q, P = rng.normal(size=4), rng.normal(size=(3, 4))
    base = sa_value(q, P, normalize=True)
    assert sa_value(5 * q, 0.2 * P, normalize=True) == pytest.approx(base, rel=1e-9)
    unit = [1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]
    assert sa_value(*unit, normalize=True) == pytest.approx(sa_value(*unit), abs=1e-9)
    g = Graph()
    rows = unit_rows(g, g.const(rng.normal(size=(3, 4)))).value
    np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-12)


# positive sets

def rec(eid, vid, target):
    return SimpleNamespace(expression_id=eid, video_id=vid, target_object_id=target)


def test_positive_sets_from_grouping():
    records = [rec("e0", "v0", "o0"), rec("e1", "v0", "o0"), rec("e2", "v0", "o0"), rec("e3", "v0", "o1"),
               rec("e4", "v1", "o0"), rec("e5", "v1", None), rec("e6", "v1", None)]
    g = Graph()
    nodes = [g.const(np.full(2, float(i))) for i in range(len(records))]
    sets = build_positive_sets(records, nodes)
    assert [s.anchor_id for s in sets] == ["e0", "e1", "e2"]
    assert all(s.K == 2 for s in sets)
    assert sets[0].members[0] is nodes[1] and sets[0].members[1] is nodes[2]
    assert all(nodes[i] not in s.members for i, s in enumerate(sets))


def test_all_null_batch_has_no_sets():
    records = [rec(f"e{i}", "v0", None) for i in range(4)]
    g = Graph()
    assert build_positive_sets(records, [g.const(np.ones(2))] * 4) == []


def test_batch_permutation_keeps_per_expression_losses():
    rng = np.random.default_rng(4)
    records = [rec(f"e{i}", "v0", f"o{i % 2}") for i in range(6)]
    emb = rng.normal(size=(6, 3)) * 0.2

    def per_expression(order):
        g = Graph()
        recs = [records[i] for i in order]
        nodes = [g.const(emb[i]) for i in order]
        anchors = {r.expression_id: nodes[k] for k, r in enumerate(recs)}
        return {s.anchor_id: loss_sa(g, anchors[s.anchor_id], s.members).value.item()
                for s in build_positive_sets(recs, nodes)}

    base = per_expression(range(6))
    for perm in (rng.permutation(6) for _ in range(5)):
        other = per_expression(perm)
        assert other.keys() == base.keys()
        for k in base:
            assert other[k] == pytest.approx(base[k], abs=1e-12)


# text and mask losses

def test_text_loss_perfect_and_uniform():
    V = 7
    g = Graph()
    logits = np.full((6, V), -1e3)
    targets = [3, 1, 4, 0]
    for row, t in zip(range(2, 6), targets):
        logits[row, t] = 0.0
    assert loss_text(g, g.const(logits), targets, range(2, 6)).value.item() == pytest.approx(0.0, abs=1e-12)
    uniform = loss_text(g, g.const(np.zeros((6, V))), targets, range(2, 6)).value.item()
    assert uniform == pytest.approx(math.log(V), abs=1e-12)


def test_text_loss_matches_softmax_oracle():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(8, 5))
    targets, positions = [0, 4, 2, 2], [3, 4, 5, 6]
    expected = 0.0
    for p, t in zip(positions, targets):
        row = logits[p]
        expected -= row[t] - math.log(sum(math.exp(v) for v in row))
    g = Graph()
    assert loss_text(g, g.const(logits), targets, positions).value.item() == pytest.approx(expected / 4, abs=1e-12)


def test_text_loss_rejects_mismatch():
    g = Graph()
    with pytest.raises(ShapeError):
        loss_text(g, g.const(np.zeros((4, 3))), [0, 1], [0, 1, 2])


def test_mask_loss_saturated_and_empty():
    gt = np.zeros((2, 4, 4))
    gt[:, 1:3, 1:3] = 1
    g = Graph()
    bce, dice, total = (n.value.item() for n in loss_mask(g, g.const(np.where(gt > 0, 50.0, -50.0)), gt))
    assert bce < 1e-20 and abs(dice) < 1e-12 and total == bce + dice
    empty = np.zeros((1, 3, 3))
    _, dice, _ = loss_mask(g, g.const(np.full((1, 3, 3), -50.0)), empty)
    assert abs(dice.value.item()) < 1e-12


def test_mask_loss_matches_direct_formula():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 4, 4))
    y = (rng.random((1, 4, 4)) < 0.4).astype(float)
    p = 1 / (1 + np.exp(-x))
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    dice = 1 - (2 * (p * y).sum() + 1) / (p.sum() + y.sum() + 1)
    g = Graph()
    got = [n.value.item() for n in loss_mask(g, g.const(x), y)]
    np.testing.assert_allclose(got, [bce, dice, bce + dice], atol=1e-12)


def test_mask_loss_rejects_non_binary_gt():
    g = Graph()
    with pytest.raises(ValueError):
        loss_mask(g, g.const(np.zeros((1, 2, 2))), np.full((1, 2, 2), 0.5))


def test_total_loss_arithmetic_and_linearity():
    g = Graph()
    one, two, three = (g.const(np.array(v)) for v in (1.0, 2.0, 3.0))
    assert total_loss(g, one, two, three, LAMBDA).value.item() == pytest.approx(3.3, abs=1e-15)
    assert total_loss(g, one, two, None).value.item() == 3.0
    assert total_loss(g, one, two, three, 0.0).value.item() == 3.0

    rng = np.random.default_rng(7)
    x0, gt = rng.normal(size=(1, 3, 3)), (rng.random((1, 3, 3)) < 0.5).astype(float)
    q0 = rng.normal(size=3)

    def grad(which):
        g = Graph()
        x = g.param(x0)
        q = g.reshape(g.slice(g.reshape(x, (1, 9)), 1, 0, 3), (3,))
        parts = {"mask": loss_mask(g, x, gt)[2], "sa": loss_sa(g, q, [g.const(q0), g.const(-q0)])}
        if which == "total":
            loss = total_loss(g, g.const(np.array(0.0)), parts["mask"], parts["sa"], 0.1)
        elif which == "sa":
            loss = g.scale(parts["sa"], 0.1)
        else:
            loss = parts[which]
        return g.backward(loss)[x.id]

    np.testing.assert_allclose(grad("total"), grad("mask") + grad("sa"), atol=1e-12)
