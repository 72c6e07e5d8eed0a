import io
import json
from collections import Counter

import numpy as np
import pytest

from zdt.neural_core import init_autoencoder
from zdt.novelty_training import (
    MiningError,
    TrainingConfig,
    auto_balance_weights,
    class_pairs,
    combined_loss_step,
    is_semi_hard,
    latent_collapse_metric,
    mine_round_robin,
    train_novelty_detector,
    triplet_loss,
)

from test_neural_core import numeric_grad, rel_err


# -- triplet loss: squared norms -------------------------------------------


def test_triplet_all_equal_gives_margin():
    z = np.array([0.3, -1.0])
    assert triplet_loss(z, z, z, 0.7)[0] == pytest.approx(0.7)


def test_triplet_inactive_hinge():
    loss, ga, gp, gn = triplet_loss([0, 0], [1, 0], [3, 0], 0.2)
    assert loss == 0.0
    assert not ga.any() and not gp.any() and not gn.any()


def test_triplet_worked_example_and_gradient():
    za, zp, zn = np.array([0.0, 0.0]), np.array([2.0, 0.0]), np.array([1.0, 0.0])
    loss, ga, gp, gn = triplet_loss(za, zp, zn, 0.5)
    assert loss == 3.5
    for arr, g in ((za, ga), (zp, gp), (zn, gn)):
        num = numeric_grad(lambda: triplet_loss(za, zp, zn, 0.5)[0], arr)
        assert rel_err(g, num) < 1e-6


def test_triplet_kink_has_zero_subgradient():
    # |a-p|^2 - |a-n|^2 + alpha == 0 exactly
    _, ga, gp, gn = triplet_loss([0.0], [1.0], [2.0], 3.0)
    assert not ga.any() and not gp.any() and not gn.any()


def test_triplet_hinge_zero_when_margin_satisfied(rng):
    for _ in range(200):
        za, zp, zn = rng.normal(size=(3, 5))
        alpha = rng.uniform(0.01, 2)
        loss = triplet_loss(za, zp, zn, alpha)[0]
        if np.sum((za - zp) ** 2) + alpha <= np.sum((za - zn) ** 2):
            assert loss == 0.0
        else:
            assert loss > 0


def test_triplet_batch_gradient(rng):
    za, zp, zn = (rng.normal(size=(6, 5)) for _ in range(3))
    _, ga, gp, gn = triplet_loss(za, zp, zn, 1.0)
    for arr, g in ((za, ga), (zp, gp), (zn, gn)):
        num = numeric_grad(lambda: triplet_loss(za, zp, zn, 1.0)[0], arr)
        assert rel_err(g, num) < 1e-6


# -- semi-hard: plain distances ---------------------------------------------


@pytest.mark.parametrize(
    "d_ap,d_an,expected",
    [(1.0, 1.3, True), (1.0, 0.9, False), (1.0, 1.6, False), (1.0, 1.0, False), (1.0, 1.5, False)],
)
def test_semi_hard_truth_table(d_ap, d_an, expected):
    assert is_semi_hard(d_ap, d_an, 0.5) is expected


def test_semi_hard_uses_unsquared_distance():
    # squared distances (1, 1.69) would fall outside the band [1, 1.5)
    assert is_semi_hard(1.0, 1.3, 0.5)
    assert not is_semi_hard(1.0, 1.69, 0.5)


# -- mining ------------------------------------------------------------------


def test_allocation_two_classes():
    emb = np.random.default_rng(0).normal(size=(10, 2))
    labels = ["x"] * 5 + ["y"] * 5
    b = mine_round_robin(emb, labels, 8, 0.2, np.random.default_rng(1))
    counts = Counter(zip(b.anchor_labels, b.negative_labels))
    assert counts == {("x", "y"): 4, ("y", "x"): 4}


def test_fallback_picks_hardest_easy_negative():
    emb = np.array([[0.0, 0.0], [0.1, 0.0], [1.0, 0.0], [1.05, 0.0]])
    labels = np.array(["X", "X", "Y", "Y"], dtype=object)
    b = mine_round_robin(emb, labels, 2, 0.2, np.random.default_rng(0), pairs=[("X", "Y")])
    for a, p, n in zip(b.anchors, b.positives, b.negatives):
        d_ap = np.linalg.norm(emb[a] - emb[p])
        cands = [j for j in (2, 3)]
        d_an = {j: np.linalg.norm(emb[a] - emb[j]) for j in cands}
        assert not any(is_semi_hard(d_ap, d, 0.2) for d in d_an.values())
        expected = min((j for j in cands if d_an[j] > d_ap), key=lambda j: d_an[j])
        assert n == expected
    anchors_at_origin = [n for a, n in zip(b.anchors, b.negatives) if a == 0]
    assert all(n == 2 for n in anchors_at_origin)


def test_semi_hard_negative_preferred():
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [1.3, 0.0], [0.5, 0.0], [5.0, 0.0]])
    labels = np.array(["X", "X", "Y", "Y", "Y"], dtype=object)
    rng = np.random.default_rng(3)
    b = mine_round_robin(emb, labels, 40, 0.5, rng, pairs=[("X", "Y")])
    for a, p, n in zip(b.anchors, b.positives, b.negatives):
        d_ap = np.linalg.norm(emb[a] - emb[p])
        semi = [j for j in (2, 3, 4) if is_semi_hard(d_ap, np.linalg.norm(emb[a] - emb[j]), 0.5)]
        if semi:
            assert n in semi


def test_degenerate_geometry_still_fills_batch():
    emb = np.zeros((9, 3))
    labels = ["a", "a", "a", "b", "b", "b", "c", "c", "c"]
    b = mine_round_robin(emb, labels, 17, 0.2, np.random.default_rng(0))
    assert len(b) == 17
    assert set(b.negatives) <= set(range(9))


def test_mining_label_constraints_and_balance(rng):
    emb = rng.normal(size=(60, 5))
    labels = np.array(["a"] * 30 + ["b"] * 20 + ["c"] * 10, dtype=object)
    for size in (6, 7, 50, 101):
        b = mine_round_robin(emb, labels, size, 0.3, rng)
        assert np.all(labels[b.anchors] == labels[b.positives])
        assert np.all(labels[b.anchors] != labels[b.negatives])
        assert np.all(b.anchors != b.positives)
        counts = Counter(zip(b.anchor_labels, b.negative_labels))
        assert len(counts) == 6 or size < 6
        assert max(counts.values()) - min(counts.values()) <= 1


def test_mining_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(MiningError):
        mine_round_robin(np.zeros((4, 2)), ["a"] * 4, 4, 0.2, rng)
    with pytest.raises(MiningError, match="'b'"):
        mine_round_robin(np.zeros((4, 2)), ["a", "a", "a", "b"], 4, 0.2, rng)


def test_allocation_independent_of_row_order(rng):
    emb = rng.normal(size=(40, 3))
    labels = np.array(["a"] * 15 + ["b"] * 15 + ["c"] * 10, dtype=object)
    perm = rng.permutation(40)

    def epoch_counts(e, l):
        r = np.random.default_rng(5)
        pairs = class_pairs(l, r)
        c = Counter()
        for k in range(3):
            b = mine_round_robin(e, l, 16, 0.2, r, pairs, offset=16 * k)
            c.update(zip(b.anchor_labels, b.negative_labels))
        return c

    assert epoch_counts(emb, labels) == epoch_counts(emb[perm], labels[perm])


# -- combined loss -----------------------------------------------------------


def _setup(seed=0):
    rng = np.random.default_rng(seed)
    ae = init_autoencoder(6, (5,), 3, rng)
    data = rng.normal(size=(30, 6))
    labels = np.array(["a"] * 10 + ["b"] * 10 + ["c"] * 10, dtype=object)
    batch = mine_round_robin(ae.encode(data), labels, 12, 0.5, rng)
    return ae, data, batch


def test_gamma_zero_is_plain_anchor_autoencoder():
    from zdt.neural_core import autoencoder_step
    ae, data, batch = _setup()
    step = combined_loss_step(ae, batch, data, 0.5, 1.0, 0.0)
    loss, grads = autoencoder_step(ae, data[batch.anchors])
    assert step.loss == pytest.approx(loss)
    for g, h in zip(step.grads, grads):
        np.testing.assert_allclose(g, h, atol=1e-15)


def test_beta_zero_easy_triplets_zero_grad():
    ae, data, batch = _setup()
    step = combined_loss_step(ae, batch, data, 1e-9, 0.0, 1.0)
    # force every triplet easy: tiny margin and negatives far away
    data2 = data.copy()
    data2[batch.negatives] += 1e3
    step = combined_loss_step(ae, batch, data2, 1e-9, 0.0, 1.0)
    if step.triplet == 0.0:
        assert all(not g.any() for g in step.grads)


def test_beta_zero_inactive_hinge_exact():
    ae, data, batch = _setup()
    z = ae.encode(data)
    d_ap = np.sum((z[batch.anchors] - z[batch.positives]) ** 2, axis=1)
    d_an = np.sum((z[batch.anchors] - z[batch.negatives]) ** 2, axis=1)
    alpha = 1e-6
    easy = d_an > d_ap + alpha
    keep = np.flatnonzero(easy)
    assert len(keep) > 0
    from zdt.novelty_training import TripletBatch
    sub = TripletBatch(batch.anchors[keep], batch.positives[keep], batch.negatives[keep],
                       batch.anchor_labels[keep], batch.negative_labels[keep])
    step = combined_loss_step(ae, sub, data, alpha, 0.0, 1.0)
    assert step.loss == 0.0
    assert all(not g.any() for g in step.grads)


@pytest.mark.parametrize("seed", range(5))
def test_combined_gradient_finite_differences(seed):
    ae, data, batch = _setup(seed)
    beta, gamma, alpha = 0.7, 1.3, 0.5

    def total():
        return combined_loss_step(ae, batch, data, alpha, beta, gamma).loss

    step = combined_loss_step(ae, batch, data, alpha, beta, gamma)
    for p, g in zip(ae.params(), step.grads):
        assert rel_err(g, numeric_grad(total, p)) < 1e-4


def test_auto_balance():
    assert auto_balance_weights(0.5, 0.5) == (1.0, 1.0)
    assert auto_balance_weights(1.0, 0.01) == (1.0, pytest.approx(100.0))
    assert auto_balance_weights(1.0, 0.0) == (1.0, 1e3)
    assert auto_balance_weights(1e-6, 10.0) == (1.0, 1e-3)


def test_collapse_metric():
    rng = np.random.default_rng(0)
    assert latent_collapse_metric(rng.normal(size=(500, 5))) == 5
    t = np.zeros((200, 5))
    t[:, 2] = rng.normal(size=200)
    assert latent_collapse_metric(t) == 1
    # direct arithmetic: variances (10,10,10,1e-12,1e-12)
    z = rng.normal(size=(4000, 5))
    z = (z - z.mean(0)) / z.std(0) * np.sqrt([10, 10, 10, 1e-12, 1e-12])
    var = z.var(axis=0)
    assert np.sum(var > 0.01 * var.sum() / 5) == 3
    assert latent_collapse_metric(z, 0.01) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(alpha=0)
    with pytest.raises(ValueError):
        TrainingConfig(beta=0.0, gamma=0.0)


def _blobs(rng, centers, n=60, scale=0.3):
    x = np.vstack([rng.normal(c, scale, size=(n, len(c))) for c in centers])
    y = np.repeat([f"c{i}" for i in range(len(centers))], n).astype(object)
    return x, y


def test_training_separates_two_classes(rng):
    c = np.zeros(6)
    x, y = _blobs(rng, [c, c + 2.0])
    res = train_novelty_detector(x, y, TrainingConfig(epochs=15, batch_size=32, seed=1, widths=(5,), latent_dim=3))
    z = res.embeddings
    same, diff = [], []
    for i in range(0, len(z), 7):
        for j in range(i + 1, len(z), 7):
            (same if y[i] == y[j] else diff).append(np.linalg.norm(z[i] - z[j]))
    assert np.mean(diff) > np.mean(same)


def test_single_class_rejected(rng):
    with pytest.raises(MiningError):
        train_novelty_detector(rng.normal(size=(10, 4)), ["a"] * 10, TrainingConfig(epochs=1))


def test_log_records_and_stream(rng):
    x, y = _blobs(rng, [np.zeros(4), np.ones(4)], n=20)
    buf = io.StringIO()
    res = train_novelty_detector(x, y, TrainingConfig(epochs=3, batch_size=16, widths=(4,), latent_dim=2), buf)
    lines = [json.loads(l) for l in buf.getvalue().splitlines()]
    assert [l["epoch"] for l in lines] == [0, 1, 2]
    assert set(lines[0]) == {"epoch", "M", "L", "combined", "active_dims"}
    assert lines == res.log


def test_combined_loss_mostly_decreasing(rng):
    x, y = _blobs(rng, [np.zeros(6), np.full(6, 1.5), np.r_[np.ones(3), -np.ones(3)]], n=40)
    cfg = TrainingConfig(epochs=40, batch_size=120, lr=1e-4, beta=1.0, gamma=1.0, seed=2, widths=(5,), latent_dim=3)
    res = train_novelty_detector(x, y, cfg)
    comb = [r["combined"] for r in res.log]
    ups = sum(b > a for a, b in zip(comb, comb[1:]))
    assert ups <= 0.05 * len(comb)
