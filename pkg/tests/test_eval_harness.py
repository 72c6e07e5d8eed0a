import io
import itertools

import numpy as np
import pytest

from zdt.eval_harness import (
    ATTACK_CLASSES,
    METRIC,
    RECON,
    HoldoutExperimentConfig,
    LabeledDataset,
    SyntheticConfig,
    UndefinedAUC,
    _holdout_cap,
    build_dataset,
    generate_synthetic_dataset,
    knn_accuracy_sweep,
    mode_config,
    precision_recall,
    roc_auc,
    run_holdout_experiment,
    write_cata_distribution,
    write_holdout_rows,
)
from zdt.neural_core import AutoencoderConfig, init_autoencoder
from zdt.novelty_training import TrainingConfig
from zdt.pipeline import AnomalyConfig, NoveltyConfig, NoveltyDetector, Verdict
from zdt.preprocess import fit_nd_normalizer

SMALL_COUNTS = {"benign": 3000, **{c: 240 for c in ATTACK_CLASSES}}


def pairwise_auc(scores, truth):
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@pytest.fixture(scope="module")
def small_records():
    return generate_synthetic_dataset(SyntheticConfig(counts=dict(SMALL_COUNTS), seed=3))


@pytest.fixture(scope="module")
def small_dataset(small_records):
    return build_dataset(small_records)


# -- metrics -------------------------------------------------------------------


def test_precision_recall_confusion():
    pred = [True] * 3 + [True] + [False] * 2 + [False] * 4
    truth = [True] * 3 + [False] + [True] * 2 + [False] * 4
    r = precision_recall(pred, truth)
    assert (r.precision, r.recall) == (0.75, 0.6)
    assert (r.tp, r.fp, r.fn) == (3, 1, 2)
    assert not r.degenerate


def test_precision_recall_verdicts_and_edge_cases():
    vs = [Verdict(0, 1.0, "zdt", 2.0), Verdict(1, 0.1), Verdict(2, 1.0, "known_attack", 0.5)]
    r = precision_recall(vs, [True, False, False])
    assert (r.precision, r.recall) == (1.0, 1.0)
    r = precision_recall([False, False], [True, False])
    assert (r.precision, r.recall, r.degenerate) == (0.0, 0.0, True)
    with pytest.raises(ValueError):
        precision_recall([True], [True, False])


def test_precision_recall_matches_confusion(rng):
    for _ in range(50):
        p, t = rng.random(30) < 0.4, rng.random(30) < 0.3
        r = precision_recall(p, t)
        tp = int(np.sum(p & t))
        assert r.precision == (tp / p.sum() if p.sum() else 0.0)
        assert r.recall == (tp / t.sum() if t.sum() else 0.0)


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert roc_auc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0]) == 0.75
    with pytest.raises(UndefinedAUC):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_against_pairwise_oracle(rng):
    for _ in range(30):
        s = rng.integers(0, 5, size=25).astype(float)
        t = rng.random(25) < 0.4
        if t.all() or not t.any():
            continue
        assert roc_auc(s, t) == pytest.approx(pairwise_auc(s, t))


def test_auc_monotone_and_shuffle_invariance(rng):
    s = rng.normal(size=200)
    t = rng.random(200) < 0.3
    base = roc_auc(s, t)
    assert roc_auc(np.exp(3 * s) + 7, t) == pytest.approx(base)
    perm = rng.permutation(200)
    assert roc_auc(s[perm], t[perm]) == pytest.approx(base)


# -- generator -------------------------------------------------------------------


def test_generator_counts_and_determinism(small_records):
    from collections import Counter
    counts = Counter(r.label for r in small_records)
    assert dict(counts) == SMALL_COUNTS
    again = generate_synthetic_dataset(SyntheticConfig(counts=dict(SMALL_COUNTS), seed=3))
    assert again == small_records
    other = generate_synthetic_dataset(SyntheticConfig(counts=dict(SMALL_COUNTS), seed=4))
    assert other != small_records
    ts = [r.timestamp for r in small_records]
    assert ts == sorted(ts)


def test_scanning_source_out_degree(small_records, small_dataset):
    feats = small_dataset.artifacts.host_features
    benign_src = {r.src_ip for r in small_records if r.label == "benign"}
    scan_src = {r.src_ip for r in small_records if r.label == "scanning"}
    p95 = np.percentile([feats[h].out_degree for h in benign_src], 95)
    assert all(feats[h].out_degree > p95 for h in scan_src)


def test_archetype_signatures(small_records):
    def med(cls, attr):
        return np.median([getattr(r, attr) for r in small_records if r.label == cls])
    # exfil: fwd >> bwd; c2: longest; scanning: tiny byte counts
    assert med("exfil", "fwd_bytes") > 10 * med("exfil", "bwd_bytes")
    assert med("c2", "duration") > med("benign", "duration")
    assert med("scanning", "fwd_bytes") < med("benign", "fwd_bytes")
    assert med("scanning", "bwd_bytes") < med("benign", "bwd_bytes")


def test_attack_sources_are_dedicated(small_records):
    benign_src = {r.src_ip for r in small_records if r.label == "benign"}
    attack_src = {r.src_ip for r in small_records if r.label != "benign"}
    assert not benign_src & attack_src


def test_unknown_class_rejected():
    with pytest.raises(ValueError):
        SyntheticConfig(counts={"benign": 10, "ddos": 5})


# -- holdout protocol --------------------------------------------------------------


@pytest.mark.parametrize("n_other,frac", [(100, 0.02), (5000, 0.02), (49, 0.02), (1000, 0.5), (7, 0.2)])
def test_holdout_cap_strict(n_other, frac):
    h = _holdout_cap(n_other, frac)
    assert h / (n_other + h) < frac
    assert (h + 1) / (n_other + h + 1) >= frac


def test_mode_config():
    base = NoveltyConfig()
    r = mode_config(base, RECON, 4)
    assert r.training.gamma == 0.0 and r.training.beta == 1.0 and r.training.seed == 4
    m = mode_config(base, METRIC, 4)
    assert m.training.gamma is None and m.training.seed == 4


def _fast_config(holdout, seeds=(0, 1)):
    return HoldoutExperimentConfig(
        holdout=holdout,
        seeds=seeds,
        anomaly=AnomalyConfig(network=AutoencoderConfig(epochs=3)),
        novelty=NoveltyConfig(training=TrainingConfig(epochs=2)),
    )


def test_holdout_experiment_shape_and_integrity(small_dataset):
    rep = run_holdout_experiment(small_dataset, _fast_config("botnet"))
    assert len(rep.rows) == 2 * 2
    assert {(r.seed, r.mode) for r in rep.rows} == set(itertools.product((0, 1), (METRIC, RECON)))
    for a in rep.audits:
        assert a.holdout_fraction < 0.02
        assert "botnet" not in a.nd_train_labels
        assert a.n_holdout_eval > 0
    for mode in (METRIC, RECON):
        dist = rep.cata_distribution(mode)
        assert "botnet" not in dist
        assert sum(dist.values()) == pytest.approx(1.0)
    for r in rep.rows:
        assert 0 <= r.precision <= 1 and 0 <= r.recall <= 1 and 0 <= r.auc <= 1

    buf = io.StringIO()
    write_holdout_rows(rep.rows, buf)
    assert buf.getvalue().splitlines()[0] == "seed,mode,holdout,precision,recall,auc"
    assert len(buf.getvalue().splitlines()) == 5
    buf = io.StringIO()
    write_cata_distribution("botnet", rep.cata_distribution(), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "holdout,predicted_class,probability"
    assert sum(float(ln.split(",")[2]) for ln in lines[1:]) == pytest.approx(1.0)


def test_holdout_errors(small_dataset):
    with pytest.raises(ValueError):
        run_holdout_experiment(small_dataset, _fast_config("ddos"))
    with pytest.raises(ValueError):
        HoldoutExperimentConfig(holdout="c2", max_fraction=0.0)
    two = LabeledDataset(
        small_dataset.features[:10], np.array(["benign"] * 4 + ["c2"] * 3 + ["exfil"] * 3, dtype=object)
    )
    with pytest.raises(ValueError):
        run_holdout_experiment(two, _fast_config("c2"))


# -- kNN sweep -------------------------------------------------------------------


def test_knn_sweep_perfect_clusters():
    rng = np.random.default_rng(0)
    ae = init_autoencoder(4, (), 2, rng)
    x = np.vstack([rng.normal(c, 0.01, size=(20, 4)) for c in (-5, 0, 5)])
    y = np.repeat(["a", "b", "c"], 20).astype(object)
    norm = fit_nd_normalizer(x)
    nd = NoveltyDetector(ae, norm, 1.0, np.zeros((1, 2)), ["a"], 1)
    nd.ref_embeddings, nd.ref_labels = nd.embed(x), y
    acc = knn_accuracy_sweep(nd, x, y, [1, 5, 19])
    assert list(acc) == [1, 5, 19]
    assert acc[1] == 1.0
    assert all(0 <= v <= 1 for v in acc.values())
