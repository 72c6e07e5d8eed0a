"""Metrics, the held-out-class protocol, kNN sweeps and a synthetic flow generator."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import IO, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .flow_data import FlowRecord
from .graph_features import GraphArtifacts, graph_artifacts
from .pipeline import (
    BENIGN,
    ZDT,
    AnomalyConfig,
    AnomalyDetector,
    NoveltyConfig,
    NoveltyDetector,
    Verdict,
    _vote,
    fit_novelty_detector,
    featurize,
    nearest_neighbors,
    neighbor_fractions,
    score_features,
    train_anomaly_detector,
)

logger = logging.getLogger(__name__)

ATTACK_CLASSES = ("scanning", "botnet", "exfil", "c2")


# -- metrics -----------------------------------------------------------------


class UndefinedAUC(ValueError):
    pass


@dataclass(frozen=True)
class PRResult:
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    degenerate: bool = False  # no predicted positives


def precision_recall(predicted, truth) -> PRResult:
    """Precision and recall of ZDT detection.

    ``predicted`` is a sequence of verdicts (positive = category ``zdt``) or
    of booleans. Empty denominators give 0.0.
    """
    pred = np.array(
        [v.category == ZDT if isinstance(v, Verdict) else bool(v) for v in predicted], dtype=bool
    )
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {truth.size} labels")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return PRResult(precision, recall, tp, fp, fn, degenerate=(tp + fp == 0))


def roc_auc(scores, truth) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape:
        raise ValueError("length mismatch")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("AUC needs both positive and negative examples")
    ranks = rankdata(scores)  # average ranks on ties
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def zdt_scores(verdicts: Sequence[Verdict]) -> np.ndarray:
    """ND loss for gated records, 0 for records the anomaly gate passed as benign."""
    return np.array([v.nd_loss if v.nd_loss is not None else 0.0 for v in verdicts])


# -- synthetic flows ---------------------------------------------------------


@dataclass(frozen=True)
class ArchetypeParams:
    """Flow signature of one attack variant.

    ``n_sources`` dedicated hosts emit the flows; they never appear in benign
    traffic. Targets are ``fan_out`` internal hosts or attacker-controlled
    external addresses.
    """

    n_sources: int
    fan_out: int
    internal_targets: bool
    ports: tuple[int, ...] = ()
    port_spread: int = 0  # >0: uniform random dst port in [1, port_spread]
    fwd_bytes: float = 500.0
    bwd_bytes: float = 500.0
    byte_sigma: float = 0.5
    duration: float = 1.0
    duration_sigma: float = 0.5
    beacon_period: float | None = None


# each attack class mixes its variants in equal shares
DEFAULT_ARCHETYPES: dict[str, tuple[ArchetypeParams, ...]] = {
    "scanning": (
        ArchetypeParams(  # SYN sweep
            n_sources=1, fan_out=300, internal_targets=True, port_spread=1024,
            fwd_bytes=60, bwd_bytes=40, byte_sigma=0.4, duration=0.01, duration_sigma=0.8,
        ),
        ArchetypeParams(  # service probing / banner grabs
            n_sources=2, fan_out=60, internal_targets=True, ports=(22, 80, 443, 445, 3389, 8080),
            fwd_bytes=300, bwd_bytes=800, byte_sigma=0.6, duration=0.2, duration_sigma=0.8,
        ),
    ),
    "botnet": (
        ArchetypeParams(  # IRC-style beacons
            n_sources=15, fan_out=2, internal_targets=False, ports=(6667, 8080),
            fwd_bytes=300, bwd_bytes=280, byte_sigma=0.25, duration=0.5, duration_sigma=0.4,
            beacon_period=60.0,
        ),
        ArchetypeParams(  # HTTP polling
            n_sources=10, fan_out=3, internal_targets=False, ports=(80, 443),
            fwd_bytes=600, bwd_bytes=1500, byte_sigma=0.4, duration=1.0, duration_sigma=0.5,
            beacon_period=300.0,
        ),
    ),
    "exfil": (
        ArchetypeParams(  # bulk upload
            n_sources=4, fan_out=3, internal_targets=False, ports=(443, 22, 21),
            fwd_bytes=5e6, bwd_bytes=3e3, byte_sigma=0.9, duration=120.0, duration_sigma=0.7,
        ),
        ArchetypeParams(  # DNS tunnelling
            n_sources=3, fan_out=1, internal_targets=False, ports=(53,),
            fwd_bytes=220, bwd_bytes=120, byte_sigma=0.3, duration=0.05, duration_sigma=0.5,
        ),
    ),
    "c2": (
        ArchetypeParams(  # long-lived HTTPS sessions
            n_sources=8, fan_out=2, internal_targets=False, ports=(443, 8443),
            fwd_bytes=1500, bwd_bytes=1200, byte_sigma=0.6, duration=1800.0, duration_sigma=0.6,
            beacon_period=600.0,
        ),
        ArchetypeParams(  # interactive reverse shell
            n_sources=3, fan_out=2, internal_targets=False, ports=(4444, 1337),
            fwd_bytes=20000, bwd_bytes=5000, byte_sigma=0.8, duration=300.0, duration_sigma=0.8,
        ),
    ),
}


def _default_counts() -> dict[str, int]:
    return {BENIGN: 40000, **{c: 2500 for c in ATTACK_CLASSES}}


@dataclass
class SyntheticConfig:
    counts: dict[str, int] = field(default_factory=_default_counts)
    archetypes: dict[str, tuple[ArchetypeParams, ...]] = field(
        default_factory=lambda: dict(DEFAULT_ARCHETYPES)
    )
    n_clients: int = 400
    n_departments: int = 6
    n_external: int = 300
    span_seconds: int = 86400
    start_time: int = 1_609_459_200
    seed: int = 0

    def __post_init__(self):
        unknown = [c for c in self.counts if c != BENIGN and c not in self.archetypes]
        if unknown:
            raise ValueError(f"no archetype for classes {unknown}")
        for c, variants in self.archetypes.items():
            if isinstance(variants, ArchetypeParams):
                self.archetypes[c] = (variants,)


_DEPT_PORTS = (445, 139, 3389, 22, 8080)
_CORE_PORTS = (53, 88, 389, 25, 443)
_WEB_PORTS = (80, 443)


def _zipf_weights(n: int, s: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def generate_synthetic_dataset(config: SyntheticConfig | None = None) -> list[FlowRecord]:
    """Labelled flows from one simulated enterprise network.

    Benign traffic: clients in departments talk to their department servers,
    shared core services and popular external sites, with Zipf-like host
    popularity. Each attack class is a mix of :class:`ArchetypeParams`
    variants emitted by dedicated source hosts. Records come back sorted by
    timestamp; output is fully determined by ``seed``.
    """
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    n_dep = cfg.n_departments
    clients = [f"10.{1 + i % n_dep}.{1 + i // 250}.{1 + i % 250}" for i in range(cfg.n_clients)]
    client_dept = [i % n_dep for i in range(cfg.n_clients)]
    dept_servers = [[f"10.{1 + d}.0.{s + 1}" for s in range(3)] for d in range(n_dep)]
    core = [f"10.{100}.0.{s + 1}" for s in range(len(_CORE_PORTS))]
    external = [f"198.{51 + i // 250}.{100 + (i // 50) % 5}.{1 + i % 50}" for i in range(cfg.n_external)]
    internal = clients + [s for d in dept_servers for s in d] + core

    client_p = _zipf_weights(cfg.n_clients)[rng.permutation(cfg.n_clients)]
    ext_p = _zipf_weights(cfg.n_external)

    records: list[tuple] = []
    t0, span = cfg.start_time, cfg.span_seconds

    n_benign = cfg.counts.get(BENIGN, 0)
    src_i = rng.choice(cfg.n_clients, size=n_benign, p=client_p)
    kind = rng.choice(3, size=n_benign, p=[0.45, 0.3, 0.25])
    ts = t0 + rng.integers(0, span, size=n_benign)
    sport = rng.integers(49152, 65536, size=n_benign)
    dur = rng.lognormal(np.log(1.0), 1.2, size=n_benign)
    fwd = rng.lognormal(np.log(800), 1.0, size=n_benign)
    bwd = rng.lognormal(np.log(6000), 1.4, size=n_benign)
    ext_i = rng.choice(cfg.n_external, size=n_benign, p=ext_p)
    pick = rng.integers(0, 1 << 30, size=n_benign)
    for i in range(n_benign):
        src = clients[src_i[i]]
        if kind[i] == 0:
            dst = dept_servers[client_dept[src_i[i]]][pick[i] % 3]
            port = _DEPT_PORTS[pick[i] % len(_DEPT_PORTS)]
        elif kind[i] == 1:
            j = pick[i] % len(core)
            dst, port = core[j], _CORE_PORTS[j]
        else:
            dst, port = external[ext_i[i]], _WEB_PORTS[pick[i] % 2]
        records.append((int(ts[i]), src, dst, int(sport[i]), port,
                        float(dur[i]), int(fwd[i]), int(bwd[i]), BENIGN))

    n_infected = 0
    n_infra = 0
    for cls in sorted(c for c in cfg.counts if c != BENIGN):
        variants = cfg.archetypes[cls]
        shares = np.full(len(variants), cfg.counts[cls] // len(variants))
        shares[: cfg.counts[cls] % len(variants)] += 1
        for a, n in zip(variants, shares):
            sources = [f"10.{1 + (n_infected + i) % n_dep}.200.{1 + n_infected + i}"
                       for i in range(a.n_sources)]
            n_infected += a.n_sources
            if a.internal_targets:
                pick_t = rng.choice(len(internal), size=min(a.fan_out, len(internal)), replace=False)
                targets = [internal[i] for i in pick_t]
            else:
                targets = [f"185.{10 + (n_infra + i) // 200}.{(n_infra + i) % 200}.7"
                           for i in range(a.fan_out)]
                n_infra += a.fan_out
            records.extend(_attack_flows(rng, cls, a, int(n), sources, targets, t0, span))

    order = sorted(range(len(records)), key=lambda i: (records[i][0], i))
    return [FlowRecord(*records[i]) for i in order]


def _attack_flows(rng, cls, a: ArchetypeParams, n, sources, targets, t0, span):
    s_idx = rng.integers(len(sources), size=n)
    d_idx = rng.integers(len(targets), size=n)
    if a.port_spread:
        dport = rng.integers(1, a.port_spread + 1, size=n)
    else:
        dport = np.asarray(a.ports)[rng.integers(len(a.ports), size=n)]
    sport = rng.integers(49152, 65536, size=n)
    fwd = rng.lognormal(np.log(a.fwd_bytes), a.byte_sigma, size=n)
    bwd = rng.lognormal(np.log(a.bwd_bytes), a.byte_sigma, size=n)
    dur = rng.lognormal(np.log(a.duration), a.duration_sigma, size=n)
    if a.beacon_period:
        seq = np.zeros(len(sources), dtype=np.int64)
        offsets = rng.uniform(0, a.beacon_period, size=len(sources))
        jitter = rng.normal(0, 0.05 * a.beacon_period, size=n)
        ts = np.empty(n, dtype=np.int64)
        for i in range(n):
            s = s_idx[i]
            ts[i] = t0 + int(offsets[s] + seq[s] * a.beacon_period + jitter[i]) % span
            seq[s] += 1
    else:
        ts = t0 + rng.integers(0, span, size=n)
    return [
        (int(ts[i]), sources[s_idx[i]], targets[d_idx[i]], int(sport[i]), int(dport[i]),
         float(dur[i]), int(fwd[i]), int(bwd[i]), cls)
        for i in range(n)
    ]


# -- datasets ----------------------------------------------------------------


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    artifacts: GraphArtifacts | None = None

    def __len__(self) -> int:
        return len(self.labels)


def build_dataset(records: Sequence[FlowRecord], seed: int = 0) -> LabeledDataset:
    """One graph over every record, then the 24-feature matrix."""
    art = graph_artifacts(records, seed=seed)
    x, _ = featurize(records, art)
    labels = np.array([r.label or BENIGN for r in records], dtype=object)
    return LabeledDataset(x, labels, art)


# -- held-out class protocol -------------------------------------------------

METRIC = "metric"
RECON = "recon"


@dataclass
class HoldoutExperimentConfig:
    holdout: str
    max_fraction: float = 0.02
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    modes: tuple[str, ...] = (METRIC, RECON)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    novelty: NoveltyConfig = field(default_factory=NoveltyConfig)
    benign_eval_fraction: float = 0.25
    attack_eval_fraction: float = 0.2

    def __post_init__(self):
        if not 0 < self.max_fraction <= 1:
            raise ValueError("max_fraction must lie in (0, 1]")
        bad = set(self.modes) - {METRIC, RECON}
        if bad:
            raise ValueError(f"unknown modes {sorted(bad)}")


@dataclass
class HoldoutRow:
    seed: int
    mode: str
    holdout: str
    precision: float
    recall: float
    auc: float


@dataclass
class HoldoutAudit:
    seed: int
    n_eval: int
    n_holdout_eval: int
    nd_train_labels: tuple[str, ...]

    @property
    def holdout_fraction(self) -> float:
        return self.n_holdout_eval / self.n_eval


@dataclass
class HoldoutReport:
    rows: list[HoldoutRow] = field(default_factory=list)
    # (seed, mode) -> (classes, mean neighbour share per class over holdout rows)
    cata: dict[tuple[int, str], tuple[list[str], np.ndarray]] = field(default_factory=dict)
    audits: list[HoldoutAudit] = field(default_factory=list)

    def cata_distribution(self, mode: str = METRIC) -> dict[str, float]:
        """Neighbour share per known class, averaged over seeds."""
        acc: dict[str, float] = {}
        runs = [v for (s, m), v in self.cata.items() if m == mode]
        for classes, dist in runs:
            for c, p in zip(classes, dist):
                acc[c] = acc.get(c, 0.0) + p / len(runs)
        return acc


def mode_config(novelty: NoveltyConfig, mode: str, seed: int) -> NoveltyConfig:
    training = replace(novelty.training, seed=seed)
    if mode == RECON:
        training = replace(training, gamma=0.0, beta=1.0 if training.beta is None else training.beta)
    return replace(novelty, training=training)


def _holdout_cap(n_other: int, fraction: float) -> int:
    # largest h with h / (n_other + h) strictly below fraction
    if fraction >= 1:
        return n_other * 10**6
    h = int(np.floor(fraction * n_other / (1.0 - fraction)))
    while h > 0 and h / (n_other + h) >= fraction:
        h -= 1
    return h


def run_holdout_experiment(dataset: LabeledDataset, config: HoldoutExperimentConfig) -> HoldoutReport:
    """Train without one attack class and score how well it surfaces as ZDT.

    Per seed: benign rows split into AD training and evaluation; each known
    attack class split into ND training and evaluation; holdout rows go only
    to evaluation, subsampled to stay below ``max_fraction`` of it. The anomaly
    detector is shared by both modes of a seed.
    """
    labels = dataset.labels
    x = dataset.features
    if config.holdout not in set(labels):
        raise ValueError(f"holdout class {config.holdout!r} not in dataset")
    known = sorted(set(labels) - {BENIGN, config.holdout})
    if len(known) < 2:
        raise ValueError("need at least two known attack classes besides the holdout")

    report = HoldoutReport()
    for seed in config.seeds:
        rng = np.random.default_rng(seed)
        benign = rng.permutation(np.flatnonzero(labels == BENIGN))
        n_be = int(round(len(benign) * config.benign_eval_fraction))
        eval_idx = [benign[:n_be]]
        ad_train = np.sort(benign[n_be:])
        nd_train = []
        for c in known:
            idx = rng.permutation(np.flatnonzero(labels == c))
            n_e = int(round(len(idx) * config.attack_eval_fraction))
            eval_idx.append(idx[:n_e])
            nd_train.append(idx[n_e:])
        nd_train = np.sort(np.concatenate(nd_train))
        n_other = sum(len(e) for e in eval_idx)
        hold = rng.permutation(np.flatnonzero(labels == config.holdout))
        hold = hold[:max(1, _holdout_cap(n_other, config.max_fraction))]
        eval_idx.append(hold)
        eval_idx = np.sort(np.concatenate(eval_idx))

        audit = HoldoutAudit(seed, len(eval_idx), len(hold), tuple(sorted(set(labels[nd_train]))))
        if config.holdout in audit.nd_train_labels:
            raise AssertionError("holdout class leaked into novelty training")
        report.audits.append(audit)

        ad_cfg = replace(config.anomaly, network=replace(config.anomaly.network, seed=seed))
        ad = train_anomaly_detector(x[ad_train], ad_cfg)
        truth = labels[eval_idx] == config.holdout
        for mode in config.modes:
            nd, _ = fit_novelty_detector(x[nd_train], labels[nd_train], mode_config(config.novelty, mode, seed))
            verdicts = score_features(x[eval_idx], ad, nd, record_ids=eval_idx)
            pr = precision_recall(verdicts, truth)
            auc = roc_auc(zdt_scores(verdicts), truth)
            report.rows.append(HoldoutRow(seed, mode, config.holdout, pr.precision, pr.recall, auc))
            classes, frac = neighbor_fractions(nd.embed(x[hold]), nd.ref_embeddings, nd.ref_labels, nd.k)
            report.cata[(seed, mode)] = (classes, frac.mean(axis=0))
            logger.info("seed %d %s: precision %.3f recall %.3f auc %.3f",
                        seed, mode, pr.precision, pr.recall, auc)
    return report


def write_holdout_rows(rows: Sequence[HoldoutRow], dest: IO[str] | str) -> None:
    if isinstance(dest, str):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            return write_holdout_rows(rows, fh)
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(("seed", "mode", "holdout", "precision", "recall", "auc"))
    for r in rows:
        w.writerow((r.seed, r.mode, r.holdout, repr(r.precision), repr(r.recall), repr(r.auc)))


def write_cata_distribution(holdout: str, dist: Mapping[str, float], dest: IO[str] | str) -> None:
    """``holdout,predicted_class,probability`` rows, most likely class first."""
    if isinstance(dest, str):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            return write_cata_distribution(holdout, dist, fh)
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(("holdout", "predicted_class", "probability"))
    for c, p in sorted(dist.items(), key=lambda kv: (-kv[1], kv[0])):
        w.writerow((holdout, c, repr(float(p))))


# -- kNN sweep ---------------------------------------------------------------


def knn_accuracy_sweep(nd: NoveltyDetector, test_features, test_labels, ks: Sequence[int]) -> dict[int, float]:
    """Accuracy of the latent-space kNN attribution for each ``k``."""
    test_labels = np.asarray(test_labels, dtype=object)
    z = nd.embed(test_features)
    kmax = max(ks)
    idx, dist = nearest_neighbors(z, nd.ref_embeddings, kmax)
    class_ids = {c: i for i, c in enumerate(sorted(set(nd.ref_labels)))}
    out = {}
    for k in ks:
        pred = [_vote(nd.ref_labels[i[:k]], d[:k], class_ids)[0] for i, d in zip(idx, dist)]
        out[k] = float(np.mean(np.asarray(pred, dtype=object) == test_labels))
    return out


@dataclass
class KnnRow:
    seed: int
    mode: str
    accuracy: dict[int, float]


def run_knn_experiment(
    dataset: LabeledDataset,
    ks: Sequence[int],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    modes: Sequence[str] = (METRIC, RECON),
    novelty: NoveltyConfig | None = None,
    test_fraction: float = 0.2,
) -> list[KnnRow]:
    """Train on every attack class and sweep kNN accuracy on held-out rows."""
    novelty = novelty or NoveltyConfig()
    attack = np.flatnonzero(dataset.labels != BENIGN)
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tr, te = [], []
        for c in sorted(set(dataset.labels[attack])):
            idx = rng.permutation(attack[dataset.labels[attack] == c])
            n_te = int(round(len(idx) * test_fraction))
            te.append(idx[:n_te])
            tr.append(idx[n_te:])
        tr, te = np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))
        for mode in modes:
            nd, _ = fit_novelty_detector(
                dataset.features[tr], dataset.labels[tr], mode_config(novelty, mode, seed)
            )
            acc = knn_accuracy_sweep(nd, dataset.features[te], dataset.labels[te], ks)
            rows.append(KnnRow(seed, mode, acc))
            logger.info("seed %d %s: %s", seed, mode, acc)
    return rows


def anomaly_auc(ad: AnomalyDetector, benign_features, anomaly_features) -> float:
    scores = np.concatenate([ad.loss(benign_features), ad.loss(anomaly_features)])
    truth = np.r_[np.zeros(len(benign_features), bool), np.ones(len(anomaly_features), bool)]
    return roc_auc(scores, truth)
