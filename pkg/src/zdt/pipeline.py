"""Two-stage detection: anomaly gate, novelty detector, nearest attack type.

Inference follows the fixed flow

    features -> min-max -> anomaly AE loss -> (gate) -> ND normalizer
             -> novelty AE loss -> known_attack / zdt -> kNN attribution

The novelty stage always renormalizes the *raw* feature vector with its own
parameters; it never sees the min-max output.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .flow_data import N_FEATURES, FlowRecord, UnknownHostError, assemble_features
from .graph_features import GraphArtifacts
from .neural_core import Autoencoder, AutoencoderConfig, TrainingDiverged, train_autoencoder
from .novelty_training import NoveltyTrainingResult, TrainingConfig, train_novelty_detector
from .preprocess import (
    MinMaxParams,
    NdNormalizerParams,
    fit_minmax,
    fit_nd_normalizer,
    transform_minmax,
    transform_nd,
)

logger = logging.getLogger(__name__)

BENIGN = "benign"
KNOWN_ATTACK = "known_attack"
ZDT = "zdt"
CATEGORIES = (BENIGN, KNOWN_ATTACK, ZDT)
VERDICT_COLUMNS = (
    "record_id", "ad_loss", "nd_loss", "category", "cata_class", "cata_probability",
    "ingest_error",
)


@dataclass
class AnomalyDetector:
    model: Autoencoder
    scaler: MinMaxParams
    threshold: float

    def __post_init__(self):
        if not (math.isfinite(self.threshold) and self.threshold > 0):
            raise ValueError(f"anomaly threshold must be finite and positive, got {self.threshold}")

    def loss(self, features) -> np.ndarray:
        x = transform_minmax(np.atleast_2d(features), self.scaler)
        return self.model.reconstruction_loss(x)


@dataclass
class NoveltyDetector:
    model: Autoencoder
    normalizer: NdNormalizerParams
    threshold: float
    ref_embeddings: np.ndarray
    ref_labels: np.ndarray
    k: int = 10

    def __post_init__(self):
        self.ref_labels = np.asarray(self.ref_labels, dtype=object)
        if len(self.ref_embeddings) == 0:
            raise ValueError("empty reference set")
        if not 1 <= self.k <= len(self.ref_embeddings):
            raise ValueError(f"k={self.k} outside [1, {len(self.ref_embeddings)}]")

    def normalize(self, features) -> np.ndarray:
        return transform_nd(np.atleast_2d(features), self.normalizer)

    def loss(self, features) -> np.ndarray:
        return self.model.reconstruction_loss(self.normalize(features))

    def embed(self, features) -> np.ndarray:
        return self.model.encode(self.normalize(features))


@dataclass
class Verdict:
    record_id: int
    ad_loss: float
    category: str = BENIGN
    nd_loss: float | None = None
    cata_class: str | None = None
    cata_probability: float | None = None
    ingest_error: str | None = None


# -- features ----------------------------------------------------------------


def featurize(
    records: Sequence[FlowRecord],
    artifacts: GraphArtifacts,
    strict: bool = True,
) -> tuple[np.ndarray, list[str | None]]:
    """Feature matrix for ``records`` plus a per-row ingestion error.

    With ``strict=False`` an endpoint missing from ``artifacts`` gets all-zero
    host features and a cross-community flag of 1.0, and the row carries an
    ``unknown_host:<ip>`` error instead of raising.
    """
    x = np.empty((len(records), N_FEATURES))
    errors: list[str | None] = [None] * len(records)
    zero = (0.0,) * 9
    for i, r in enumerate(records):
        try:
            x[i] = assemble_features(r, artifacts.host_features, artifacts.communities, i).values
        except UnknownHostError as exc:
            if strict:
                raise
            errors[i] = f"unknown_host:{exc.host}"
            hf = {r.src_ip: artifacts.host_features.get(r.src_ip, zero),
                  r.dst_ip: artifacts.host_features.get(r.dst_ip, zero)}
            cs = dict(artifacts.communities)
            cs.setdefault(r.src_ip, -1)
            cs.setdefault(r.dst_ip, -2)
            x[i] = assemble_features(r, hf, cs, i).values
    return x, errors


# -- thresholds and training -------------------------------------------------


def select_threshold(losses, quantile: float) -> float:
    """Empirical quantile with linear interpolation between order statistics."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("no losses")
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie in (0, 1)")
    return float(np.quantile(losses, quantile, method="linear"))


def _positive(t: float) -> float:
    # an all-perfect validation set would give a zero threshold
    return t if t > 0 else np.finfo(np.float64).tiny


def split_indices(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class AnomalyConfig:
    network: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    quantile: float = 0.995
    val_fraction: float = 0.2


def train_anomaly_detector(benign_features, config: AnomalyConfig | None = None) -> AnomalyDetector:
    """Fit min-max on the training split, train the AE, threshold on validation."""
    cfg = config or AnomalyConfig()
    x = np.asarray(benign_features, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least two benign rows")
    rng = np.random.default_rng(cfg.network.seed)
    tr, va = split_indices(len(x), cfg.val_fraction, rng)
    if len(va) == 0:
        va = tr
    scaler = fit_minmax(x[tr])
    xt = transform_minmax(x[tr], scaler)
    xv = transform_minmax(x[va], scaler)
    model, _ = train_autoencoder(xt, xv, cfg.network)
    losses = model.reconstruction_loss(xv)
    if not np.all(np.isfinite(losses)):
        raise TrainingDiverged("non-finite validation loss in anomaly detector")
    return AnomalyDetector(model, scaler, _positive(select_threshold(losses, cfg.quantile)))


def refit_scaler(ad: AnomalyDetector, benign_sample) -> AnomalyDetector:
    """Same network, min-max refitted on benign traffic from a new network."""
    return replace(ad, scaler=fit_minmax(benign_sample))


@dataclass
class NoveltyConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    quantile: float = 0.99
    val_fraction: float = 0.1
    k: int = 10


def fit_novelty_detector(
    attack_features,
    labels,
    config: NoveltyConfig | None = None,
    log_stream: IO[str] | None = None,
) -> tuple[NoveltyDetector, NoveltyTrainingResult]:
    """Normalize, train with the metric-learning objective, threshold on validation.

    The validation split is stratified per class; the reference set for
    attribution is every training embedding.
    """
    cfg = config or NoveltyConfig()
    x = np.asarray(attack_features, dtype=np.float64)
    labels = np.asarray(labels, dtype=object)
    rng = np.random.default_rng(cfg.training.seed + 7919)
    tr_parts, va_parts = [], []
    for c in sorted(set(labels)):
        idx = np.flatnonzero(labels == c)
        t, v = split_indices(len(idx), cfg.val_fraction, rng)
        if len(t) < 2:
            t, v = np.arange(len(idx)), np.array([], dtype=np.int64)
        tr_parts.append(idx[t])
        va_parts.append(idx[v])
    tr = np.sort(np.concatenate(tr_parts))
    va = np.sort(np.concatenate(va_parts))
    if len(va) == 0:
        va = tr

    normalizer = fit_nd_normalizer(x[tr])
    xt = transform_nd(x[tr], normalizer)
    result = train_novelty_detector(xt, labels[tr], cfg.training, log_stream=log_stream)
    val_losses = result.model.reconstruction_loss(transform_nd(x[va], normalizer))
    if not np.all(np.isfinite(val_losses)):
        raise TrainingDiverged("non-finite validation loss in novelty detector")
    threshold = _positive(select_threshold(val_losses, cfg.quantile))
    k = min(cfg.k, len(tr))
    nd = NoveltyDetector(result.model, normalizer, threshold, result.embeddings, result.labels, k)
    return nd, result


# -- attribution -------------------------------------------------------------


def nearest_neighbors(queries, reference, k: int, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the ``k`` nearest reference rows.

    Equal distances are ordered by reference index.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    ref = np.asarray(reference, dtype=np.float64)
    if len(ref) == 0:
        raise ValueError("empty reference set")
    if not 1 <= k <= len(ref):
        raise ValueError(f"k={k} outside [1, {len(ref)}]")
    idx = np.empty((len(q), k), dtype=np.int64)
    dist = np.empty((len(q), k))
    for s in range(0, len(q), chunk):
        d = cdist(q[s:s + chunk], ref)
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[s:s + chunk] = order
        dist[s:s + chunk] = np.take_along_axis(d, order, axis=1)
    return idx, dist


def _vote(labels: np.ndarray, dists: np.ndarray, class_ids: dict) -> tuple[str, float]:
    tally: dict[str, list[float]] = {}
    for lab, d in zip(labels, dists):
        tally.setdefault(lab, []).append(d)
    best = min(tally, key=lambda c: (-len(tally[c]), float(np.mean(tally[c])), class_ids[c]))
    return best, len(tally[best]) / len(labels)


def cata_batch(latents, ref_embeddings, ref_labels, k: int) -> list[tuple[str, float]]:
    ref_labels = np.asarray(ref_labels, dtype=object)
    class_ids = {c: i for i, c in enumerate(sorted(set(ref_labels)))}
    idx, dist = nearest_neighbors(latents, ref_embeddings, k)
    return [_vote(ref_labels[i], d, class_ids) for i, d in zip(idx, dist)]


def cata(latent, ref_embeddings, ref_labels, k: int) -> tuple[str, float]:
    """Closest attack type: majority class among the ``k`` nearest references.

    Returns the class and its share of the ``k`` votes. Vote ties go to the
    class with the smaller mean neighbor distance, then the lower class id
    (position in the sorted class list).
    """
    return cata_batch(np.atleast_2d(latent), ref_embeddings, ref_labels, k)[0]


def neighbor_fractions(latents, ref_embeddings, ref_labels, k: int) -> tuple[list[str], np.ndarray]:
    """Per-query share of the ``k`` neighbors held by each reference class."""
    ref_labels = np.asarray(ref_labels, dtype=object)
    classes = sorted(set(ref_labels))
    col = {c: i for i, c in enumerate(classes)}
    idx, _ = nearest_neighbors(latents, ref_embeddings, k)
    out = np.zeros((len(idx), len(classes)))
    for r, row in enumerate(idx):
        for lab in ref_labels[row]:
            out[r, col[lab]] += 1
    return classes, out / k


# -- inference ---------------------------------------------------------------


def score_features(
    features,
    ad: AnomalyDetector,
    nd: NoveltyDetector,
    record_ids: Sequence[int] | None = None,
    errors: Sequence[str | None] | None = None,
) -> list[Verdict]:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = len(x)
    ids = list(range(n)) if record_ids is None else list(record_ids)
    errs = [None] * n if errors is None else list(errors)
    ad_loss = ad.loss(x) if n else np.empty(0)
    gated = np.flatnonzero(ad_loss > ad.threshold)
    verdicts = [Verdict(ids[i], float(ad_loss[i]), ingest_error=errs[i]) for i in range(n)]
    if len(gated):
        z = nd.normalize(x[gated])
        nd_loss = nd.model.reconstruction_loss(z)
        attributions = cata_batch(nd.model.encode(z), nd.ref_embeddings, nd.ref_labels, nd.k)
        for i, loss, (cls, prob) in zip(gated, nd_loss, attributions):
            v = verdicts[i]
            v.nd_loss = float(loss)
            v.category = KNOWN_ATTACK if loss <= nd.threshold else ZDT
            v.cata_class, v.cata_probability = cls, float(prob)
    return verdicts


def infer(
    records: Sequence[FlowRecord],
    artifacts: GraphArtifacts,
    ad: AnomalyDetector,
    nd: NoveltyDetector,
) -> list[Verdict]:
    """Score flows end to end; one verdict per record, in input order."""
    x, errors = featurize(records, artifacts, strict=False)
    return score_features(x, ad, nd, errors=errors)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_verdicts_csv(verdicts: Iterable[Verdict], dest: IO[str] | str) -> None:
    if isinstance(dest, str):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            write_verdicts_csv(verdicts, fh)
        return
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(VERDICT_COLUMNS)
    for v in verdicts:
        w.writerow([_fmt(getattr(v, c)) for c in VERDICT_COLUMNS])


def read_verdicts_csv(source: IO[str] | str) -> list[Verdict]:
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return read_verdicts_csv(fh)
    out = []
    for row in csv.DictReader(source):
        opt = lambda key, f: f(row[key]) if row.get(key) else None  # noqa: E731
        out.append(Verdict(
            record_id=int(row["record_id"]),
            ad_loss=float(row["ad_loss"]),
            category=row["category"],
            nd_loss=opt("nd_loss", float),
            cata_class=opt("cata_class", str),
            cata_probability=opt("cata_probability", float),
            ingest_error=opt("ingest_error", str),
        ))
    return out


# -- latent export -----------------------------------------------------------


def pca_project(latents, n_components: int = 3) -> np.ndarray:
    """Project centred latents onto their top principal axes.

    Each axis is sign-fixed so its largest-magnitude loading is positive.
    """
    z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    zc = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(zc, full_matrices=False)
    vt = vt[:n_components]
    signs = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    vt = vt * np.where(signs == 0, 1.0, signs)[:, None]
    proj = zc @ vt.T
    if proj.shape[1] < n_components:
        proj = np.hstack([proj, np.zeros((len(proj), n_components - proj.shape[1]))])
    return proj


def export_latent(nd: NoveltyDetector, features, labels, dest: IO[str] | str) -> np.ndarray:
    """Write ``z0..z4,pca0..pca2,label`` rows for external plotting."""
    z = nd.embed(features)
    proj = pca_project(z, 3)
    rows = np.hstack([z, proj])
    if isinstance(dest, str):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _write_latent(rows, labels, z.shape[1], fh)
    else:
        _write_latent(rows, labels, z.shape[1], dest)
    return rows


def _write_latent(rows, labels, dim, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([f"z{i}" for i in range(dim)] + ["pca0", "pca1", "pca2", "label"])
    for row, lab in zip(rows, labels):
        w.writerow([repr(float(v)) for v in row] + ["" if lab is None else str(lab)])
