"""Metric-learning training for the novelty detector.

The objective is ``beta * M + gamma * L``: ``M`` is the reconstruction MSE on
the anchors of a mined batch and ``L`` the mean triplet hinge on the latent
vectors of (anchor, positive, negative). Triplets are mined round-robin over
ordered class pairs, preferring semi-hard negatives.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .neural_core import (
    AdamState,
    Autoencoder,
    TrainingDiverged,
    adam_step,
    backward,
    forward,
    init_autoencoder,
    mse_loss,
)

logger = logging.getLogger(__name__)


class MiningError(ValueError):
    pass


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_labels: np.ndarray
    negative_labels: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)


@dataclass
class TrainingConfig:
    alpha: float = 0.2
    beta: float | None = None  # None: auto-balanced on the pilot batch
    gamma: float | None = None
    batch_size: int = 256
    epochs: int = 150
    lr: float = 1e-3
    seed: int = 0
    collapse_epsilon: float = 0.01
    widths: tuple[int, ...] = (16, 8)
    latent_dim: int = 5

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if (self.beta is not None and self.beta < 0) or (self.gamma is not None and self.gamma < 0):
            raise ValueError("loss weights must be non-negative")
        if self.beta is not None and self.gamma is not None and self.beta + self.gamma <= 0:
            raise ValueError("beta + gamma must be positive")


def triplet_loss(za, zp, zn, alpha: float):
    """Mean hinge ``max(|a-p|^2 - |a-n|^2 + alpha, 0)`` over the rows.

    Accepts single vectors or row batches. Returns ``(loss, ga, gp, gn)``;
    inactive triplets (including the kink) contribute zero gradient.
    """
    za, zp, zn = (np.asarray(z, dtype=np.float64) for z in (za, zp, zn))
    single = za.ndim == 1
    za, zp, zn = (np.atleast_2d(z) for z in (za, zp, zn))
    if not za.shape == zp.shape == zn.shape:
        raise ValueError("latent shapes differ")
    m = za.shape[0]
    d_ap = np.sum((za - zp) ** 2, axis=1)
    d_an = np.sum((za - zn) ** 2, axis=1)
    h = d_ap - d_an + alpha
    active = (h > 0)[:, None]
    loss = float(np.maximum(h, 0.0).mean())
    ga = np.where(active, 2.0 * (zn - zp), 0.0) / m
    gp = np.where(active, -2.0 * (za - zp), 0.0) / m
    gn = np.where(active, 2.0 * (za - zn), 0.0) / m
    if single:
        ga, gp, gn = ga[0], gp[0], gn[0]
    return loss, ga, gp, gn


def is_semi_hard(d_ap: float, d_an: float, alpha: float) -> bool:
    """``d(A,P) < d(A,N) < d(A,P) + alpha`` on plain Euclidean distances."""
    return bool(d_ap < d_an < d_ap + alpha)


def class_pairs(labels, rng: np.random.Generator | None = None) -> list[tuple[str, str]]:
    """All ordered (anchor class, negative class) pairs, optionally shuffled."""
    classes = sorted(set(labels))
    pairs = list(itertools.permutations(classes, 2))
    if rng is not None:
        pairs = [pairs[i] for i in rng.permutation(len(pairs))]
    return pairs


def _check_classes(labels: np.ndarray) -> dict[str, np.ndarray]:
    groups = {c: np.flatnonzero(labels == c) for c in sorted(set(labels))}
    if len(groups) < 2:
        raise MiningError(f"need at least two classes, got {sorted(groups)}")
    for c, idx in groups.items():
        if len(idx) < 2:
            raise MiningError(f"class {c!r} has fewer than two examples")
    return groups


def mine_round_robin(
    embeddings,
    labels,
    batch_size: int,
    alpha: float,
    rng: np.random.Generator,
    pairs: Sequence[tuple[str, str]] | None = None,
    offset: int = 0,
) -> TripletBatch:
    """Mine one batch of triplets, dealing slots round-robin over class pairs.

    Slot ``i`` of the batch goes to ``pairs[(offset + i) % len(pairs)]``, so
    per-pair counts never differ by more than one. Negatives are drawn
    uniformly from the semi-hard candidates; failing that, the closest
    negative that is still farther than the positive; failing that, any
    member of the negative class.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=object)
    groups = _check_classes(labels)
    if pairs is None:
        pairs = class_pairs(labels, rng)
    n_pairs = len(pairs)
    slot_pair = (offset + np.arange(batch_size)) % n_pairs

    a_out = np.empty(batch_size, dtype=np.int64)
    p_out = np.empty(batch_size, dtype=np.int64)
    n_out = np.empty(batch_size, dtype=np.int64)
    for k, (ca, cn) in enumerate(pairs):
        slots = np.flatnonzero(slot_pair == k)
        m = len(slots)
        if m == 0:
            continue
        pool_a, pool_n = groups[ca], groups[cn]
        i = rng.integers(len(pool_a), size=m)
        j = rng.integers(len(pool_a) - 1, size=m)
        j = j + (j >= i)  # distinct positive
        a, p = pool_a[i], pool_a[j]
        d_ap = np.linalg.norm(emb[a] - emb[p], axis=1)
        d_an = cdist(emb[a], emb[pool_n])
        semi = (d_an > d_ap[:, None]) & (d_an < d_ap[:, None] + alpha)
        farther = d_an > d_ap[:, None]
        u = rng.random(m)
        neg = np.empty(m, dtype=np.int64)
        for r in range(m):
            cand = np.flatnonzero(semi[r])
            if len(cand):
                neg[r] = cand[int(u[r] * len(cand))]
                continue
            far = np.flatnonzero(farther[r])
            if len(far):
                neg[r] = far[np.argmin(d_an[r, far])]
            else:
                neg[r] = int(u[r] * len(pool_n))
        a_out[slots], p_out[slots], n_out[slots] = a, p, pool_n[neg]
    return TripletBatch(
        a_out, p_out, n_out, labels[a_out], labels[n_out],
    )


@dataclass
class StepResult:
    loss: float
    recon: float
    triplet: float
    grads: list[np.ndarray]


def combined_loss_step(
    ae: Autoencoder,
    batch: TripletBatch,
    data: np.ndarray,
    alpha: float,
    beta: float,
    gamma: float,
) -> StepResult:
    """``beta * M + gamma * L`` and its gradient w.r.t. ``ae.params()``.

    ``M`` reconstructs the anchors only; the positives and negatives only go
    through the encoder.
    """
    m = len(batch)
    x = data[np.concatenate([batch.anchors, batch.positives, batch.negatives])]
    enc = forward(ae.encoder, x)
    z = enc.output
    za, zp, zn = z[:m], z[m:2 * m], z[2 * m:]
    dec = forward(ae.decoder, za)
    recon, g_rec = mse_loss(dec.output, x[:m])
    trip, ga, gp, gn = triplet_loss(za, zp, zn, alpha)

    dec_grads, gz_rec = backward(ae.decoder, dec, beta * g_rec)
    gz = np.concatenate([gamma * ga, gamma * gp, gamma * gn])
    gz[:m] += gz_rec
    enc_grads, _ = backward(ae.encoder, enc, gz)
    return StepResult(beta * recon + gamma * trip, recon, trip, enc_grads + dec_grads)


def auto_balance_weights(m0: float, l0: float) -> tuple[float, float]:
    if not m0 > 0:
        raise ValueError("pilot reconstruction loss must be positive")
    gamma = m0 / max(l0, 1e-12)
    return 1.0, float(min(max(gamma, 1e-3), 1e3))


def latent_collapse_metric(latents, epsilon: float = 0.01) -> int:
    """Count latent coordinates carrying more than ``epsilon`` of the mean variance."""
    z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if z.size == 0:
        raise ValueError("empty latents")
    var = z.var(axis=0)
    return int(np.sum(var > epsilon * var.sum() / z.shape[1]))


@dataclass
class NoveltyTrainingResult:
    model: Autoencoder
    embeddings: np.ndarray
    labels: np.ndarray
    beta: float
    gamma: float
    log: list[dict] = field(default_factory=list)

    @property
    def collapsed(self) -> bool:
        return bool(self.log) and self.log[-1]["active_dims"] < self.model.latent_dim


def train_novelty_detector(
    data,
    labels,
    config: TrainingConfig | None = None,
    log_stream: IO[str] | None = None,
) -> NoveltyTrainingResult:
    """Train the novelty autoencoder on labelled, already-normalized attack rows.

    Each epoch recomputes embeddings once, mines ``ceil(n / batch_size)``
    round-robin batches against them and takes one Adam step per batch.
    Per-epoch records (epoch, M, L, combined, active_dims) go to the
    returned log and, one JSON object per line, to ``log_stream``. The logged
    losses are measured after the epoch on fixed data: M over every training
    row and L over the probe batch mined before the first epoch, so the curve
    is free of mining noise.
    """
    cfg = config or TrainingConfig()
    x = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels, dtype=object)
    _check_classes(labels)
    rng = np.random.default_rng(cfg.seed)
    ae = init_autoencoder(x.shape[1], cfg.widths, cfg.latent_dim, rng)
    opt = AdamState(lr=cfg.lr)
    params = ae.params()
    n_batches = max(1, math.ceil(len(x) / cfg.batch_size))

    beta, gamma = cfg.beta, cfg.gamma
    pilot = mine_round_robin(ae.encode(x), labels, cfg.batch_size, cfg.alpha, rng)
    if beta is None or gamma is None:
        probe = combined_loss_step(ae, pilot, x, cfg.alpha, 1.0, 1.0)
        auto_b, auto_g = auto_balance_weights(probe.recon, probe.triplet)
        beta = auto_b if beta is None else beta
        gamma = auto_g if gamma is None else gamma
    logger.info("novelty training: beta=%.4g gamma=%.4g", beta, gamma)

    log = []
    for epoch in range(cfg.epochs):
        emb = ae.encode(x)
        pairs = class_pairs(labels, rng)
        for b in range(n_batches):
            batch = mine_round_robin(
                emb, labels, cfg.batch_size, cfg.alpha, rng, pairs, offset=b * cfg.batch_size
            )
            step = combined_loss_step(ae, batch, x, cfg.alpha, beta, gamma)
            if not math.isfinite(step.loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {b}: M={step.recon} L={step.triplet}"
                )
            adam_step(params, step.grads, opt)
        emb = ae.encode(x)
        recon = float(ae.reconstruction_loss(x).mean())
        trip = triplet_loss(emb[pilot.anchors], emb[pilot.positives], emb[pilot.negatives], cfg.alpha)[0]
        comb = beta * recon + gamma * trip
        active = latent_collapse_metric(emb, cfg.collapse_epsilon)
        rec = {"epoch": epoch, "M": recon, "L": trip, "combined": comb, "active_dims": active}
        log.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec) + "\n")
        if active < cfg.latent_dim:
            logger.warning(
                "latent collapse: %d of %d dimensions active at epoch %d",
                active, cfg.latent_dim, epoch,
            )
    return NoveltyTrainingResult(ae, ae.encode(x), labels, beta, gamma, log)
