"""Train both detectors on synthetic traffic and score a mixed test window.

Botnet flows are kept out of novelty training, so they should come back as
zero-day threats while the other attack classes come back as known attacks.

    python3 demos/end_to_end_detection.py [--nd-epochs 150] [--latent-out latent.csv]
"""

import argparse
from collections import Counter

import numpy as np

from zdt.eval_harness import SyntheticConfig, build_dataset, generate_synthetic_dataset
from zdt.neural_core import AutoencoderConfig
from zdt.novelty_training import TrainingConfig
from zdt.pipeline import (
    AnomalyConfig,
    NoveltyConfig,
    export_latent,
    fit_novelty_detector,
    score_features,
    train_anomaly_detector,
)

HELD_OUT = "botnet"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ad-epochs", type=int, default=50)
    ap.add_argument("--nd-epochs", type=int, default=150)
    ap.add_argument("--latent-out", default=None)
    args = ap.parse_args()

    print("generating traffic and host graph features ...")
    ds = build_dataset(generate_synthetic_dataset(SyntheticConfig(seed=args.seed)))
    rng = np.random.default_rng(args.seed)
    test = np.zeros(len(ds), bool)
    test[rng.permutation(len(ds))[: len(ds) // 5]] = True

    benign_train = ~test & (ds.labels == "benign")
    ad = train_anomaly_detector(
        ds.features[benign_train],
        AnomalyConfig(network=AutoencoderConfig(epochs=args.ad_epochs, seed=args.seed)),
    )
    print(f"anomaly detector threshold: {ad.threshold:.3g}")

    known = ~test & (ds.labels != "benign") & (ds.labels != HELD_OUT)
    nd, result = fit_novelty_detector(
        ds.features[known],
        ds.labels[known],
        NoveltyConfig(training=TrainingConfig(epochs=args.nd_epochs, seed=args.seed)),
    )
    print(f"novelty detector threshold: {nd.threshold:.3g}, active latent dims: {result.log[-1]['active_dims']}")

    verdicts = score_features(ds.features[test], ad, nd)
    table = Counter((lab, v.category) for lab, v in zip(ds.labels[test], verdicts))
    print(f"\n{'true class':<10} {'benign':>8} {'known':>8} {'zdt':>8}")
    for lab in ("benign", "scanning", "exfil", "c2", HELD_OUT):
        row = [table[(lab, c)] for c in ("benign", "known_attack", "zdt")]
        print(f"{lab:<10} {row[0]:>8} {row[1]:>8} {row[2]:>8}")

    held = [v.cata_class for lab, v in zip(ds.labels[test], verdicts) if lab == HELD_OUT and v.cata_class]
    if held:
        print(f"\n{HELD_OUT} flows most resemble:", dict(Counter(held).most_common()))

    if args.latent_out:
        export_latent(nd, ds.features[known], ds.labels[known], args.latent_out)
        print(f"latent codes written to {args.latent_out}")


if __name__ == "__main__":
    main()
