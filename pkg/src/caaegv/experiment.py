"""End-to-end ablation run on synthetic faces: four models, one evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import load_images, synthetic_records, write_manifest
from .evaluation import DEFAULT_THRESHOLDS, evaluate_models, train_embedding_net, train_gender_classifier
from .losses import ABLATIONS
from .model import FaceAgingCAAE

log = logging.getLogger(__name__)

# Desk-scale widths: half the default encoder/generator/D_img channels keeps
# four models x three seeds inside the CPU budget.
FAST_ARCH = {
    "enc_channels": [8, 16, 32, 64],
    "gen_channels": [64, 32, 16, 8],
    "dimg_channels": [8, 16, 32, 64],
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_faces: int = 2000
    identities: int = 200
    image_size: int = 64
    n_eval_per_sex: int = 100
    epochs: int = 15
    batch_size: int = 32
    # 2e-4 leaves the generators near mode collapse after ~950 steps
    learning_rate: float = 1e-3
    weights: dict = field(default_factory=lambda: {"lambda": 100.0, "gamma": 10.0, "phi": 0.01})
    arch: dict = field(default_factory=lambda: dict(FAST_ARCH))
    thresholds: tuple = DEFAULT_THRESHOLDS
    classifier_epochs: int = 8
    embedder_epochs: int = 10
    models: tuple = tuple(ABLATIONS)


def eval_records(cfg: ExperimentConfig):
    """Held-out 0-5 year-old faces: new identities, one face each, balanced by sex."""
    return synthetic_records(2 * cfg.n_eval_per_sex, seed=cfg.seed + 10_000,
                             identities=2 * cfg.n_eval_per_sex, age_range=(0, 5))


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    t0 = time.perf_counter()
    records = synthetic_records(cfg.n_faces, seed=cfg.seed, identities=cfg.identities)
    images = load_images(records, cfg.image_size)
    y = np.array([[r.group, r.sex_index] for r in records])
    held_out = eval_records(cfg)
    eval_images = load_images(held_out, cfg.image_size)
    eval_sexes = np.array([r.sex_index for r in held_out])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(out_dir / "dataset.json", (records, [], held_out), meta={"experiment": asdict(cfg)})

    models = {}
    for name in cfg.models:
        est = FaceAgingCAAE.variant(
            name, image_size=cfg.image_size, epochs=cfg.epochs, batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate, lambda_=cfg.weights["lambda"], gamma=cfg.weights["gamma"],
            phi=cfg.weights["phi"], arch=dict(cfg.arch), seed=cfg.seed)
        t = time.perf_counter()
        est.fit(images, y, out_dir=None if out_dir is None else out_dir / name)
        log.info("trained %s in %.1fs", name, time.perf_counter() - t)
        models[name] = est

    clf, clf_table = train_gender_classifier(records, images, seed=cfg.seed, epochs=cfg.classifier_epochs)
    embedder = train_embedding_net(records, images, seed=cfg.seed, epochs=cfg.embedder_epochs)
    report = evaluate_models(models, eval_images, eval_sexes, clf, embedder, cfg.thresholds,
                             baseline=cfg.models[0], classifier_table=clf_table)
    report["meta"]["experiment"] = asdict(cfg)
    report["meta"]["elapsed_seconds"] = time.perf_counter() - t0
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def directional_checks(report: dict, min_gender_gain: float = 0.05) -> dict:
    """The three directional comparisons against the baseline CAAE model."""
    m = report["models"]
    tight = f"{min(report['meta']['thresholds']):g}"
    base_male = m["CAAE"]["gender"]["male"]["average"]
    return {
        "gender_G": m["CAAE-G"]["gender"]["male"]["average"] - base_male >= min_gender_gain,
        "gender_GV": m["CAAE-GV"]["gender"]["male"]["average"] - base_male >= min_gender_gain,
        "fr_GV": m["CAAE-GV"]["fr"][tight] > m["CAAE"]["fr"][tight],
        "mean_distance_GV": m["CAAE-GV"]["distance_stats"]["mean"] <= m["CAAE"]["distance_stats"]["mean"],
    }


def summarize(report: dict) -> dict:
    tight = f"{min(report['meta']['thresholds']):g}"
    return {name: {"male_avg": r["gender"]["male"]["average"], "female_avg": r["gender"]["female"]["average"],
                   "fr_tight": r["fr"][tight], "mean_dist": r["distance_stats"]["mean"]}
            for name, r in report["models"].items()}
