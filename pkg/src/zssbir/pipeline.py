"""End-to-end glue: data -> split -> scaling -> pairs -> training -> retrieval metrics."""

import logging
import statistics
from dataclasses import dataclass, replace

import numpy as np

from . import config as runcfg
from . import data
from .errors import ConfigError, DimensionError
from .model import ModelBundle
from .retrieval import evaluate
from .trainer import Trainer

log = logging.getLogger(__name__)

# independent random streams derived from the single run seed
STREAMS = {"model": 1, "pairs": 2, "train": 3}

ABLATIONS = {
    "paper-table3": ("feedback-vae", "no-iaf"),
    "paper-fig5": ("feedback-vae", "feedback-auto"),
}


def stream(seed, purpose):
    return np.random.default_rng([int(seed), STREAMS[purpose]])


@dataclass
class Prepared:
    split: data.DatasetSplit  # scaled records
    scaling: data.ScalingParams
    pairs: data.PairSet
    class_names: dict


def load_records(cfg):
    if cfg.data:
        return data.load_dataset(cfg.data)
    records = data.synth_generate(runcfg.synth_spec(cfg))
    return records, {c: f"class{c}" for c in range(cfg.synth_classes)}


def make_split(cfg, records, unseen=None):
    if unseen is not None:
        return data.make_zero_shot_split(records, unseen_classes=unseen)
    if cfg.unseen_classes:
        return data.make_zero_shot_split(records, unseen_classes=cfg.unseen_classes)
    if cfg.split != "random":
        return data.preset_split(cfg.split, records, seed=cfg.seed)
    if cfg.unseen_fraction > 0:
        return data.make_zero_shot_split(records, unseen_fraction=cfg.unseen_fraction, seed=cfg.seed)
    return data.make_zero_shot_split(records, n_unseen=cfg.n_unseen, seed=cfg.seed)


def prepare(cfg, records=None, class_names=None, unseen=None, scaling=None):
    """Split, scale (fit on seen-class training data unless ``scaling`` is given) and pair."""
    if records is None:
        records, class_names = load_records(cfg)
    raw_split = make_split(cfg, records, unseen)
    if scaling is None:
        scaling = data.fit_scaling(raw_split)
    scaled = [
        data.FeatureRecord(r.label, r.modality, scaling.transform(r.vector[None, :], r.modality)[0])
        for r in records
    ]
    split = data.make_zero_shot_split(scaled, unseen_classes=sorted(raw_split.unseen_classes))
    pairs = data.build_pairs(split, cfg.pairs_per_class, seed=stream(cfg.seed, "pairs"))
    return Prepared(split, scaling, pairs, class_names or {})


def check_dims(mcfg, prepared):
    width = {m: len(next(r.vector for r in prepared.split.train if r.modality == m))
             for m in ("image", "sketch")}
    if width["image"] != mcfg.feature_dim or width["sketch"] != mcfg.attr_dim:
        raise DimensionError(
            f"data widths image={width['image']} sketch={width['sketch']} do not match model "
            f"feature_dim={mcfg.feature_dim} attr_dim={mcfg.attr_dim}"
        )


def retrieval_sets(split, include_seen_in_db=False):
    """Unseen-class sketches as queries; unseen (optionally all) images as the database."""
    sketches, s_labels = data.stack(split.test, "sketch")
    db_records = split.test + (split.train if include_seen_in_db else [])
    images, i_labels = data.stack(db_records, "image")
    return sketches, s_labels, images, i_labels


def evaluate_bundle(bundle, cfg, prepared, fingerprint=""):
    sk, sl, db, dl = retrieval_sets(prepared.split, cfg.include_seen_in_db)
    return evaluate(bundle, sk, sl, db, dl, runcfg.retrieval_config(cfg), fingerprint)


def new_trainer(cfg, prepared):
    mcfg = runcfg.model_config(cfg)
    check_dims(mcfg, prepared)
    bundle = ModelBundle(mcfg, stream(cfg.seed, "model"))
    trainer = Trainer(bundle, runcfg.train_config(cfg), rng=stream(cfg.seed, "train"))
    trainer.scaling = prepared.scaling
    trainer.extra = {
        "unseen_classes": sorted(int(c) for c in prepared.split.unseen_classes),
        **runcfg.checkpoint_record(cfg),
    }
    return trainer


def train(cfg, prepared=None, trainer=None, on_epoch=None):
    """Train (or continue training) to ``cfg.epochs``; returns the trainer."""
    prepared = prepare(cfg) if prepared is None else prepared
    trainer = new_trainer(cfg, prepared) if trainer is None else trainer
    evaluator = None
    if cfg.eval_every:
        def evaluator(bundle):
            rep = evaluate_bundle(bundle, cfg, prepared)
            return {"map_at_all": rep.map_at_all,
                    "precision_at_k": {str(k): v for k, v in rep.precision_at_k.items()}}
    trainer.fit(prepared.pairs, epochs=cfg.epochs, evaluator=evaluator, on_epoch=on_epoch)
    return trainer


def run_once(cfg):
    """Train from scratch and evaluate on the unseen classes."""
    prepared = prepare(cfg)
    trainer = train(cfg, prepared)
    report = evaluate_bundle(trainer.bundle, cfg, prepared, runcfg.fingerprint(cfg))
    return trainer, report


def summary(report):
    return {
        "map_at_all": report.map_at_all,
        "precision_at_k": {str(k): v for k, v in report.precision_at_k.items()},
        "map_at_k": {str(k): v for k, v in report.map_at_k.items()},
    }


def run_variants(cfg, variants, seeds, on_run=None):
    """{variant: [summary per seed]} with every variant trained on identical seeds."""
    out = {}
    for variant in variants:
        out[variant] = []
        for seed in seeds:
            c = replace(cfg, variant=variant, seed=int(seed))
            c.explicit = getattr(cfg, "explicit", set())
            runcfg.validate(c)
            trainer, report = run_once(c)
            row = {"seed": int(seed), "fingerprint": runcfg.fingerprint(c), **summary(report),
                   "final_total_generator": trainer.log[-1]["total_generator"] if trainer.log else None}
            out[variant].append(row)
            log.info("%s seed %d mAP@all %.4f", variant, seed, report.map_at_all)
            if on_run is not None:
                on_run(variant, row)
    return out


def compare(runs, reference, other, ks):
    """Median metrics per variant and relative deltas of ``reference`` over ``other``."""
    def med(variant, getter):
        return statistics.median(getter(r) for r in runs[variant])

    metrics = {"map_at_all": lambda r: r["map_at_all"]}
    for k in ks:
        metrics[f"precision_at_{k}"] = lambda r, k=k: r["precision_at_k"][str(k)]
    medians = {v: {m: med(v, g) for m, g in metrics.items()} for v in (reference, other)}
    deltas = {}
    for m in metrics:
        base = medians[other][m]
        deltas[m] = (medians[reference][m] - base) / base if base else None
    return {
        "reference": reference,
        "baseline": other,
        "median": medians,
        "relative_delta": deltas,
        "direction_holds": medians[reference]["map_at_all"] >= medians[other]["map_at_all"],
    }


def ablate(cfg, preset, seeds, runs=None):
    if preset not in ABLATIONS:
        raise ConfigError(f"unknown ablation preset {preset!r}; choose from {sorted(ABLATIONS)}")
    reference, other = ABLATIONS[preset]
    if runs is None:
        runs = run_variants(cfg, (reference, other), seeds)
    result = compare(runs, reference, other, cfg.ks)
    result.update({"preset": preset, "seeds": [int(s) for s in seeds],
                   "runs": {v: runs[v] for v in (reference, other)}})
    return result
