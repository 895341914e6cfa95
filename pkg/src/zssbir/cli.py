"""Command-line entry point: synth-data, train, eval, retrieve, gradcheck, ablate.

Exit codes: 0 success, 1 validation error (bad config, dimension or
fingerprint mismatch, failed gradient check), 2 runtime error.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as runcfg
from . import data, gradcheck, pipeline, plotting
from .errors import CheckpointError, ConfigError, DimensionError, ZssbirError
from .retrieval import candidate_scores, evaluate_scores, prototype_oracle_map, rankings_csv_rows
from .trainer import load_checkpoint, read_checkpoint, save_checkpoint

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, DimensionError)

log = logging.getLogger("zssbir")


class FingerprintError(CheckpointError):
    """Checkpoint and requested configuration disagree about the model."""


def split_overrides(extra):
    """``--key value`` / ``--key=value`` pairs for RunConfig keys; hyphens map to underscores."""
    out, i = {}, 0
    known = runcfg.field_types()
    problems = []
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            problems.append(f"unexpected argument {tok!r}")
            i += 1
            continue
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            problems.append(f"{tok} needs a value")
            i += 1
            continue
        key = key.replace("-", "_")
        if key not in known:
            problems.append(f"unknown option --{key}")
            continue
        out[key] = value
    if problems:
        raise ConfigError("; ".join(problems))
    return out


def build_config(args, extra, base=None):
    overrides = dict(base or {})
    overrides.update(split_overrides(extra))
    if getattr(args, "k", None):
        overrides["ks"] = ",".join(str(k) for k in args.k)
    return runcfg.load(getattr(args, "config", None), overrides)


def out_dir(cfg):
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------


def cmd_synth_data(args, extra):
    cfg = build_config(args, extra)
    spec = runcfg.synth_spec(cfg)
    records, protos, _ = data.synth_generate(spec, return_prototypes=True)
    out = out_dir(cfg)
    files = {}
    for modality in ("image", "sketch"):
        sel = [r for r in records if r.modality == modality]
        if args.csv:
            name = f"{modality}_features.csv"
            data.write_csv(out / name, sel)
        else:
            name = f"{modality}_features.zsfb"
            data.write_features(out / name, sel, modality)
        files[name] = modality
    data.write_manifest(out / "manifest.txt", files, {c: f"class{c}" for c in range(spec.n_classes)})
    images, labels = data.stack(records, "image")
    oracle = prototype_oracle_map(protos, np.arange(spec.n_classes), images, labels)
    summary = {
        "spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
        "files": files,
        "n_records": len(records),
        "nearest_prototype_map": oracle,
        "fingerprint": runcfg.fingerprint(cfg),
    }
    write_json(out / "synth.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def config_with_checkpoint(args, extra, path):
    """The run config a checkpoint was trained with, updated by file and command-line values.

    Raises FingerprintError when the result describes a different model.
    """
    _, _, meta, _ = read_checkpoint(path)
    stored = runcfg.parse_text(meta["extra"]["run_config"], str(path))
    explicit = meta["extra"].get("explicit", sorted(stored))
    values = {k: stored[k] for k in explicit}
    given = build_config(args, extra)
    values.update({k: getattr(given, k) for k in given.explicit})
    cfg = runcfg.load(None, values)
    trainer = load_checkpoint(path)
    if trainer.bundle.cfg.fingerprint() != runcfg.model_config(cfg).fingerprint():
        raise FingerprintError(
            f"{path}: checkpoint model fingerprint {trainer.bundle.cfg.fingerprint()[:12]} "
            f"differs from the requested model {runcfg.model_config(cfg).fingerprint()[:12]}"
        )
    return cfg, trainer


def cmd_train(args, extra):
    trainer = unseen = scaling = None
    if args.resume:
        cfg, trainer = config_with_checkpoint(args, extra, args.resume)
        trainer.config = runcfg.train_config(cfg)
        trainer.extra.update(runcfg.checkpoint_record(cfg))
        unseen = trainer.extra["unseen_classes"]
        scaling = trainer.scaling
    else:
        cfg = build_config(args, extra)
    out = out_dir(cfg)
    prepared = pipeline.prepare(cfg, unseen=unseen, scaling=scaling)
    log_path = out / "metrics.jsonl"
    with open(log_path, "w") as fh:
        header = {"fingerprint": runcfg.fingerprint(cfg),
                  "model_fingerprint": runcfg.model_config(cfg).fingerprint()}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        # the log restarts with the history carried in the checkpoint
        for entry in (trainer.log if trainer is not None else []):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

        def on_epoch(tr, entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()

        trainer = pipeline.train(cfg, prepared, trainer, on_epoch=on_epoch)
    ckpt = out / "checkpoint.zsck"
    save_checkpoint(trainer, ckpt, runcfg.fingerprint(cfg))
    (out / "config.txt").write_text(runcfg.dump(cfg))
    if cfg.plots and trainer.log:
        plotting.training_curves(trainer.log, out / "training_curves.png")
    summary = {
        "checkpoint": str(ckpt),
        "epochs": trainer.epoch,
        "fingerprint": runcfg.fingerprint(cfg),
        "model_fingerprint": trainer.bundle.cfg.fingerprint(),
        "final": trainer.log[-1] if trainer.log else None,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _load_for_eval(args, extra):
    cfg, trainer = config_with_checkpoint(args, extra, args.checkpoint)
    prepared = pipeline.prepare(cfg, unseen=trainer.extra["unseen_classes"], scaling=trainer.scaling)
    pipeline.check_dims(trainer.bundle.cfg, prepared)
    return cfg, trainer, prepared


def cmd_eval(args, extra):
    cfg, trainer, prepared = _load_for_eval(args, extra)
    report = pipeline.evaluate_bundle(trainer.bundle, cfg, prepared, runcfg.fingerprint(cfg))
    out = out_dir(cfg)
    doc = report.to_dict()
    doc["epoch"] = trainer.epoch
    doc["variant"] = trainer.bundle.cfg.variant
    write_json(out / "metrics.json", doc)
    if cfg.plots:
        plotting.precision_curve(report, out / "precision.png")
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_retrieve(args, extra):
    cfg, trainer, prepared = _load_for_eval(args, extra)
    sk, sl, db, dl = pipeline.retrieval_sets(prepared.split, cfg.include_seen_in_db)
    scores = candidate_scores(trainer.bundle, sk, db, runcfg.retrieval_config(cfg))
    out = out_dir(cfg)
    path = out / "rankings.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "rank", "db_index", "score", "relevant"])
        for q, r, i, s, rel in rankings_csv_rows(scores, sl, dl):
            if args.top and r > args.top:
                continue
            w.writerow([q, r, i, repr(s), rel])
    report = evaluate_scores(scores, sl, dl, cfg.ks, cfg.c, runcfg.fingerprint(cfg))
    write_json(out / "metrics.json", report.to_dict())
    print(json.dumps({"rankings": str(path), "n_queries": len(sl), "db_size": len(dl),
                      "map_at_all": report.map_at_all}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args, extra):
    if extra:
        raise ConfigError(f"gradcheck takes no options besides --seed/--inject-fault: {extra}")
    results = gradcheck.run(seed=args.seed, fault=args.inject_fault)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s "
          f"(tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_ablate(args, extra):
    cfg = build_config(args, extra)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("--seeds needs at least one seed")
    presets = sorted(pipeline.ABLATIONS) if args.preset == "all" else [args.preset]
    if any(p not in pipeline.ABLATIONS for p in presets):
        raise ConfigError(f"unknown ablation preset {args.preset!r}")
    variants = []
    for p in presets:
        variants += [v for v in pipeline.ABLATIONS[p] if v not in variants]
    runs = pipeline.run_variants(cfg, variants, seeds)
    out = out_dir(cfg)
    results = {}
    for p in presets:
        res = pipeline.ablate(cfg, p, seeds, runs=runs)
        res["fingerprint"] = runcfg.fingerprint(cfg)
        write_json(out / f"ablation-{p}.json", res)
        if cfg.plots:
            plotting.ablation_bars(res, out / f"ablation-{p}.png")
        results[p] = res
    print(json.dumps(results, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def make_parser():
    parser = argparse.ArgumentParser(
        prog="zssbir",
        description="Zero-shot sketch-based image retrieval with a flow-refined conditional VAE.",
        epilog="Any RunConfig key can be given as --key value; it overrides the config file.",
        allow_abbrev=False,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic feature dataset", allow_abbrev=False)
    p.add_argument("--config")
    p.add_argument("--csv", action="store_true", help="write CSV instead of binary files")

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics log", allow_abbrev=False)
    p.add_argument("--config")
    p.add_argument("--resume", help="checkpoint to continue from")

    for name, help_ in (("eval", "evaluate a checkpoint on the unseen classes"),
                        ("retrieve", "dump per-query rankings as CSV")):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config")
        p.add_argument("--k", type=int, action="append", help="K for Precision@K / mAP@K (repeatable)")
        if name == "retrieve":
            p.add_argument("--top", type=int, default=0, help="keep only the first N ranks per query")

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient", allow_abbrev=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", metavar="RULE", help="corrupt one elementwise derivative rule")

    p = sub.add_parser("ablate", help="train variant pairs on identical seeds and compare", allow_abbrev=False)
    p.add_argument("preset", choices=sorted(pipeline.ABLATIONS) + ["all"])
    p.add_argument("--config")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--k", type=int, action="append")
    return parser


def main(argv=None):
    parser = make_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, extra)
    except (VALIDATION_ERRORS + (FingerprintError,)) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ZssbirError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
