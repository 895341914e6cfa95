"""Flat run configuration read from ``key = value`` files plus command-line overrides."""

import hashlib
import math
from dataclasses import dataclass, fields

from .data import SPLIT_PRESETS, SyntheticSpec
from .errors import ConfigError, DomainError
from .losses import LossWeights
from .model import PRESETS, VARIANTS, ModelConfig, build_config
from .nn import LrSchedule
from .retrieval import RetrievalConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    # model
    preset: str = "desk"
    variant: str = "feedback-vae"
    feature_dim: int = 32
    attr_dim: int = 32
    latent_dim: int = 8
    T: int = 3
    prior_scale: float = 0.005
    prior_scale_is_variance: bool = False
    encoder_widths: tuple = (128, 128)
    decoder_width: int = 192
    decoder_blocks: int = 2
    regressor_widths: tuple = (128, 128)
    context_dim: int = -1
    made_hidden: tuple = (32, 32)
    gate_bias: float = 2.0
    kl_estimator: str = "auto"
    kl_samples: int = 1
    # training
    epochs: int = 35
    batch_size: int = 32
    pairs_per_class: int = 1000
    beta: float = 1.0
    lambda_R: float = 0.1
    lambda_c: float = 0.1
    lambda_reg: float = 0.1
    lambda_E: float = 0.1
    lr_thresholds: tuple = (0, 5, 15, 25)
    lr_rates: tuple = (1e-3, 5e-4, 1e-4, 1e-5)
    seed: int = 0
    eval_every: int = 0
    log_wall_time: bool = True
    # retrieval
    c: int = 10
    ks: tuple = (10, 100)
    include_seen_in_db: bool = False
    workers: int = 1
    # data: an empty ``data`` path means "synthesize with the synth_* keys"
    data: str = ""
    split: str = "random"
    n_unseen: int = 5
    unseen_fraction: float = 0.0
    unseen_classes: tuple = ()
    synth_classes: int = 15
    synth_dim: int = 32
    synth_images_per_class: int = 200
    synth_sketches_per_class: int = 200
    synth_image_noise: float = 0.3
    synth_sketch_noise: float = 0.3
    synth_map_scale: float = 1.0
    # outputs
    out: str = "run"
    plots: bool = True


# keys that name files or tune parallelism; they never change results
NON_SEMANTIC = {"data", "out", "workers", "plots", "log_wall_time"}
FLOAT_TUPLES = {"lr_rates"}
MODEL_KEYS = [f.name for f in fields(ModelConfig)]


def field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def parse_value(key, text):
    kind = field_types()[key]
    text = text.strip()
    try:
        if kind is bool or kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        if kind is tuple or kind == "tuple":
            items = [t for t in text.replace(" ", ",").split(",") if t]
            conv = float if key in FLOAT_TUPLES else int
            return tuple(conv(t) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def parse_text(text, source="<config>"):
    """``key = value`` lines with ``#`` comments; unknown and duplicate keys are errors."""
    known = field_types()
    values, problems = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in values:
            problems.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            problems.append(f"{source}:{lineno}: {exc}")
    if problems:
        raise ConfigError("\n".join(problems))
    return values


def load(path=None, overrides=None):
    """File values, then ``overrides`` (already parsed or raw strings) on top."""
    values = {}
    if path:
        try:
            text = open(path).read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_text(text, str(path)))
    problems = []
    known = field_types()
    for key, value in (overrides or {}).items():
        if key not in known:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            values[key] = parse_value(key, value) if isinstance(value, str) else value
        except ConfigError as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigError("\n".join(problems))
    cfg = RunConfig(**values)
    cfg.explicit = set(values)
    validate(cfg)
    return cfg


def validate(cfg):
    """Raise one ConfigError listing every problem found."""
    p = []
    if cfg.preset not in PRESETS:
        p.append(f"preset must be one of {sorted(PRESETS)}, got {cfg.preset!r}")
    mcfg = None
    if cfg.variant not in VARIANTS:
        p.append(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    elif cfg.preset in PRESETS:
        try:
            mcfg = model_config(cfg)
        except ConfigError as exc:
            p.append(str(exc))
    if cfg.epochs < 0:
        p.append("epochs must be >= 0")
    if cfg.batch_size < 1:
        p.append("batch_size must be >= 1")
    if cfg.pairs_per_class < 1:
        p.append("pairs_per_class must be >= 1")
    for name in ("beta", "lambda_R", "lambda_c", "lambda_reg", "lambda_E"):
        v = getattr(cfg, name)
        if not (math.isfinite(v) and v >= 0):
            p.append(f"{name} must be finite and >= 0, got {v}")
    try:
        LrSchedule(list(cfg.lr_thresholds), list(cfg.lr_rates))
    except ConfigError as exc:
        p.append(str(exc))
    if cfg.lr_thresholds and cfg.lr_thresholds[0] != 0:
        p.append("lr_thresholds must start at epoch 0")
    if cfg.c < 1:
        p.append("c must be >= 1")
    if not cfg.ks or any(k <= 0 for k in cfg.ks):
        p.append("ks must be a non-empty list of positive integers")
    if cfg.workers < 1:
        p.append("workers must be >= 1")
    if cfg.split != "random" and cfg.split not in SPLIT_PRESETS:
        p.append(f"split must be 'random' or one of {sorted(SPLIT_PRESETS)}, got {cfg.split!r}")
    if not 0.0 <= cfg.unseen_fraction < 1.0:
        p.append("unseen_fraction must be in [0, 1)")
    if cfg.split == "random" and not cfg.unseen_classes and cfg.unseen_fraction == 0 and cfg.n_unseen < 1:
        p.append("random split needs n_unseen >= 1, unseen_fraction > 0 or unseen_classes")
    if cfg.eval_every < 0:
        p.append("eval_every must be >= 0")
    if not cfg.data:
        try:
            synth_spec(cfg)
        except ConfigError as exc:
            p.append(str(exc))
        if mcfg is not None and not cfg.synth_dim == mcfg.feature_dim == mcfg.attr_dim:
            p.append(
                f"synthetic data width {cfg.synth_dim} must equal feature_dim "
                f"{mcfg.feature_dim} and attr_dim {mcfg.attr_dim}"
            )
    if p:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(p))


def model_config(cfg):
    overrides = {k: getattr(cfg, k) for k in MODEL_KEYS}
    if cfg.preset != "desk":
        # preset values fill in whatever the user did not set explicitly
        explicit = getattr(cfg, "explicit", set())
        overrides = {k: v for k, v in overrides.items() if k in explicit or k == "variant"}
    return build_config(cfg.preset, **overrides)


def train_config(cfg):
    try:
        weights = LossWeights(cfg.beta, cfg.lambda_R, cfg.lambda_c, cfg.lambda_reg, cfg.lambda_E)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        pairs_per_class=cfg.pairs_per_class,
        weights=weights,
        schedule=LrSchedule(list(cfg.lr_thresholds), list(cfg.lr_rates)),
        seed=cfg.seed,
        eval_every=cfg.eval_every,
        log_wall_time=cfg.log_wall_time,
    )


def retrieval_config(cfg):
    return RetrievalConfig(c=cfg.c, ks=cfg.ks, seed=cfg.seed, workers=cfg.workers)


def synth_spec(cfg):
    return SyntheticSpec(
        n_classes=cfg.synth_classes,
        dim=cfg.synth_dim,
        images_per_class=cfg.synth_images_per_class,
        sketches_per_class=cfg.synth_sketches_per_class,
        image_noise_std=cfg.synth_image_noise,
        sketch_noise_std=cfg.synth_sketch_noise,
        cross_modal_map_scale=cfg.synth_map_scale,
        seed=cfg.seed,
    )


def format_value(v):
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def canonical_text(cfg, include_all=False):
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        if not include_all and f.name in NON_SEMANTIC:
            continue
        lines.append(f"{f.name} = {format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def fingerprint(cfg):
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()


def dump(cfg):
    """File text that :func:`load` reads back to an equal config."""
    return canonical_text(cfg, include_all=True)


def checkpoint_record(cfg):
    """What a checkpoint remembers about its run: every key except the output location."""
    text = "".join(line + "\n" for line in dump(cfg).splitlines() if not line.startswith("out ="))
    return {
        "run_fingerprint": fingerprint(cfg),
        "run_config": text,
        "explicit": sorted(set(getattr(cfg, "explicit", ())) - {"out"}),
    }
