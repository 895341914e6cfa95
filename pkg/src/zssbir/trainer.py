"""Alternating regressor / encoder-generator optimization and checkpoints."""

import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import ScalingParams
from .errors import CheckpointError, ConfigError, NumericError
from .losses import (
    LossReport,
    LossWeights,
    cyclic_loss,
    generator_total,
    latent_consistency_loss,
    prior_reconstruction_loss,
    reconstruction_loss,
    regressor_loss,
    vae_kl,
)
from .model import ModelBundle, config_from_dict, frozen
from .nn import Adam, LrSchedule

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 35
    batch_size: int = 32
    pairs_per_class: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    eval_every: int = 0
    log_wall_time: bool = True
    check_partition: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


class Trainer:
    """Owns a bundle, one Adam state per parameter set, and the training RNG."""

    def __init__(self, bundle, config, rng=None):
        self.bundle = bundle
        self.config = config
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        self.opt_E = Adam(bundle.encoder_params())
        self.opt_G = Adam(bundle.generator_params())
        self.opt_R = Adam(bundle.regressor_params())
        self.epoch = 0
        self.log = []
        self.scaling = None
        self.extra = {}

    @property
    def optimizers(self):
        return {"E": self.opt_E, "G": self.opt_G, "R": self.opt_R}

    def set_lr(self, lr):
        for opt in self.optimizers.values():
            opt.lr = lr

    # ------------------------------------------------------------------
    def train_step(self, a, x):
        """One regressor update followed by one encoder/generator update."""
        b, w, rng = self.bundle, self.config.weights, self.rng
        a, x = ad.Tensor(a), ad.Tensor(x)
        partition_ok = True

        # phase 1: regressor on real pairs and posterior-generated features
        b.zero_grad()
        with ad.no_grad():
            params = b.encode(x)
            sample = b.posterior_sample(params, rng=rng)
            x_gen = b.decode(sample.zT, a).detach()
        with frozen(*b.encoder_modules, b.generator):
            l_sup, l_unsup, total_r = regressor_loss(b.regress(x), a, b.regress(x_gen), a, w)
            _check_finite({"l_sup": l_sup, "l_unsup": l_unsup})
            ad.backward(total_r)
        if self.config.check_partition:
            partition_ok &= _all_zero(b.encoder_params()) and _all_zero(b.generator_params())
        self.opt_R.step()

        # phase 2: encoder + generator with the regressor frozen
        b.zero_grad()
        n = x.shape[0]
        params = b.encode(x)
        sample = b.posterior_sample(params, rng=rng)
        x_hat = b.decode(sample.zT, a)
        z_prior = b.prior.sample(rng, n)
        with frozen(b.regressor):
            x_prior = b.decode(z_prior, a)
            terms = {
                "recon": reconstruction_loss(x_hat, x),
                "kl": vae_kl(b, params, sample, rng),
                "l_c": cyclic_loss(b, z_prior, a, x_prior),
                "l_reg": prior_reconstruction_loss(b, x, a, z_prior, x_prior),
                "l_e": latent_consistency_loss(b, x_prior),
            }
            _check_finite(terms)
            total_g = generator_total(terms, w)
            ad.backward(total_g)
        if self.config.check_partition:
            partition_ok &= _all_zero(b.regressor_params())
        self.opt_E.step()
        self.opt_G.step()

        vals = {k: float(v.data) for k, v in terms.items()}
        report = LossReport(
            l_sup=float(l_sup.data),
            l_unsup=float(l_unsup.data),
            total_regressor=float(total_r.data),
            total_vae=vals["recon"] + w.beta * vals["kl"],
            total_generator=float(total_g.data),
            **vals,
        )
        return report, partition_ok

    # ------------------------------------------------------------------
    def fit(self, pairs, epochs=None, evaluator=None, on_epoch=None):
        """Train until ``epochs`` total epochs have run (resumes from ``self.epoch``)."""
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        n = len(pairs)
        while self.epoch < epochs:
            t0 = time.perf_counter()
            lr = cfg.schedule.lr_at(self.epoch)
            self.set_lr(lr)
            perm = self.rng.permutation(n)
            sums = {k: 0.0 for k in LossReport().to_dict()}
            n_batches, part_ok = 0, True
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo : lo + cfg.batch_size]
                report, ok = self.train_step(pairs.sketches[idx], pairs.images[idx])
                part_ok &= ok
                for k, v in report.to_dict().items():
                    sums[k] += v
                n_batches += 1
            entry = {"epoch": self.epoch, "lr": lr}
            entry.update({k: v / max(n_batches, 1) for k, v in sums.items()})
            if cfg.check_partition:
                entry["partition_ok"] = bool(part_ok)
            if evaluator is not None and cfg.eval_every and (self.epoch + 1) % cfg.eval_every == 0:
                entry["eval"] = evaluator(self.bundle)
            if cfg.log_wall_time:
                entry["wall_time"] = time.perf_counter() - t0
            self.log.append(entry)
            log.info("epoch %d lr %g total_generator %.5f", self.epoch, lr, entry["total_generator"])
            if on_epoch is not None:
                on_epoch(self, entry)
            self.epoch += 1
        return self.bundle, self.log


def train_step(trainer, a, x):
    return trainer.train_step(a, x)


def fit(bundle, pairs, config, evaluator=None):
    trainer = Trainer(bundle, config)
    trainer.fit(pairs, evaluator=evaluator)
    return trainer.bundle, trainer.log


def _all_zero(params):
    return all(p.grad is None or not np.any(p.grad) for p in params.values())


def _check_finite(terms):
    for name, t in terms.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite loss term {name!r}")


# ---------------------------------------------------------------------------
# checkpoints
#
# magic "ZSCK" | u16 version | u16 len + model fingerprint | u16 len + run fingerprint
# | u32 len + JSON meta | u32 blob count | blobs | 32-byte sha256 of all preceding bytes
# blob: u16 len + name | u8 ndim | u64 * ndim shape | float64 LE data

CK_MAGIC = b"ZSCK"
CK_VERSION = 1


def _pack_str(s, fmt):
    b = s.encode()
    return struct.pack(fmt, len(b)) + b


def save_checkpoint(trainer, path, run_fingerprint=""):
    bundle = trainer.bundle
    blobs = dict(bundle.state_arrays())
    for key, opt in trainer.optimizers.items():
        for name in opt.params:
            blobs[f"opt.{key}.m.{name}"] = opt.m[name]
            blobs[f"opt.{key}.v.{name}"] = opt.v[name]
    if trainer.scaling is not None:
        for mod, (lo, hi) in trainer.scaling.ranges.items():
            blobs[f"scale.{mod}.lo"] = lo
            blobs[f"scale.{mod}.hi"] = hi
    meta = {
        "epoch": trainer.epoch,
        "model_config": bundle.cfg.to_dict(),
        "train_config": _train_config_dict(trainer.config),
        "optimizers": {k: {"t": o.t, "lr": o.lr} for k, o in trainer.optimizers.items()},
        "rng_state": trainer.rng.bit_generator.state,
        "log": trainer.log,
        "extra": trainer.extra,
    }
    out = io.BytesIO()
    out.write(CK_MAGIC + struct.pack("<H", CK_VERSION))
    out.write(_pack_str(bundle.cfg.fingerprint(), "<H"))
    out.write(_pack_str(run_fingerprint, "<H"))
    out.write(_pack_str(json.dumps(meta, sort_keys=True, default=_json_default), "<I"))
    out.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.write(_pack_str(name, "<H"))
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())
    body = out.getvalue()
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


def _train_config_dict(cfg):
    d = asdict(cfg)
    d["schedule"] = {"thresholds": list(cfg.schedule.thresholds), "rates": list(cfg.schedule.rates)}
    return d


def _train_config_from_dict(d):
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    d["schedule"] = LrSchedule(**d["schedule"])
    return TrainConfig(**d)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self, fmt):
        (n,) = self.unpack(fmt)
        return self.take(n).decode()


def read_checkpoint(path):
    """Raw checkpoint contents: (model fp, run fp, meta dict, blobs dict)."""
    raw = open(path, "rb").read()
    if len(raw) < 38 or raw[:4] != CK_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted file)")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != CK_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    model_fp = r.string("<H")
    run_fp = r.string("<H")
    meta = json.loads(r.string("<I"))
    (count,) = r.unpack("<I")
    blobs = {}
    for _ in range(count):
        name = r.string("<H")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).copy()
    return model_fp, run_fp, meta, blobs


def load_checkpoint(path, expected_fingerprint=None):
    """Rebuild the trainer (bundle, optimizers, RNG, log) saved in ``path``."""
    model_fp, run_fp, meta, blobs = read_checkpoint(path)
    if expected_fingerprint is not None and expected_fingerprint != model_fp:
        raise CheckpointError(
            f"{path}: model fingerprint {model_fp[:12]} does not match expected "
            f"{expected_fingerprint[:12]}"
        )
    cfg = config_from_dict(meta["model_config"])
    if cfg.fingerprint() != model_fp:
        raise CheckpointError(f"{path}: stored config does not hash to stored fingerprint")
    bundle = ModelBundle(cfg)
    bundle.load_state_arrays({k: v for k, v in blobs.items() if k[:2] in ("E.", "G.", "R.")})
    trainer = Trainer(bundle, _train_config_from_dict(meta["train_config"]))
    for key, opt in trainer.optimizers.items():
        st = meta["optimizers"][key]
        opt.load_state_dict({
            "t": st["t"],
            "lr": st["lr"],
            "m": {n: blobs[f"opt.{key}.m.{n}"] for n in opt.params},
            "v": {n: blobs[f"opt.{key}.v.{n}"] for n in opt.params},
        })
    trainer.rng.bit_generator.state = meta["rng_state"]
    trainer.epoch = int(meta["epoch"])
    trainer.log = meta["log"]
    trainer.extra = meta.get("extra", {})
    ranges = {}
    for mod in ("image", "sketch"):
        if f"scale.{mod}.lo" in blobs:
            ranges[mod] = (blobs[f"scale.{mod}.lo"], blobs[f"scale.{mod}.hi"])
    trainer.scaling = ScalingParams(ranges) if ranges else None
    trainer.run_fingerprint = run_fp
    return trainer
