"""Feature files, zero-shot class splits, sketch/image pairing, scaling and synthetic data."""

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, ParseError

MAGIC = b"ZSFB"
VERSION = 1
MODALITIES = {"image": 0, "sketch": 1}
MODALITY_NAMES = {v: k for k, v in MODALITIES.items()}
_HEADER = struct.Struct("<4sHBQI")


@dataclass
class FeatureRecord:
    label: int
    modality: str
    vector: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, FeatureRecord)
            and self.label == other.label
            and self.modality == other.modality
            and np.array_equal(self.vector, other.vector)
        )


@dataclass
class DatasetSplit:
    seen_classes: frozenset
    unseen_classes: frozenset
    train: list
    test: list

    def __post_init__(self):
        if self.seen_classes & self.unseen_classes:
            raise ConfigError("seen and unseen classes overlap")


@dataclass
class PairSet:
    sketches: np.ndarray
    images: np.ndarray
    labels: np.ndarray
    pairs_per_class: int

    def __len__(self):
        return len(self.labels)


@dataclass
class ScalingParams:
    """Per-modality (lo, hi) coordinate ranges fitted on seen-class training data."""

    ranges: dict = field(default_factory=dict)

    def transform(self, matrix, modality):
        lo, hi = self.ranges[modality]
        if np.shape(matrix)[-1] != len(lo):
            raise DimensionError(
                f"{modality} features have width {np.shape(matrix)[-1]}, scaling was fitted on width {len(lo)}"
            )
        span = hi - lo
        flat = span == 0
        out = (np.asarray(matrix, dtype=np.float64) - lo) / np.where(flat, 1.0, span)
        out[..., flat] = 0.5
        return out

    def inverse(self, matrix, modality):
        lo, hi = self.ranges[modality]
        return np.asarray(matrix, dtype=np.float64) * (hi - lo) + lo


@dataclass
class SyntheticSpec:
    n_classes: int = 15
    dim: int = 32
    images_per_class: int = 200
    sketches_per_class: int = 200
    image_noise_std: float = 0.3
    sketch_noise_std: float = 0.3
    cross_modal_map_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.dim, self.images_per_class, self.sketches_per_class) <= 0:
            raise ConfigError("synthetic counts must be positive")
        if self.image_noise_std < 0 or self.sketch_noise_std < 0:
            raise ConfigError("noise standard deviations must be >= 0")


# ---------------------------------------------------------------------------
# file formats


def write_features(path, records, modality=None):
    """Write one modality's records in the binary feature format."""
    records = list(records)
    if modality is None:
        modality = records[0].modality if records else "image"
    dim = len(records[0].vector) if records else 0
    if any(r.modality != modality for r in records):
        raise DataError(f"a feature file holds a single modality ({modality})")
    if any(len(r.vector) != dim for r in records):
        raise DataError("records have inconsistent widths")
    rec = np.dtype([("label", "<u4"), ("vec", "<f4", (dim,))])
    arr = np.empty(len(records), dtype=rec)
    for i, r in enumerate(records):
        arr[i]["label"] = r.label
        arr[i]["vec"] = r.vector
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, MODALITIES[modality], len(records), dim))
        fh.write(arr.tobytes())


def load_features(path):
    """Parse a binary feature file (or a ``.csv`` with header ``label,f0,...``)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise ParseError(f"{path}: truncated header", len(buf))
    magic, version, mod, count, dim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}", 0)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported version {version}", 4)
    if mod not in MODALITY_NAMES:
        raise ParseError(f"{path}: unknown modality code {mod}", 6)
    rec = np.dtype([("label", "<u4"), ("vec", "<f4", (dim,))])
    expected = _HEADER.size + count * rec.itemsize
    if len(buf) < expected:
        whole = (len(buf) - _HEADER.size) // rec.itemsize
        raise ParseError(
            f"{path}: truncated after {whole} of {count} records",
            _HEADER.size + whole * rec.itemsize,
        )
    if len(buf) > expected:
        raise ParseError(f"{path}: {len(buf) - expected} trailing bytes", expected)
    arr = np.frombuffer(buf, dtype=rec, count=count, offset=_HEADER.size)
    modality = MODALITY_NAMES[mod]
    return [
        FeatureRecord(int(r["label"]), modality, r["vec"].astype(np.float64)) for r in arr
    ]


def load_csv(path, modality="image"):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        dim = len(header) - 1
        if header[0] != "label" or header[1:] != [f"f{i}" for i in range(dim)]:
            raise ParseError(f"{path}: header must be label,f0,...,f{{d-1}}", 0)
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise ParseError(f"{path}: line {lineno} has {len(row) - 1} values, expected {dim}")
            out.append(FeatureRecord(int(row[0]), modality, np.array(row[1:], dtype=np.float64)))
    return out


def write_csv(path, records):
    records = list(records)
    dim = len(records[0].vector) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(dim)])
        for r in records:
            w.writerow([r.label] + [repr(float(v)) for v in r.vector])


def write_manifest(path, files, class_names):
    """``files`` maps file name -> modality; ``class_names`` maps id -> name."""
    lines = ["[files]"]
    lines += [f"{name}\t{mod}" for name, mod in files.items()]
    lines.append("[classes]")
    lines += [f"{cid}\t{name}" for cid, name in sorted(class_names.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    files, classes, section = {}, {}, None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line in ("[files]", "[classes]"):
            section = line[1:-1]
            continue
        parts = raw.split("\t")
        if len(parts) != 2 or section is None:
            raise ParseError(f"{path}: malformed manifest line {raw!r}")
        if section == "files":
            files[parts[0]] = parts[1]
        else:
            classes[int(parts[0])] = parts[1]
    return files, classes


def load_dataset(manifest_path):
    """All records listed by a manifest, plus the class-name mapping."""
    manifest_path = Path(manifest_path)
    files, classes = read_manifest(manifest_path)
    records = []
    for name, modality in files.items():
        path = manifest_path.parent / name
        recs = load_csv(path, modality) if path.suffix == ".csv" else load_features(path)
        if any(r.modality != modality for r in recs):
            raise DataError(f"{path}: manifest says {modality}, file disagrees")
        records.extend(recs)
    return records, classes


# ---------------------------------------------------------------------------
# splits and pairing


SPLIT_PRESETS = {
    # name: (number of unseen classes, required class total, min test-class size)
    "sketchy-25": (25, 125, 0),
    "sketchy-21": (21, 125, 0),
    "tuberlin-30": (30, 250, 400),
}


def make_zero_shot_split(records, unseen_fraction=None, unseen_classes=None, seed=0,
                         n_unseen=None, min_test_class_size=0):
    """Partition classes into disjoint seen/unseen sets.

    An explicit ``unseen_classes`` list wins over the seeded random draw.
    With ``min_test_class_size``, only classes holding more records than that
    are eligible for the unseen draw (eligibility is filtered before drawing).
    """
    classes = sorted({r.label for r in records})
    if len(classes) < 2:
        raise ConfigError("a zero-shot split needs at least two classes")
    if unseen_classes is not None:
        unseen = set(int(c) for c in unseen_classes)
        unknown = unseen - set(classes)
        if unknown:
            raise ConfigError(f"unseen classes not in data: {sorted(unknown)}")
    else:
        if n_unseen is None:
            if unseen_fraction is None:
                raise ConfigError("give unseen_fraction, n_unseen or unseen_classes")
            n_unseen = int(round(unseen_fraction * len(classes)))
        counts = {}
        for r in records:
            counts[r.label] = counts.get(r.label, 0) + 1
        eligible = [c for c in classes if counts[c] > min_test_class_size]
        if n_unseen > len(eligible):
            raise ConfigError(f"cannot draw {n_unseen} unseen classes from {len(eligible)} eligible")
        rng = np.random.default_rng(seed)
        unseen = set(int(c) for c in rng.choice(eligible, size=n_unseen, replace=False)) if n_unseen else set()
    if not unseen or len(unseen) == len(classes):
        raise ConfigError("unseen class set must be non-empty and leave seen classes")
    seen = set(classes) - unseen
    train = [r for r in records if r.label in seen]
    test = [r for r in records if r.label in unseen]
    return DatasetSplit(frozenset(seen), frozenset(unseen), train, test)


def preset_split(name, records, seed=0):
    try:
        n_unseen, n_total, min_size = SPLIT_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown split preset {name!r}") from None
    n_classes = len({r.label for r in records})
    if n_classes != n_total:
        raise ConfigError(f"preset {name} expects {n_total} classes, data has {n_classes}")
    return make_zero_shot_split(records, seed=seed, n_unseen=n_unseen, min_test_class_size=min_size)


def stack(records, modality=None):
    """(matrix, labels) for the records of one modality."""
    sel = [r for r in records if modality is None or r.modality == modality]
    if not sel:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    return np.stack([r.vector for r in sel]), np.array([r.label for r in sel], dtype=int)


def build_pairs(split, pairs_per_class, seed=0):
    """Uniform with-replacement (sketch, image) draws, ``pairs_per_class`` per seen class."""
    rng = np.random.default_rng(seed)
    images, img_labels = stack(split.train, "image")
    sketches, skt_labels = stack(split.train, "sketch")
    out_a, out_x, out_y = [], [], []
    for c in sorted(split.seen_classes):
        ii = np.flatnonzero(img_labels == c)
        si = np.flatnonzero(skt_labels == c)
        if len(ii) == 0 or len(si) == 0:
            which = "image" if len(ii) == 0 else "sketch"
            raise DataError(f"seen class {c} has no {which} records")
        pick_i = rng.choice(ii, size=pairs_per_class, replace=True)
        pick_s = rng.choice(si, size=pairs_per_class, replace=True)
        out_a.append(sketches[pick_s])
        out_x.append(images[pick_i])
        out_y.append(np.full(pairs_per_class, c))
    return PairSet(np.concatenate(out_a), np.concatenate(out_x), np.concatenate(out_y), pairs_per_class)


def fit_scaling(split):
    ranges = {}
    for modality in ("image", "sketch"):
        mat, _ = stack(split.train, modality)
        if mat.size == 0:
            continue
        lo, hi = mat.min(axis=0), mat.max(axis=0)
        if np.any(hi == lo):
            warnings.warn(
                f"{int(np.sum(hi == lo))} constant {modality} coordinate(s) mapped to 0.5",
                stacklevel=2,
            )
        ranges[modality] = (lo, hi)
    return ScalingParams(ranges)


def standardize(records, split):
    """Min-max scale every record with ranges fitted on the seen-class training records."""
    params = fit_scaling(split)
    scaled = [
        FeatureRecord(r.label, r.modality, params.transform(r.vector[None, :], r.modality)[0])
        for r in records
    ]
    return scaled, params


# ---------------------------------------------------------------------------
# synthetic data


def random_orthogonal(rng, dim):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def synth_generate(spec, return_prototypes=False):
    """Class-structured image/sketch features.

    Image prototype ``p_c ~ N(0, I)``; sketch prototype ``q_c = M p_c + eta_c``
    with ``M`` a shared scaled random orthogonal map and
    ``eta_c ~ N(0, sketch_noise_std^2 I)``. Samples add isotropic noise.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    protos = rng.standard_normal((spec.n_classes, d))
    M = spec.cross_modal_map_scale * random_orthogonal(rng, d)
    sketch_protos = protos @ M.T + spec.sketch_noise_std * rng.standard_normal((spec.n_classes, d))
    records = []
    for c in range(spec.n_classes):
        imgs = protos[c] + spec.image_noise_std * rng.standard_normal((spec.images_per_class, d))
        skts = sketch_protos[c] + spec.sketch_noise_std * rng.standard_normal((spec.sketches_per_class, d))
        # float32 so records survive a trip through the binary format unchanged
        records += [FeatureRecord(c, "image", v.astype(np.float32).astype(np.float64)) for v in imgs]
        records += [FeatureRecord(c, "sketch", v.astype(np.float32).astype(np.float64)) for v in skts]
    if return_prototypes:
        return records, protos, sketch_protos
    return records
