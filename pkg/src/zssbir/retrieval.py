"""Zero-shot retrieval by max-cosine over generated candidates, and ranking metrics."""

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError


@dataclass
class RetrievalConfig:
    c: int = 10
    ks: tuple = (10, 100)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if self.c < 1:
            raise ConfigError("candidate count c must be >= 1")
        if any(k <= 0 for k in self.ks):
            raise ConfigError("K values must be positive")


@dataclass
class QueryResult:
    query_id: int
    label: int
    order: np.ndarray  # database indices, best first
    scores: np.ndarray  # score of each ranked item, non-increasing
    relevant: np.ndarray  # bool per ranked item

    @property
    def n_relevant(self):
        return int(self.relevant.sum())


@dataclass
class MetricsReport:
    precision_at_k: dict
    map_at_all: float
    map_at_k: dict
    per_query_ap: list
    n_queries: int
    db_size: int
    c: int = 1
    fingerprint: str = ""
    warnings: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["precision_at_k"] = {str(k): v for k, v in self.precision_at_k.items()}
        d["map_at_k"] = {str(k): v for k, v in self.map_at_k.items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cosine(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"cosine of vectors with shapes {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _unit_rows(m):
    n = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, n, out=np.zeros_like(m), where=n > 0)


def max_cosine_scores(candidates, database):
    """Score of each database row: max over candidate rows of cosine similarity."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    database = np.asarray(database, dtype=np.float64)
    if candidates.shape[1] != database.shape[1]:
        raise DimensionError(
            f"candidate width {candidates.shape[1]} != database width {database.shape[1]}"
        )
    return (_unit_rows(candidates) @ _unit_rows(database).T).max(axis=0)


def rank(scores, db_labels, query_label, query_id=0):
    """Descending scores, ties by ascending database index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return QueryResult(
        query_id=query_id,
        label=int(query_label),
        order=order,
        scores=scores[order],
        relevant=np.asarray(db_labels)[order] == query_label,
    )


def score_query(bundle, a, database, db_labels, query_label, config, query_id=0):
    """Generate ``config.c`` candidates for sketch ``a`` and rank the database."""
    database = np.asarray(database, dtype=np.float64)
    if len(database) == 0:
        raise DataError("empty retrieval database")
    cands = bundle.generate_from_prior(a, config.c, rng=query_rng(config.seed, query_id))
    return rank(max_cosine_scores(cands, database), db_labels, query_label, query_id)


def query_rng(seed, query_id):
    """Independent stream per query; draws for c are a prefix of draws for c+1."""
    return np.random.default_rng([int(seed), int(query_id)])


def precision_at_k(result, k):
    n = len(result.relevant)
    if k > n:
        warnings.warn(f"K={k} exceeds database size {n}; clamped", stacklevel=2)
        k = n
    if k == 0:
        return 0.0
    return float(result.relevant[:k].sum()) / k


def average_precision(result, cutoff=None):
    rel = np.asarray(result.relevant, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        warnings.warn(f"query {result.query_id} has no relevant items; AP = 0", stacklevel=2)
        return 0.0
    if cutoff is None:
        norm, rel_cut = total, rel
    else:
        rel_cut = rel[:cutoff]
        norm = min(total, cutoff)
    hits = np.cumsum(rel_cut)
    ranks = np.arange(1, len(rel_cut) + 1)
    if len(rel_cut) == 0:
        return 0.0
    # running (left-to-right) sum so the result does not depend on summation blocking
    return float(np.cumsum(np.where(rel_cut, hits / ranks, 0.0))[-1] / norm)


def _batch_metrics(rel, ks):
    """Vectorized P@K, AP@all and AP@K over a (queries x db) relevance matrix."""
    n_q, n = rel.shape
    hits = np.cumsum(rel, axis=1)
    prec = hits / np.arange(1, n + 1)
    total = rel.sum(axis=1)
    running = np.cumsum(np.where(rel, prec, 0.0), axis=1)
    ap = np.where(total > 0, running[:, -1] / np.maximum(total, 1), 0.0)
    p_at, ap_at = {}, {}
    for k in ks:
        kk = min(k, n)
        p_at[k] = hits[:, kk - 1] / kk
        norm = np.minimum(total, k)
        ap_at[k] = np.where(norm > 0, running[:, kk - 1] / np.maximum(norm, 1), 0.0)
    return p_at, ap, ap_at


def evaluate_scores(scores, query_labels, db_labels, ks=(10, 100), c=1, fingerprint=""):
    """Metrics from a precomputed (queries x database) score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    db_labels = np.asarray(db_labels)
    if scores.shape[0] == 0 or scores.shape[1] == 0:
        raise DataError("evaluation needs at least one query and one database item")
    notes = []
    for k in ks:
        if k > len(db_labels):
            notes.append(f"K={k} exceeds database size {len(db_labels)}; clamped")
    idx = np.arange(scores.shape[1])
    order = np.stack([np.lexsort((idx, -row)) for row in scores])
    rel = db_labels[order] == query_labels[:, None]
    if np.any(rel.sum(axis=1) == 0):
        notes.append(f"{int(np.sum(rel.sum(axis=1) == 0))} queries had no relevant items (AP = 0)")
    p_at, ap, ap_at = _batch_metrics(rel, ks)
    return MetricsReport(
        precision_at_k={k: float(v.mean()) for k, v in p_at.items()},
        map_at_all=float(ap.mean()),
        map_at_k={k: float(v.mean()) for k, v in ap_at.items()},
        per_query_ap=[float(v) for v in ap],
        n_queries=int(scores.shape[0]),
        db_size=int(scores.shape[1]),
        c=int(c),
        fingerprint=fingerprint,
        warnings=notes,
    )


def candidate_scores(bundle, sketches, database, config, query_ids=None):
    """(queries x database) max-cosine scores; each query uses its own seeded stream."""
    sketches = np.asarray(sketches, dtype=np.float64)
    database = np.asarray(database, dtype=np.float64)
    if len(database) == 0 or len(sketches) == 0:
        raise DataError("evaluation needs non-empty query and database sets")
    ids = np.arange(len(sketches)) if query_ids is None else np.asarray(query_ids)
    db_unit = _unit_rows(database)

    def chunk(lo, hi):
        out = np.empty((hi - lo, len(database)))
        for j in range(lo, hi):
            cands = bundle.generate_from_prior(sketches[j], config.c, rng=query_rng(config.seed, ids[j]))
            out[j - lo] = (_unit_rows(cands) @ db_unit.T).max(axis=0)
        return out

    n = len(sketches)
    if config.workers <= 1:
        return chunk(0, n)
    bounds = np.linspace(0, n, config.workers + 1).astype(int)
    with ThreadPoolExecutor(config.workers) as pool:
        parts = list(pool.map(lambda b: chunk(*b), zip(bounds[:-1], bounds[1:])))
    return np.concatenate(parts)


def evaluate(bundle, sketches, sketch_labels, database, db_labels, config, fingerprint=""):
    scores = candidate_scores(bundle, sketches, database, config)
    return evaluate_scores(scores, sketch_labels, db_labels, config.ks, config.c, fingerprint)


def prototype_oracle_map(prototypes, proto_labels, database, db_labels):
    """mAP@all when each class prototype itself is the query (brute-force cosine ranking)."""
    scores = _unit_rows(np.asarray(prototypes, dtype=np.float64)) @ _unit_rows(
        np.asarray(database, dtype=np.float64)
    ).T
    return evaluate_scores(scores, proto_labels, db_labels, ks=(10,)).map_at_all


def rankings_csv_rows(scores, query_labels, db_labels):
    """(query_id, rank, db_index, score, relevant) rows for every query."""
    db_labels = np.asarray(db_labels)
    for q, row in enumerate(np.asarray(scores)):
        res = rank(row, db_labels, query_labels[q], q)
        for r, (i, s, rel) in enumerate(zip(res.order, res.scores, res.relevant), start=1):
            yield q, r, int(i), float(s), int(rel)
