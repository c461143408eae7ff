"""Embedding database, exact cosine ranking, and the evaluation protocols.

The attacker's reference database holds all original images per person
(full_ref), at most five (few_ref), or exactly one (single_ref). A query
(the anonymized image's embedding) scores against every database row;
top-k accuracy counts queries whose k best matches include the right
person. Search is exhaustive on purpose: evaluation correctness is the
point, so there is no approximate index.
"""
from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .dataset import QUERY_VARIANT, REFERENCE_VARIANT, Manifest, stable_rng
from .models import Model

PROTOCOLS = ("full_ref", "few_ref", "single_ref")
FEW_REF_CAP = 5
EMBEDDING_SOURCES = ("projection", "features")

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class EmbeddingDatabase:
    matrix: np.ndarray  # (N, D) float32, unit rows
    image_ids: tuple
    person_ids: tuple
    source: str = "projection"

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if m.ndim != 2 or m.shape[0] == 0:
            raise ValueError("database matrix must be a non-empty (N, D) array")
        if len(self.image_ids) != m.shape[0] or len(self.person_ids) != m.shape[0]:
            raise ValueError("ids must align with matrix rows")
        norms = np.linalg.norm(m.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0)
        if off.max() > _NORM_TOL:
            raise ValueError(f"row {int(off.argmax())} is not unit-norm (|n-1|={off.max():.2e})")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(self, "person_ids", tuple(self.person_ids))

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_persons(self) -> int:
        return len(set(self.person_ids))


@dataclass(frozen=True)
class RetrievalReport:
    protocol: str
    db_size: int
    n_persons: int
    topk_accuracy: dict
    seed: int
    n_queries: int = 0
    source: str = "projection"

    def to_json(self) -> str:
        d = {
            "protocol": self.protocol,
            "db_size": self.db_size,
            "n_persons": self.n_persons,
            "topk_accuracy": {str(k): v for k, v in sorted(self.topk_accuracy.items())},
            "seed": self.seed,
            "n_queries": self.n_queries,
            "source": self.source,
        }
        return json.dumps(d, indent=1)

    def csv_rows(self) -> list:
        return [
            f"{self.protocol},{k},{self.topk_accuracy[k]:.6f},{self.db_size},"
            f"{self.n_persons},{self.n_queries},{self.seed}"
            for k in sorted(self.topk_accuracy)
        ]


CSV_HEADER = "protocol,k,accuracy,db_size,n_persons,n_queries,seed"


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise ValueError(f"zero embedding at row {int(bad[0])}")
    return (m / norms[:, None]).astype(np.float32)


def embed_records(model: Model, meta: dict, records, source: str = "projection",
                  batch_size: int = 128) -> np.ndarray:
    """Raw (unnormalized) embeddings for a list of records, in input order.

    Any unreadable image aborts the run with the full list of offenders;
    silently dropping rows would bias every accuracy downstream.
    """
    if source not in EMBEDDING_SOURCES:
        raise ValueError(f"unknown embedding source {source!r}")
    pp = meta["preprocess"]
    unreadable = []
    arrays = []
    for r in records:
        try:
            arrays.append(imgio.load_for_model(r.path, pp))
        except OSError as e:
            unreadable.append(f"{r.image_id}: {e}")
    if unreadable:
        raise ValueError("unreadable images:\n" + "\n".join(unreadable))
    out = []
    fn = model.embed if source == "projection" else model.features
    for start in range(0, len(arrays), batch_size):
        out.append(fn(np.stack(arrays[start:start + batch_size])))
    return np.concatenate(out, axis=0)


def build_database(model: Model, meta: dict, records, source: str = "projection") -> EmbeddingDatabase:
    """Embed `records` and L2-normalize into an immutable database."""
    records = list(records)
    if not records:
        raise ValueError("cannot build a database from zero records")
    emb = embed_records(model, meta, records, source=source)
    return EmbeddingDatabase(
        matrix=normalize_rows(emb),
        image_ids=tuple(r.image_id for r in records),
        person_ids=tuple(r.person_id for r in records),
        source=source,
    )


def select_references(manifest: Manifest, protocol: str, seed: int = 0,
                      variant: str = "original", split: str = "test") -> list:
    """Reference records for the protocol, drawn from one split.

    single_ref keeps one record per person and few_ref at most five, both
    via a deterministic draw keyed by (seed, person_id) so reference sets
    are stable across runs. Persons without any record of the requested
    variant are excluded with a warning.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    pool = manifest.select(split=split, variant=variant)
    if not pool:
        raise ValueError(f"no {variant} records in split {split!r}")
    per = defaultdict(list)
    for r in pool:
        per[r.person_id].append(r)
    missing = {r.person_id for r in manifest.select(split=split)} - set(per)
    if missing:
        warnings.warn(f"{len(missing)} persons have no {variant} image and are excluded")

    if protocol == "full_ref":
        return sorted(pool, key=lambda r: r.image_id)

    cap = 1 if protocol == "single_ref" else FEW_REF_CAP
    out = []
    for pid in sorted(per):
        recs = sorted(per[pid], key=lambda r: r.image_id)
        rng = stable_rng(seed, "refs", pid)
        take = min(cap, len(recs))
        idx = rng.choice(len(recs), size=take, replace=False)
        out.extend(recs[i] for i in sorted(idx))
    return out


def select_queries(manifest: Manifest, input_kind: str = "raw_images", split: str = "test") -> list:
    """Query records: the anonymized images (or their edge maps) of a split."""
    variant = QUERY_VARIANT[input_kind]
    out = manifest.select(split=split, variant=variant)
    return sorted(out, key=lambda r: r.image_id)


def reference_variant(input_kind: str) -> str:
    return REFERENCE_VARIANT[input_kind]


def _ranked_order(scores: np.ndarray, id_rank: np.ndarray) -> np.ndarray:
    # descending score; exact ties broken by ascending image_id
    return np.lexsort((id_rank, -scores))


def query(db: EmbeddingDatabase, q: np.ndarray, k: int) -> list:
    """Top-k most similar database rows for one embedding.

    Returns [(image_id, person_id, similarity)] of length min(k, N); asking
    for more rows than the database holds is flagged with a warning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    qv = np.asarray(q, dtype=np.float64).ravel()
    n = np.linalg.norm(qv)
    if n < 1e-12:
        raise ValueError("cannot query with a zero vector")
    qv = qv / n
    scores = db.matrix.astype(np.float64) @ qv
    if k > len(db):
        warnings.warn(f"k={k} exceeds database size {len(db)}; returning all rows")
        k = len(db)
    id_rank = np.argsort(np.argsort(np.asarray(db.image_ids)))
    order = _ranked_order(scores, id_rank)[:k]
    return [(db.image_ids[i], db.person_ids[i], float(scores[i])) for i in order]


def evaluate_protocol(db: EmbeddingDatabase, queries, ks, protocol: str = "full_ref",
                      seed: int = 0) -> RetrievalReport:
    """Top-k accuracy over (record, embedding) query pairs.

    A query is a hit at k when any of its k best-scoring database images
    shares the query's person_id. Ties follow the same image_id rule as
    query(), so database row order never matters.
    """
    queries = list(queries)
    if not queries:
        raise ValueError("no queries given")
    ks = sorted(set(int(k) for k in ks))
    if ks[0] < 1:
        raise ValueError("k values must be >= 1")
    db_persons = set(db.person_ids)
    missing = [r.image_id for r, _ in queries if r.person_id not in db_persons]
    if missing:
        raise ValueError(f"queries whose person is absent from the database: {missing[:5]}")

    qm = normalize_rows(np.stack([np.asarray(e, dtype=np.float64).ravel() for _, e in queries]))
    scores = qm.astype(np.float64) @ db.matrix.astype(np.float64).T
    id_rank = np.argsort(np.argsort(np.asarray(db.image_ids)))
    persons = np.asarray(db.person_ids)

    hits = {k: 0 for k in ks}
    kmax = min(max(ks), len(db))
    for (rec, _), row in zip(queries, scores):
        order = _ranked_order(row, id_rank)
        ranked_persons = persons[order[:kmax]]
        match = np.nonzero(ranked_persons == rec.person_id)[0]
        first = int(match[0]) + 1 if match.size else None
        for k in ks:
            if first is not None and first <= min(k, len(db)):
                hits[k] += 1

    acc = {k: hits[k] / len(queries) for k in ks}
    return RetrievalReport(
        protocol=protocol,
        db_size=len(db),
        n_persons=db.n_persons,
        topk_accuracy=acc,
        seed=seed,
        n_queries=len(queries),
        source=db.source,
    )


def random_baseline(protocol: str, k: int, n_persons: int | None = None,
                    ref_counts=None, query_weights=None) -> float:
    """Expected top-k accuracy of uniformly random ranking.

    single_ref: k/N over N persons. full_ref/few_ref: for a query of person
    p with m_p references among M, the chance that a random size-k subset
    hits one of the m_p, averaged over the query distribution (uniform per
    person unless weights are given).
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if protocol == "single_ref":
        if not n_persons or n_persons < 1:
            raise ValueError("single_ref baseline needs n_persons")
        return min(k / n_persons, 1.0)
    if not ref_counts:
        raise ValueError(f"{protocol} baseline needs per-person reference counts")
    counts = list(ref_counts)
    total = sum(counts)
    kk = min(k, total)
    if query_weights is None:
        weights = [1.0 / len(counts)] * len(counts)
    else:
        wsum = float(sum(query_weights))
        weights = [w / wsum for w in query_weights]
    acc = 0.0
    for m, w in zip(counts, weights):
        # P(no hit) = C(M-m, k)/C(M, k) as a stable running product
        miss = 1.0
        for i in range(kk):
            miss *= max(total - m - i, 0) / (total - i)
        acc += w * (1.0 - miss)
    return acc


def manifest_ref_counts(manifest: Manifest, protocol: str, seed: int = 0,
                        variant: str = "original", split: str = "test") -> list:
    """Per-person reference counts as select_references would produce them."""
    refs = select_references(manifest, protocol, seed=seed, variant=variant, split=split)
    per = defaultdict(int)
    for r in refs:
        per[r.person_id] += 1
    return [per[p] for p in sorted(per)]


# ---------------------------------------------------------------------------
# Embedding file format
# ---------------------------------------------------------------------------


def save_embeddings(path: str | Path, db: EmbeddingDatabase, checkpoint_hash: str = "") -> None:
    """Binary embedding file: one JSON header line, then N*D little-endian
    float32; ids go to a JSONL sidecar next to it."""
    path = Path(path)
    header = {
        "n": len(db),
        "d": int(db.matrix.shape[1]),
        "source": db.source,
        "checkpoint_hash": checkpoint_hash,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(db.matrix, dtype="<f4").tobytes())
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        for iid, pid in zip(db.image_ids, db.person_ids):
            fh.write(json.dumps({"image_id": iid, "person_id": pid}) + "\n")


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".ids.jsonl")


def load_embeddings(path: str | Path) -> tuple[EmbeddingDatabase, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    n, d = int(header["n"]), int(header["d"])
    if len(raw) != 4 * n * d:
        raise ValueError(f"embedding payload size mismatch in {path}")
    matrix = np.frombuffer(raw, dtype="<f4").reshape(n, d).copy()
    image_ids, person_ids = [], []
    with open(sidecar_path(path), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                image_ids.append(rec["image_id"])
                person_ids.append(rec["person_id"])
    db = EmbeddingDatabase(matrix=matrix, image_ids=tuple(image_ids),
                           person_ids=tuple(person_ids), source=header.get("source", "projection"))
    return db, header
