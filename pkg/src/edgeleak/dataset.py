"""Dataset catalog: image records, identity-aware splits, and pair sampling.

The manifest (JSONL, one record per line) is the single source of truth for
which images exist, who is in them, and which split they belong to. Training
pairs couple an image of a person with a counterpart of the same person:
(original, anonymized) for raw training, (edge, other edge of a different
source image) for edge-only training.
"""
from __future__ import annotations

import hashlib
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

VARIANTS = ("original", "augmented", "edge_original", "edge_augmented")
CONDITIONS = ("depth", "edges", "segmentation")
SPLITS = ("train", "val", "test", "unassigned")
SPLIT_MODES = ("person_disjoint", "person_overlapping")
INPUT_KINDS = ("raw_images", "edge_images")

# Variants that play the "reference/original" role and the "query/anonymized"
# role, per input kind.
REFERENCE_VARIANT = {"raw_images": "original", "edge_images": "edge_original"}
QUERY_VARIANT = {"raw_images": "augmented", "edge_images": "edge_augmented"}


@dataclass(frozen=True)
class ImageRecord:
    """One catalogued image."""

    image_id: str
    person_id: str
    variant: str
    path: str
    base_image_id: str | None = None
    conditioning: frozenset = frozenset()
    split: str = "unassigned"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"{self.image_id}: unknown variant {self.variant!r}")
        if self.split not in SPLITS:
            raise ValueError(f"{self.image_id}: unknown split {self.split!r}")
        object.__setattr__(self, "conditioning", frozenset(self.conditioning))
        bad = self.conditioning - set(CONDITIONS)
        if bad:
            raise ValueError(f"{self.image_id}: unknown conditioning {sorted(bad)}")
        if self.variant in ("augmented", "edge_augmented") and not self.conditioning:
            raise ValueError(f"{self.image_id}: {self.variant} record needs conditioning")
        if self.variant in ("original", "edge_original"):
            if self.conditioning:
                raise ValueError(f"{self.image_id}: {self.variant} must have no conditioning")
            if self.base_image_id is not None:
                raise ValueError(f"{self.image_id}: {self.variant} must have no base_image_id")

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_id": self.image_id,
                "person_id": self.person_id,
                "variant": self.variant,
                "base_image_id": self.base_image_id,
                "conditioning": sorted(self.conditioning),
                "path": self.path,
                "split": self.split,
            },
            ensure_ascii=False,
        )

    @staticmethod
    def from_json(line: str) -> "ImageRecord":
        d = json.loads(line)
        return ImageRecord(
            image_id=d["image_id"],
            person_id=d["person_id"],
            variant=d["variant"],
            path=d["path"],
            base_image_id=d.get("base_image_id"),
            conditioning=frozenset(d.get("conditioning", [])),
            split=d.get("split", "unassigned"),
        )


@dataclass(frozen=True)
class PairSample:
    """A training pair: two images of the same person."""

    anchor: ImageRecord
    positive: ImageRecord
    distinct_base: bool

    def __post_init__(self):
        if self.anchor.person_id != self.positive.person_id:
            raise ValueError("pair crosses person identities")


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    split_mode: str = "person_disjoint"
    seed: int = 0

    def __post_init__(self):
        if self.split_mode not in SPLIT_MODES:
            raise ValueError(f"unknown split_mode {self.split_mode!r}")
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise ValueError(f"duplicate image_id {r.image_id!r}")
            seen.add(r.image_id)

    def __len__(self) -> int:
        return len(self.records)

    def persons(self) -> list:
        return sorted({r.person_id for r in self.records})

    def by_person(self) -> dict:
        out = defaultdict(list)
        for r in self.records:
            out[r.person_id].append(r)
        return dict(out)

    def select(self, split: str | None = None, variant: str | None = None) -> list:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if variant is not None:
            out = [r for r in out if r.variant == variant]
        return out

    def get(self, image_id: str) -> ImageRecord:
        for r in self.records:
            if r.image_id == image_id:
                return r
        raise KeyError(image_id)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")

    @staticmethod
    def load(path: str | Path) -> "Manifest":
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(ImageRecord.from_json(line))
        return Manifest(records=records)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.to_json().encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Directory ingestion
# ---------------------------------------------------------------------------

DEFAULT_PATTERN = (
    r"^(?P<person>[A-Za-z0-9.\-]+)_(?P<idx>\d+)_(?P<variant>orig|aug)(?:_(?P<cond>[des]+))?$"
)


@dataclass(frozen=True)
class NamingRule:
    """Filename convention: how person/variant/conditioning are recovered.

    `pattern` is a regex over the file stem with named groups `person`,
    `variant`, and optionally `idx` and `cond`. Conditioning letters map
    d/e/s to depth/edges/segmentation; augmented files without letters are
    treated as segmentation-only (the conditioning every variant carries).
    """

    pattern: str = DEFAULT_PATTERN
    variant_map: tuple = (("orig", "original"), ("aug", "augmented"))
    extensions: tuple = (".png", ".jpg", ".jpeg")


def build_manifest(root: str | Path, rule: NamingRule | None = None) -> tuple[Manifest, list]:
    """Catalog every image under `root`. Returns (manifest, parse errors).

    Unparsable filenames are reported in the error list and skipped; an
    empty directory is a hard error.
    """
    rule = rule or NamingRule()
    root = Path(root)
    rx = re.compile(rule.pattern)
    vmap = dict(rule.variant_map)
    letters = {"d": "depth", "e": "edges", "s": "segmentation"}

    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in rule.extensions)
    if not files:
        raise ValueError(f"no images found under {root}")

    errors = []
    parsed = []
    for p in files:
        m = rx.match(p.stem)
        if not m or m.group("variant") not in vmap:
            errors.append(f"{p.name}: does not match naming rule")
            continue
        parsed.append((p, m))

    known_ids = {p.stem for p, _ in parsed}
    records = []
    for p, m in parsed:
        variant = vmap[m.group("variant")]
        cond = frozenset()
        base = None
        if variant == "augmented":
            raw = m.groupdict().get("cond") or "s"
            cond = frozenset(letters[ch] for ch in raw)
            idx = m.groupdict().get("idx")
            if idx is not None:
                candidate = f"{m.group('person')}_{idx}_orig"
                if candidate in known_ids:
                    base = candidate
        records.append(
            ImageRecord(
                image_id=p.stem,
                person_id=m.group("person"),
                variant=variant,
                path=str(p),
                base_image_id=base,
                conditioning=cond,
            )
        )
    return Manifest(records=records), errors


# ---------------------------------------------------------------------------
# Split assignment
# ---------------------------------------------------------------------------


def assign_splits(
    manifest: Manifest,
    ratios: tuple,
    mode: str = "person_disjoint",
    seed: int = 0,
) -> Manifest:
    """Assign every record to train/val/test.

    person_disjoint keeps every person in exactly one split and fills the
    train quota greedily with the persons that have the most images (more
    images of one identity help contrastive training most); the remainder
    is shuffled into val/test by person count. person_overlapping splits
    image-wise, ignoring identity.
    """
    if len(manifest) == 0:
        raise ValueError("cannot split an empty manifest")
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}")
    ratios = tuple(float(x) for x in ratios)
    if len(ratios) != 3 or any(x < 0 for x in ratios):
        raise ValueError("ratios must be three non-negative fractions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    rng = np.random.default_rng(seed)
    assignment = {}

    if mode == "person_disjoint":
        counts = defaultdict(int)
        for r in manifest.records:
            counts[r.person_id] += 1
        persons = sorted(counts)
        if len(persons) < 3:
            raise ValueError(
                f"person_disjoint split needs at least 3 persons, found {len(persons)}"
            )
        n = len(persons)
        n_train = int(round(ratios[0] * n))
        n_val = min(int(round(ratios[1] * n)), n - n_train)
        by_count = sorted(persons, key=lambda p: (-counts[p], p))
        train_persons = set(by_count[:n_train])
        rest = [p for p in by_count[n_train:]]
        rest_shuffled = [rest[i] for i in rng.permutation(len(rest))]
        val_persons = set(rest_shuffled[:n_val])
        person_split = {}
        for p in persons:
            if p in train_persons:
                person_split[p] = "train"
            elif p in val_persons:
                person_split[p] = "val"
            else:
                person_split[p] = "test"
        for r in manifest.records:
            assignment[r.image_id] = person_split[r.person_id]
    else:
        n = len(manifest.records)
        order = rng.permutation(n)
        n_train = int(round(ratios[0] * n))
        n_val = min(int(round(ratios[1] * n)), n - n_train)
        for pos, idx in enumerate(order):
            if pos < n_train:
                s = "train"
            elif pos < n_train + n_val:
                s = "val"
            else:
                s = "test"
            assignment[manifest.records[idx].image_id] = s

    new_records = [replace(r, split=assignment[r.image_id]) for r in manifest.records]
    return Manifest(records=new_records, split_mode=mode, seed=seed)


# ---------------------------------------------------------------------------
# Pair sampling
# ---------------------------------------------------------------------------


def _eligible_persons(manifest: Manifest, input_kind: str, split: str = "train") -> dict:
    """Map person_id -> (anchor candidates, positive candidates)."""
    if input_kind not in INPUT_KINDS:
        raise ValueError(f"unknown input kind {input_kind!r}")
    per = defaultdict(lambda: ([], []))
    for r in manifest.records:
        if r.split != split:
            continue
        if input_kind == "raw_images":
            if r.variant == "original":
                per[r.person_id][0].append(r)
            elif r.variant == "augmented":
                per[r.person_id][1].append(r)
        else:
            if r.variant == "edge_original":
                per[r.person_id][0].append(r)
                per[r.person_id][1].append(r)
    out = {}
    for pid, (anchors, positives) in per.items():
        if input_kind == "raw_images":
            if anchors and positives:
                out[pid] = (sorted(anchors, key=lambda r: r.image_id),
                            sorted(positives, key=lambda r: r.image_id))
        else:
            if len(anchors) >= 2:
                srt = sorted(anchors, key=lambda r: r.image_id)
                out[pid] = (srt, srt)
    return out


def _pair_for_anchor(anchor, positives, rng, input_kind) -> PairSample:
    if input_kind == "raw_images":
        distinct = [p for p in positives if p.base_image_id != anchor.image_id]
        if distinct:
            pos = distinct[rng.integers(len(distinct))]
            return PairSample(anchor, pos, True)
        pos = positives[rng.integers(len(positives))]
        return PairSample(anchor, pos, pos.base_image_id != anchor.image_id)
    others = [p for p in positives if p.image_id != anchor.image_id]
    pos = others[rng.integers(len(others))]
    return PairSample(anchor, pos, True)


def _draw_pair(anchors, positives, rng, input_kind) -> PairSample:
    anchor = anchors[rng.integers(len(anchors))]
    return _pair_for_anchor(anchor, positives, rng, input_kind)


def sample_training_batch(
    manifest: Manifest,
    k: int,
    rng: np.random.Generator,
    input_kind: str = "raw_images",
) -> list:
    """Draw one batch of `k` pairs, all from distinct persons.

    Positives are picked uniformly among the person's counterparts whose
    base image differs from the anchor whenever such a counterpart exists;
    otherwise among all counterparts, with distinct_base recorded False.
    """
    pool = _eligible_persons(manifest, input_kind)
    if len(pool) < k:
        raise ValueError(
            f"batch needs {k} eligible persons in the train split, found {len(pool)}"
        )
    pids = sorted(pool)
    chosen = rng.choice(len(pids), size=k, replace=False)
    return [_draw_pair(*pool[pids[i]], rng, input_kind) for i in chosen]


def epoch_batches(
    manifest: Manifest,
    k: int,
    rng: np.random.Generator,
    input_kind: str = "raw_images",
):
    """Yield one epoch of batches, each holding k pairs of distinct persons.

    An epoch is a pass over anchor images, not persons: every person
    anchors each of its images once, in rounds. Within a round persons are
    shuffled and consumed in chunks of k with the trailing partial chunk
    dropped, so every optimizer step sees exactly k distinct persons.
    """
    pool = _eligible_persons(manifest, input_kind)
    if len(pool) < k:
        raise ValueError(
            f"batch needs {k} eligible persons in the train split, found {len(pool)}"
        )
    pids = sorted(pool)
    queues = {}
    for pid in pids:
        anchors = pool[pid][0]
        queues[pid] = [anchors[i] for i in rng.permutation(len(anchors))]
    rounds = max(len(q) for q in queues.values())
    for rnd in range(rounds):
        live = [pid for pid in pids if len(queues[pid]) > rnd]
        if len(live) < k:
            continue
        order = rng.permutation(len(live))
        for start in range(0, len(live) - k + 1, k):
            batch = []
            for i in order[start:start + k]:
                pid = live[i]
                anchor = queues[pid][rnd]
                batch.append(_pair_for_anchor(anchor, pool[pid][1], rng, input_kind))
            yield batch


def stable_rng(*key) -> np.random.Generator:
    """Generator keyed by a stable hash of `key` (reproducible across runs)."""
    digest = hashlib.blake2b("\x1f".join(str(k) for k in key).encode(), digest_size=8)
    return np.random.default_rng(int.from_bytes(digest.digest(), "little"))
