"""Training loop: AdamW on the contrastive objective, with per-epoch
checkpoints and validation-based model selection.

Each optimizer step consumes one batch of K distinct persons (anchor plus
matched counterpart each). Validation embeds the val split and measures
full-reference top-1 retrieval; the best epoch's checkpoint is the model
the attack uses. In the edge-only setting the model never sees an
anonymized image: pairs are edge maps of two different originals of the
same person, and validation queries are held-out original edge maps.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imgio, retrieval
from .contrastive import nt_xent_loss_and_grad, validate_tau
from .dataset import INPUT_KINDS, Manifest, epoch_batches, stable_rng
from .models import EncoderSpec, Model, ProjectionSpec, config_hash, load_checkpoint, save_checkpoint
from .nn import AdamW

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    tau: float = 0.05
    learning_rate: float = 1e-4
    optimizer: str = "adamw"
    weight_decay: float = 1e-2
    epochs: int = 30
    seed: int = 0
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    projection: ProjectionSpec = field(default_factory=ProjectionSpec)
    symmetric_loss: bool = True
    input_kind: str = "raw_images"
    resolution: int = 128
    grayscale: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        validate_tau(self.tau)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.input_kind not in INPUT_KINDS:
            raise ValueError(f"unknown input_kind {self.input_kind!r}")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")

    def hash(self) -> str:
        return config_hash(asdict(self))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        d = json.loads(text)
        if "encoder" in d:
            d["encoder"] = EncoderSpec(**d["encoder"])
        if "projection" in d:
            d["projection"] = ProjectionSpec(**d["projection"])
        return TrainConfig(**d)


@dataclass
class TrainingLog:
    config_hash: str
    steps: list = field(default_factory=list)  # (step, epoch, loss, wall_time)
    val: list = field(default_factory=list)  # (epoch, top1)

    def add_step(self, step, epoch, loss):
        self.steps.append((step, epoch, float(loss), time.time()))

    def add_val(self, epoch, metric):
        if any(e == epoch for e, _ in self.val):
            raise ValueError(f"duplicate validation entry for epoch {epoch}")
        self.val.append((epoch, float(metric)))

    def to_csv(self, path: str | Path) -> None:
        val_by_epoch = dict(self.val)
        lines = ["step,epoch,loss,val_top1,wall_time"]
        last_of_epoch = {}
        for step, epoch, _, _ in self.steps:
            last_of_epoch[epoch] = step
        for step, epoch, loss, ts in self.steps:
            v = val_by_epoch.get(epoch)
            cell = f"{v:.6f}" if v is not None and last_of_epoch[epoch] == step else ""
            lines.append(f"{step},{epoch},{loss:.6f},{cell},{ts:.3f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class _ImageBank:
    """Preprocessed train/val images, loaded once per run."""

    def __init__(self, preprocess: dict):
        self.preprocess = preprocess
        self._cache = {}

    def get(self, record) -> np.ndarray:
        arr = self._cache.get(record.image_id)
        if arr is None:
            arr = imgio.load_for_model(record.path, self.preprocess)
            self._cache[record.image_id] = arr
        return arr

    def batch(self, records) -> np.ndarray:
        return np.stack([self.get(r) for r in records])


def compute_preprocess(manifest: Manifest, cfg: TrainConfig) -> dict:
    """Resize parameters plus per-channel mean/std over the train images
    the model will actually consume."""
    roles = (
        ("original", "augmented") if cfg.input_kind == "raw_images" else ("edge_original",)
    )
    records = [r for r in manifest.records if r.split == "train" and r.variant in roles]
    if not records:
        raise ValueError(f"train split has no {roles} images")
    base = {"resolution": cfg.resolution, "grayscale": cfg.grayscale, "mean": 0.0, "std": 1.0}
    total = 0
    s1 = None
    s2 = None
    for r in records:
        arr = imgio.load_for_model(r.path, base).astype(np.float64)
        if s1 is None:
            s1 = np.zeros(arr.shape[0])
            s2 = np.zeros(arr.shape[0])
        s1 += arr.sum(axis=(1, 2))
        s2 += (arr * arr).sum(axis=(1, 2))
        total += arr.shape[1] * arr.shape[2]
    mean = s1 / total
    std = np.sqrt(np.maximum(s2 / total - mean * mean, 1e-12))
    return {
        "resolution": cfg.resolution,
        "grayscale": cfg.grayscale,
        "mean": [float(x) for x in mean],
        "std": [float(x) for x in std],
    }


def _checkpoint_meta(cfg: TrainConfig, preprocess: dict, epoch: int, val_top1: float | None) -> dict:
    return {
        "tau": cfg.tau,
        "config_hash": cfg.hash(),
        "input_kind": cfg.input_kind,
        "seed": cfg.seed,
        "preprocess": preprocess,
        "epoch": epoch,
        "val_top1": val_top1,
    }


def _val_queries_and_refs(manifest: Manifest, cfg: TrainConfig):
    """Validation query/reference records on the val split.

    raw_images: queries are the anonymized images, references all
    originals. edge_images: no anonymized data may be touched, so one
    held-out original edge map per person (seeded draw) queries against
    the remaining ones.
    """
    if cfg.input_kind == "raw_images":
        refs = manifest.select(split="val", variant="original")
        queries = manifest.select(split="val", variant="augmented")
        ref_ids = {r.person_id for r in refs}
        queries = [q for q in queries if q.person_id in ref_ids]
        return sorted(queries, key=lambda r: r.image_id), sorted(refs, key=lambda r: r.image_id)

    per = {}
    for r in manifest.select(split="val", variant="edge_original"):
        per.setdefault(r.person_id, []).append(r)
    queries, refs = [], []
    for pid in sorted(per):
        recs = sorted(per[pid], key=lambda r: r.image_id)
        if len(recs) < 2:
            refs.extend(recs)
            continue
        rng = stable_rng(cfg.seed, "valq", pid)
        qi = int(rng.integers(len(recs)))
        queries.append(recs[qi])
        refs.extend(recs[:qi] + recs[qi + 1:])
    return queries, refs


def _validate_model(model: Model, meta: dict, manifest: Manifest, cfg: TrainConfig,
                    bank: _ImageBank | None = None) -> float:
    queries, refs = _val_queries_and_refs(manifest, cfg)
    if not queries or not refs:
        raise ValueError("val split has no usable query/reference images")
    if bank is not None:
        ref_emb = model.embed(bank.batch(refs))
        q_emb = model.embed(bank.batch(queries))
    else:
        ref_emb = retrieval.embed_records(model, meta, refs)
        q_emb = retrieval.embed_records(model, meta, queries)
    db = retrieval.EmbeddingDatabase(
        matrix=retrieval.normalize_rows(ref_emb),
        image_ids=tuple(r.image_id for r in refs),
        person_ids=tuple(r.person_id for r in refs),
    )
    report = retrieval.evaluate_protocol(
        db, list(zip(queries, q_emb)), ks=[1], protocol="full_ref", seed=cfg.seed
    )
    return report.topk_accuracy[1]


def validate(checkpoint_path: str | Path, manifest: Manifest) -> float:
    """Full-reference top-1 of a saved checkpoint on the val split."""
    model, meta = load_checkpoint(checkpoint_path)
    cfg_bits = TrainConfig(
        input_kind=meta.get("input_kind", "raw_images"),
        seed=meta.get("seed", 0),
        tau=meta.get("tau", 0.05),
        resolution=meta["preprocess"]["resolution"],
        grayscale=meta["preprocess"].get("grayscale", True),
    )
    return _validate_model(model, meta, manifest, cfg_bits)


def train(cfg: TrainConfig, manifest: Manifest, out_dir: str | Path):
    """Run the full optimization; returns (checkpoint paths, TrainingLog).

    Deterministic for a fixed config and kernel backend: data order, pair
    draws, and initialization all derive from cfg.seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    preprocess = compute_preprocess(manifest, cfg)
    bank = _ImageBank(preprocess)
    model = Model(cfg.encoder, cfg.projection, seed=cfg.seed, input_size=cfg.resolution)
    opt = AdamW(model.params(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainingLog(config_hash=cfg.hash())

    k = cfg.batch_size
    step = 0
    checkpoints = []
    for epoch in range(1, cfg.epochs + 1):
        epoch_losses = []
        try:
            batches = list(epoch_batches(manifest, k, rng, cfg.input_kind))
        except ValueError as e:
            raise ValueError(f"epoch {epoch}: {e}") from e
        if not batches:
            raise ValueError(f"epoch {epoch}: not enough eligible persons for one batch")
        for pairs in batches:
            x = np.concatenate(
                [bank.batch([p.anchor for p in pairs]), bank.batch([p.positive for p in pairs])]
            )
            z = model.embed(x)
            loss, gz, gzh = nt_xent_loss_and_grad(z[:k], z[k:], cfg.tau, cfg.symmetric_loss)
            g = np.concatenate([gz, gzh]).astype(np.float32)
            opt.zero_grad()
            model.backward_from_embedding(g)
            opt.step()
            step += 1
            epoch_losses.append(loss)
            tlog.add_step(step, epoch, loss)

        meta = _checkpoint_meta(cfg, preprocess, epoch, None)
        val_top1 = _validate_model(model, meta, manifest, cfg, bank=bank)
        tlog.add_val(epoch, val_top1)
        meta["val_top1"] = val_top1
        ckpt_path = out_dir / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(ckpt_path, model, meta)
        checkpoints.append(ckpt_path)
        log.info(
            "epoch %d/%d: mean loss %.4f, val top-1 %.4f",
            epoch, cfg.epochs, float(np.mean(epoch_losses)), val_top1,
        )

    return checkpoints, tlog


def select_best(tlog: TrainingLog, checkpoints) -> Path:
    """Checkpoint with the highest validation metric; ties go to the
    earliest epoch."""
    if not tlog.val or not checkpoints:
        raise ValueError("no completed epochs to select from")
    by_epoch = {e: m for e, m in tlog.val}
    paths = {}
    for p in checkpoints:
        epoch = int(Path(p).stem.split("_")[1])
        paths[epoch] = Path(p)
    best_epoch = min(by_epoch, key=lambda e: (-by_epoch[e], e))
    return paths[best_epoch]
