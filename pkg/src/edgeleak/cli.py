"""Command-line entry point.

Subcommands cover the whole pipeline: synth -> split -> (edges) -> train
-> embed/eval -> edge-sim. Every run drops a resolved-config snapshot
(arguments, input hashes, kernel backend) next to its outputs so results
can be reproduced from the snapshot alone.

Exit codes: 0 success, 1 precondition or validation failure, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, backend, edgeops, imgio, retrieval, synth, trainer
from .dataset import ImageRecord, Manifest, assign_splits, build_manifest
from .models import EncoderSpec, ProjectionSpec, load_checkpoint

log = logging.getLogger("edgeleak")

HED_WEIGHTS_ENV = "EDGELEAK_HED_WEIGHTS"


def _file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_snapshot(target: Path, command: str, args: argparse.Namespace, inputs: dict) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "backend": backend.active_backend(),
        "args": {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()
                 if k != "func"},
        "input_hashes": {k: _file_hash(v) for k, v in inputs.items() if Path(v).is_file()},
    }
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _parse_ratios(text: str) -> tuple:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ValueError("ratios must be three comma-separated fractions")
    return tuple(parts)


def _parse_ks(text: str) -> list:
    return [int(x) for x in text.split(",")]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = synth.SyntheticConfig(
        n_persons=args.persons,
        images_per_person=args.per_person,
        image_size=args.size,
        anonymization_mode=args.mode,
        seed=args.seed,
    )
    manifest = synth.generate_synthetic_dataset(cfg, args.out)
    _write_snapshot(Path(args.out) / "run_config.json", "synth", args, {})
    print(f"wrote {len(manifest)} records to {args.out} (manifest.jsonl)")
    print(f"manifest hash: {manifest.content_hash()}")
    return 0


def cmd_split(args) -> int:
    manifest = Manifest.load(args.manifest)
    out = assign_splits(manifest, _parse_ratios(args.ratios), mode=args.mode, seed=args.seed)
    if args.mode == "person_disjoint":
        per = {}
        for r in out.records:
            per.setdefault(r.person_id, set()).add(r.split)
        bad = [p for p, s in per.items() if len(s) != 1]
        if bad:  # defensive: assign_splits guarantees this
            raise ValueError(f"person-disjointness violated for {bad[:3]}")
    out.save(args.out)
    _write_snapshot(Path(args.out).with_suffix(".run_config.json"), "split", args,
                    {"manifest": args.manifest})
    counts = {s: len({r.person_id for r in out.records if r.split == s})
              for s in ("train", "val", "test")}
    print(f"split persons: {counts}")
    return 0


def _load_detector(args):
    if args.detector == "canny":
        return "canny", edgeops.make_detector("canny", low=args.low, high=args.high,
                                              blur=args.blur)
    weights = args.weights or os.environ.get(HED_WEIGHTS_ENV)
    if weights:
        model = edgeops.load_edge_model(weights)
        return "hed", edgeops.make_detector("hed", model=model)
    log.warning("no learned-edge weights supplied (flag --weights or $%s); "
                "falling back to normalized gradient magnitude", HED_WEIGHTS_ENV)
    return "fallback_gradient", edgeops.make_detector("fallback_gradient")


def cmd_edges(args) -> int:
    manifest = Manifest.load(args.manifest)
    label, detector = _load_detector(args)
    variants = args.variants.split(",")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    new_records = []
    for r in manifest.records:
        if r.variant not in variants:
            continue
        img = imgio.load_image(r.path)
        pixels = detector(img)
        eid = f"{r.image_id}__edge"
        path = out_dir / f"{eid}.png"
        imgio.save_image(path, pixels)
        new_records.append(
            ImageRecord(
                image_id=eid,
                person_id=r.person_id,
                variant="edge_original" if r.variant == "original" else "edge_augmented",
                path=str(path),
                base_image_id=r.base_image_id if r.variant == "augmented" else None,
                conditioning=r.conditioning,
                split=r.split,
            )
        )
    if not new_records:
        raise ValueError(f"no records with variant in {variants}")
    merged = Manifest(records=manifest.records + new_records,
                      split_mode=manifest.split_mode, seed=manifest.seed)
    merged.save(args.manifest_out)
    _write_snapshot(out_dir / "run_config.json", "edges", args, {"manifest": args.manifest})
    print(f"detector={label}: appended {len(new_records)} edge records -> {args.manifest_out}")
    return 0


def _train_config(args) -> trainer.TrainConfig:
    if args.config:
        cfg = trainer.TrainConfig.from_json(Path(args.config).read_text())
    else:
        cfg = trainer.TrainConfig()
    overrides = {}
    for name, key in (
        ("batch_size", "batch_size"), ("tau", "tau"), ("lr", "learning_rate"),
        ("weight_decay", "weight_decay"), ("epochs", "epochs"), ("seed", "seed"),
        ("input_kind", "input_kind"), ("resolution", "resolution"),
    ):
        v = getattr(args, name)
        if v is not None:
            overrides[key] = v
    if args.asymmetric:
        overrides["symmetric_loss"] = False
    if args.feature_dim is not None or args.in_channels is not None:
        enc = cfg.encoder
        overrides["encoder"] = EncoderSpec(
            architecture=enc.architecture,
            feature_dim=args.feature_dim or enc.feature_dim,
            pretrained=enc.pretrained,
            in_channels=args.in_channels or enc.in_channels,
        )
    if args.embedding_dim is not None:
        overrides["projection"] = ProjectionSpec(
            hidden_dim=cfg.projection.hidden_dim, output_dim=args.embedding_dim
        )
    return replace(cfg, **overrides) if overrides else cfg


def cmd_train(args) -> int:
    manifest = Manifest.load(args.manifest)
    cfg = _train_config(args)
    out_dir = Path(args.out)
    checkpoints, tlog = trainer.train(cfg, manifest, out_dir)
    tlog.to_csv(out_dir / "training_log.csv")
    best = trainer.select_best(tlog, checkpoints)
    shutil.copyfile(best, out_dir / "best.ckpt")
    (out_dir / "train_config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    _write_snapshot(out_dir / "run_config.json", "train", args, {"manifest": args.manifest})
    if args.plot:
        _plot_losses(tlog, out_dir / "loss_curve.png")
    best_val = max(m for _, m in tlog.val)
    print(f"trained {cfg.epochs} epochs; best val top-1 {best_val:.4f} ({best.name} -> best.ckpt)")
    return 0


def cmd_embed(args) -> int:
    manifest = Manifest.load(args.manifest)
    model, meta = load_checkpoint(args.checkpoint)
    records = manifest.select(split=args.split, variant=args.variant)
    if not records:
        raise ValueError(f"no records match split={args.split} variant={args.variant}")
    records = sorted(records, key=lambda r: r.image_id)
    db = retrieval.build_database(model, meta, records, source=args.source)
    retrieval.save_embeddings(args.out, db, checkpoint_hash=_file_hash(args.checkpoint)[:16])
    _write_snapshot(Path(str(args.out) + ".run_config.json"), "embed", args,
                    {"manifest": args.manifest, "checkpoint": args.checkpoint})
    print(f"embedded {len(db)} images (D={db.matrix.shape[1]}, source={db.source}) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = Manifest.load(args.manifest)
    model, meta = load_checkpoint(args.checkpoint)
    input_kind = args.input_kind or meta.get("input_kind", "raw_images")
    refs = retrieval.select_references(
        manifest, args.protocol, seed=args.seed,
        variant=retrieval.reference_variant(input_kind), split=args.split,
    )
    queries = retrieval.select_queries(manifest, input_kind, split=args.split)
    ref_persons = {r.person_id for r in refs}
    queries = [q for q in queries if q.person_id in ref_persons]
    if not queries:
        raise ValueError("no query images for evaluation")
    db = retrieval.build_database(model, meta, refs, source=args.source)
    q_emb = retrieval.embed_records(model, meta, queries, source=args.source)
    report = retrieval.evaluate_protocol(
        db, list(zip(queries, q_emb)), ks=_parse_ks(args.k),
        protocol=args.protocol, seed=args.seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(
            "\n".join([retrieval.CSV_HEADER] + report.csv_rows()) + "\n", encoding="utf-8"
        )
    _write_snapshot(Path(str(out) + ".run_config.json"), "eval", args,
                    {"manifest": args.manifest, "checkpoint": args.checkpoint})
    if args.plot:
        _plot_topk(report, Path(str(out) + ".png"))
    for k in sorted(report.topk_accuracy):
        print(f"{args.protocol} top-{k}: {report.topk_accuracy[k]:.4f} "
              f"(db={report.db_size}, persons={report.n_persons})")
    return 0


def cmd_edge_sim(args) -> int:
    manifest = Manifest.load(args.manifest)
    _, detector = _load_detector(args)
    groups = edgeops.pairs_by_conditioning(manifest)
    if args.groups:
        wanted = []
        for g in args.groups.split(","):
            wanted.append(frozenset() if g == "none" else frozenset(g.split("+")))
        groups = {c: groups.get(c, []) for c in wanted}
    rows = edgeops.edge_similarity_report(groups, detector)
    if not rows:
        raise ValueError("no conditioning groups with pairs to compare")
    edgeops.report_to_csv(rows, args.out)
    _write_snapshot(Path(str(args.out) + ".run_config.json"), "edge-sim", args,
                    {"manifest": args.manifest})
    for r in rows:
        print(f"{r.label}: ssim={r.ssim:.4f} l1={r.l1:.4f} n={r.n_pairs}")
    return 0


def cmd_baseline(args) -> int:
    manifest = Manifest.load(args.manifest)
    input_kind = args.input_kind or "raw_images"
    variant = retrieval.reference_variant(input_kind)
    ks = _parse_ks(args.k)
    values = {}
    for k in ks:
        if args.protocol == "single_ref":
            n = len({r.person_id for r in manifest.select(split=args.split, variant=variant)})
            values[k] = retrieval.random_baseline("single_ref", k, n_persons=n)
        else:
            counts = retrieval.manifest_ref_counts(
                manifest, args.protocol, seed=args.seed, variant=variant, split=args.split
            )
            values[k] = retrieval.random_baseline(args.protocol, k, ref_counts=counts)
    for k in ks:
        print(f"{args.protocol} random top-{k}: {values[k]:.6f}")
    return 0


def _plot_losses(tlog, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [s for s, _, _, _ in tlog.steps]
    losses = [l for _, _, l, _ in tlog.steps]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_topk(report, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted(report.topk_accuracy)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, [report.topk_accuracy[k] for k in ks], marker="o")
    ax.set_xlabel("k")
    ax.set_ylabel("top-k accuracy")
    ax.set_ylim(0, 1)
    ax.set_title(report.protocol)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgeleak", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"edgeleak {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic identity dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--persons", type=int, required=True)
    s.add_argument("--per-person", type=int, required=True, dest="per_person")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--mode", choices=synth.ANON_MODES, default="edge_preserving")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="assign train/val/test splits")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratios", default="0.7,0.15,0.15")
    s.add_argument("--mode", choices=("person_disjoint", "person_overlapping"),
                   default="person_disjoint")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("edges", help="derive edge-image variants")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest-out", required=True, dest="manifest_out")
    s.add_argument("--detector", choices=("canny", "hed"), default="canny")
    s.add_argument("--low", type=float, default=100.0)
    s.add_argument("--high", type=float, default=200.0)
    s.add_argument("--blur", choices=edgeops.BLUR_MODES, default="before")
    s.add_argument("--weights", default=None, help=f"learned-edge weights (or ${HED_WEIGHTS_ENV})")
    s.add_argument("--variants", default="original,augmented")
    s.set_defaults(func=cmd_edges)

    s = sub.add_parser("train", help="train the identity encoder")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="TrainConfig JSON file")
    s.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--weight-decay", type=float, default=None, dest="weight_decay")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--input-kind", choices=("raw_images", "edge_images"), default=None,
                   dest="input_kind")
    s.add_argument("--resolution", type=int, default=None)
    s.add_argument("--feature-dim", type=int, default=None, dest="feature_dim")
    s.add_argument("--embedding-dim", type=int, default=None, dest="embedding_dim")
    s.add_argument("--in-channels", type=int, default=None, dest="in_channels")
    s.add_argument("--asymmetric", action="store_true", help="z-anchored loss only")
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="embed records into a database file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--variant", default="original")
    s.add_argument("--source", choices=retrieval.EMBEDDING_SOURCES, default="projection")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("eval", help="run a retrieval protocol")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="report JSON path")
    s.add_argument("--csv", default=None)
    s.add_argument("--protocol", choices=retrieval.PROTOCOLS, default="full_ref")
    s.add_argument("--k", default="1,5,10")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="test")
    s.add_argument("--source", choices=retrieval.EMBEDDING_SOURCES, default="projection")
    s.add_argument("--input-kind", choices=("raw_images", "edge_images"), default=None,
                   dest="input_kind")
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("edge-sim", help="edge-similarity audit (SSIM / mean L1)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--detector", choices=("canny", "hed"), default="canny")
    s.add_argument("--low", type=float, default=100.0)
    s.add_argument("--high", type=float, default=200.0)
    s.add_argument("--blur", choices=edgeops.BLUR_MODES, default="before")
    s.add_argument("--weights", default=None)
    s.add_argument("--groups", default=None,
                   help="comma list of conditioning groups, e.g. depth+edges,segmentation")
    s.set_defaults(func=cmd_edge_sim)

    s = sub.add_parser("baseline", help="analytic random-guessing baseline")
    s.add_argument("--manifest", required=True)
    s.add_argument("--protocol", choices=retrieval.PROTOCOLS, default="single_ref")
    s.add_argument("--k", default="1,10")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="test")
    s.add_argument("--input-kind", choices=("raw_images", "edge_images"), default=None,
                   dest="input_kind")
    s.set_defaults(func=cmd_baseline)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
