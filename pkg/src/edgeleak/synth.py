"""Synthetic identity dataset with controllable edge preservation.

Each person is a fixed arrangement of geometric shapes inside a generic
body silhouette; the arrangement is the identity. Every rendered image
re-randomizes appearance (background, fills, contrast polarity, small
jitter, pixel noise), so intensity statistics are nuisance and geometry is
signal. The anonymized counterpart of an image either keeps the person's
geometry (edge_preserving) or redraws the internal geometry per image
(edge_destroying) while keeping the same silhouette, mimicking the two
conditioning regimes of diffusion-based anonymizers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio
from .dataset import ImageRecord, Manifest, stable_rng

ANON_MODES = ("edge_preserving", "edge_destroying")

_KINDS = ("disk", "box", "bar", "ring")


@dataclass(frozen=True)
class SyntheticConfig:
    n_persons: int
    images_per_person: int
    image_size: int = 64
    anonymization_mode: str = "edge_preserving"
    seed: int = 0

    def __post_init__(self):
        if self.n_persons < 2:
            raise ValueError("n_persons must be >= 2")
        if self.images_per_person < 2:
            raise ValueError("images_per_person must be >= 2")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.anonymization_mode not in ANON_MODES:
            raise ValueError(f"unknown anonymization_mode {self.anonymization_mode!r}")


@dataclass(frozen=True)
class _Shape:
    kind: str
    cx: float  # all geometry in units of image size
    cy: float
    p1: float
    p2: float
    angle: float


# Canonical part slots shared by every identity. All persons carry one
# shape per slot, so identities are structurally aligned and differ only
# in part kind, offset, size, and orientation: negatives are hard, the
# way near-duplicate faces are.
_SLOTS = (
    (0.34, 0.33),
    (0.66, 0.33),
    (0.28, 0.60),
    (0.72, 0.60),
    (0.50, 0.50),
    (0.50, 0.79),
)


def _draw_layout(rng: np.random.Generator) -> list:
    """Draw one identity: one shape per canonical slot."""
    shapes = []
    for sx, sy in _SLOTS:
        kind = _KINDS[rng.integers(len(_KINDS))]
        cx = sx + rng.uniform(-0.05, 0.05)
        cy = sy + rng.uniform(-0.05, 0.05)
        angle = rng.uniform(0, np.pi)
        if kind == "disk":
            p1, p2 = rng.uniform(0.045, 0.085), 0.0
        elif kind == "box":
            p1, p2 = rng.uniform(0.04, 0.08), rng.uniform(0.04, 0.08)
        elif kind == "bar":
            p1, p2 = rng.uniform(0.07, 0.13), rng.uniform(0.010, 0.018)
        else:  # ring
            p1 = rng.uniform(0.05, 0.09)
            p2 = p1 * 0.22
        shapes.append(_Shape(kind, cx, cy, p1, p2, angle))
    return shapes


def person_layout(cfg: SyntheticConfig, person_index: int) -> list:
    return _draw_layout(stable_rng(cfg.seed, "layout", person_index))


def _shape_sdf(shape: _Shape, xs: np.ndarray, ys: np.ndarray, s: int) -> np.ndarray:
    """Signed distance (pixels, negative inside) of one shape on the grid."""
    px = xs - shape.cx * s
    py = ys - shape.cy * s
    if shape.kind == "disk":
        return np.hypot(px, py) - shape.p1 * s
    ca, sa = np.cos(shape.angle), np.sin(shape.angle)
    rx = ca * px + sa * py
    ry = -sa * px + ca * py
    if shape.kind == "box":
        qx = np.abs(rx) - shape.p1 * s
        qy = np.abs(ry) - shape.p2 * s
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        return outside + inside
    if shape.kind == "bar":
        qx = np.clip(rx, -shape.p1 * s, shape.p1 * s)
        return np.hypot(rx - qx, ry) - shape.p2 * s
    # ring
    return np.abs(np.hypot(px, py) - shape.p1 * s) - shape.p2 * s


def _alpha(d: np.ndarray, aa: float = 1.0) -> np.ndarray:
    return np.clip(0.5 - d / aa, 0.0, 1.0)


def _render(layout: list, s: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize a layout with freshly drawn appearance and jitter.

    Background clutter, fill shades, contrast polarity, photometrics, and
    noise are all re-drawn per render, so only the layout geometry carries
    identity."""
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5

    bg = rng.uniform(0.05, 0.25)
    body = rng.uniform(0.40, 0.64)
    img = np.full((s, s), bg)

    # dominant per-image background style: a discrete nuisance factor that
    # appearance-driven embeddings latch onto, uncorrelated with identity
    style = int(rng.integers(4))
    delta = rng.uniform(0.18, 0.32) * (1.0 if rng.random() < 0.5 else -1.0)
    shade = float(np.clip(bg + delta, 0.0, 1.0))
    if style < 3:
        period = rng.uniform(7.0, 13.0) * s / 64.0
        phase = rng.uniform(0, 2 * np.pi)
        coord = (ys, xs, (xs + ys) / np.sqrt(2.0))[style]
        mask = np.sin(2 * np.pi * coord / period + phase) > 0
        img = np.where(mask, shade, img)
    else:
        for _ in range(4):
            blob = _Shape("disk", rng.uniform(0, 1), rng.uniform(0, 1),
                          rng.uniform(0.12, 0.22), 0.0, 0.0)
            a = _alpha(_shape_sdf(blob, xs, ys, s))
            img = img * (1 - a) + shade * a

    # per-image background clutter, drawn before the body so it never
    # occludes the identity-bearing interior
    for _ in range(int(rng.integers(2, 5))):
        d = _Shape(
            kind=_KINDS[rng.integers(len(_KINDS))],
            cx=rng.uniform(0.0, 1.0),
            cy=rng.uniform(0.0, 1.0),
            p1=rng.uniform(0.04, 0.10),
            p2=rng.uniform(0.01, 0.08),
            angle=rng.uniform(0, np.pi),
        )
        fill = float(np.clip(bg + (1.0 if rng.random() < 0.5 else -1.0) * rng.uniform(0.3, 0.6), 0.0, 1.0))
        a = _alpha(_shape_sdf(d, xs, ys, s))
        img = img * (1 - a) + fill * a

    # generic body silhouette shared by all identities
    ax = 0.44 * s * rng.uniform(0.98, 1.02)
    ay = 0.38 * s * rng.uniform(0.98, 1.02)
    cx = 0.5 * s + rng.normal(0.0, 0.004 * s)
    cy = 0.5 * s + rng.normal(0.0, 0.004 * s)
    dn = np.hypot((xs - cx) / ax, (ys - cy) / ay)
    d_body = (dn - 1.0) * min(ax, ay)
    a = _alpha(d_body)
    img = img * (1 - a) + body * a

    def _stamp(shape):
        contrast = rng.uniform(0.35, 0.5)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        fill = float(np.clip(body + sign * contrast, 0.0, 1.0))
        a = _alpha(_shape_sdf(shape, xs, ys, s))
        return img * (1 - a) + fill * a

    # identity-like decoy parts, re-drawn per image: they make unrelated
    # renders look alike, so telling identities apart requires the
    # pair-consistent structure, not any single matching part
    decoy_rng = np.random.default_rng(rng.integers(2 ** 63))
    decoys = _draw_layout(decoy_rng)
    for shape in decoys[: int(rng.integers(1, 3))]:
        img = _stamp(shape)

    for shape in layout:
        jit = _Shape(
            kind=shape.kind,
            cx=shape.cx + rng.normal(0.0, 0.006),
            cy=shape.cy + rng.normal(0.0, 0.006),
            p1=shape.p1 * rng.uniform(0.96, 1.04),
            p2=shape.p2 * rng.uniform(0.96, 1.04),
            angle=shape.angle + rng.normal(0.0, 0.02),
        )
        img = _stamp(jit)

    # photometric nuisance: global gain/offset plus pixel noise
    img = rng.uniform(0.8, 1.2) * img + rng.uniform(-0.08, 0.08)
    img = img + rng.normal(0.0, 0.02, size=(s, s))
    return np.clip(img, 0.0, 1.0)


def render_original(cfg: SyntheticConfig, layout: list, person_index: int, i: int) -> np.ndarray:
    rng = stable_rng(cfg.seed, "img", person_index, i, "orig")
    return _render(layout, cfg.image_size, rng)


def render_augmented(cfg: SyntheticConfig, layout: list, person_index: int, i: int) -> np.ndarray:
    rng = stable_rng(cfg.seed, "img", person_index, i, "aug")
    if cfg.anonymization_mode == "edge_destroying":
        layout = _draw_layout(stable_rng(cfg.seed, "relayout", person_index, i))
    return _render(layout, cfg.image_size, rng)


def generate_synthetic_dataset(cfg: SyntheticConfig, out_dir: str | Path) -> Manifest:
    """Render the dataset to `out_dir` and write manifest.jsonl next to it.

    Deterministic: the same config yields byte-identical images and
    manifest, file by file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.anonymization_mode == "edge_preserving":
        conditioning = frozenset({"edges", "segmentation"})
        suffix = "es"
    else:
        conditioning = frozenset({"segmentation"})
        suffix = "s"

    records = []
    for p in range(cfg.n_persons):
        pid = f"p{p:04d}"
        layout = person_layout(cfg, p)
        for i in range(cfg.images_per_person):
            oid = f"{pid}_{i:02d}_orig"
            opath = out_dir / f"{oid}.png"
            imgio.save_image(opath, render_original(cfg, layout, p, i))
            records.append(
                ImageRecord(image_id=oid, person_id=pid, variant="original", path=str(opath))
            )
            aid = f"{pid}_{i:02d}_aug_{suffix}"
            apath = out_dir / f"{aid}.png"
            imgio.save_image(apath, render_augmented(cfg, layout, p, i))
            records.append(
                ImageRecord(
                    image_id=aid,
                    person_id=pid,
                    variant="augmented",
                    path=str(apath),
                    base_image_id=oid,
                    conditioning=conditioning,
                )
            )
    manifest = Manifest(records=records, seed=cfg.seed)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
