"""Edge extraction and edge-similarity metrics.

Edge maps are the leakage channel this toolkit audits: anonymizers that
condition on edges reproduce them, so comparing edge maps of original and
anonymized images (SSIM, mean L1) quantifies how much identity-bearing
structure survives. The same maps double as model inputs for the
edge-only attack.
"""
from __future__ import annotations

import io
import json
import warnings
import zipfile
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend, imgio

DETECTORS = ("canny", "hed", "fallback_gradient")
BLUR_MODES = ("before", "after", "none")


@dataclass(frozen=True)
class EdgeImage:
    pixels: np.ndarray  # 2-D float64 in [0, 1]
    detector: str
    source_image_id: str = ""
    notes: tuple = ()

    def __post_init__(self):
        if self.detector not in DETECTORS:
            raise ValueError(f"unknown detector {self.detector!r}")


def gaussian_kernel(ksize: int, sigma: float | None = None) -> np.ndarray:
    """Sampled 1-D Gaussian; sigma defaults to 0.3*((ksize-1)*0.5 - 1) + 0.8."""
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError("ksize must be odd and positive")
    if sigma is None:
        sigma = 0.3 * ((ksize - 1) * 0.5 - 1.0) + 0.8
    x = np.arange(ksize, dtype=np.float64) - (ksize - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _as_gray01(img: np.ndarray) -> tuple[np.ndarray, tuple]:
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    notes = ()
    if img.ndim == 3:
        img = imgio.to_gray(img)
        notes = ("converted to grayscale via luma weights",)
    elif img.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-channel image, got shape {img.shape}")
    return img, notes


def sobel_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel gradients with reflect-101 borders. Returns (gx, gy)."""
    p = np.pad(img, 1, mode="reflect")
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return gx, gy


def canny_edges(
    img: np.ndarray,
    low: float = 100.0,
    high: float = 200.0,
    blur: str = "before",
    source_image_id: str = "",
) -> EdgeImage:
    """Canny detector with a 5x5 Gaussian blur, hysteresis thresholds on the
    8-bit scale.

    `blur` places the 5x5 Gaussian before detection (default, the standard
    noise-suppression order), after it (soft, no longer binary output), or
    nowhere. Deterministic.
    """
    if not (0.0 < low <= high):
        raise ValueError(f"need high >= low > 0, got low={low}, high={high}")
    if blur not in BLUR_MODES:
        raise ValueError(f"unknown blur mode {blur!r}")
    gray, notes = _as_gray01(img)
    work = gray * 255.0

    k5 = gaussian_kernel(5)
    if blur == "before":
        work = backend.sep_filter_reflect(np.ascontiguousarray(work), k5)

    gx, gy = sobel_gradients(work)
    mag = np.hypot(gx, gy)
    thin = backend.canny_nms(
        np.ascontiguousarray(mag), np.ascontiguousarray(gx), np.ascontiguousarray(gy)
    )
    strong = (thin >= high).astype(np.uint8)
    weak = (thin >= low).astype(np.uint8)
    edges = backend.hysteresis(strong, weak).astype(np.float64)

    if blur == "after":
        edges = backend.sep_filter_reflect(np.ascontiguousarray(edges), k5)
        edges = np.clip(edges, 0.0, 1.0)
        notes = notes + ("blurred after detection: soft output",)
    return EdgeImage(pixels=edges, detector="canny", source_image_id=source_image_id, notes=notes)


# ---------------------------------------------------------------------------
# Learned soft edge detector (pluggable weights) with gradient fallback
# ---------------------------------------------------------------------------

_EDGENET_FORMAT = "edgeleak-edgenet/1"


@dataclass(frozen=True)
class EdgeModel:
    """Handle for the soft edge detector.

    Either a small convolutional net loaded from a weights archive
    (detector="hed") or the built-in normalized Sobel magnitude
    (detector="fallback_gradient"). Read-only after load.
    """

    detector: str
    layers: tuple = field(default=(), compare=False)


def fallback_edge_model() -> EdgeModel:
    return EdgeModel(detector="fallback_gradient")


def save_edge_model(path: str | Path, layers) -> None:
    """Write conv-stack weights [(w, b), ...] as a zip of meta + raw floats."""
    shapes = [[list(w.shape), list(b.shape)] for w, b in layers]
    meta = {"format": _EDGENET_FORMAT, "shapes": shapes}
    buf = io.BytesIO()
    for w, b in layers:
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("meta.json", json.dumps(meta))
        zf.writestr("params.bin", buf.getvalue())


def load_edge_model(path: str | Path | None) -> EdgeModel:
    """Load learned-edge weights; path=None selects the gradient fallback."""
    if path is None:
        return fallback_edge_model()
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != _EDGENET_FORMAT:
                raise ValueError(f"unexpected format tag {meta.get('format')!r}")
            raw = zf.read("params.bin")
            layers = []
            off = 0
            for wshape, bshape in meta["shapes"]:
                wn = int(np.prod(wshape))
                bn = int(np.prod(bshape))
                w = np.frombuffer(raw, dtype="<f4", count=wn, offset=off).reshape(wshape)
                off += 4 * wn
                b = np.frombuffer(raw, dtype="<f4", count=bn, offset=off).reshape(bshape)
                off += 4 * bn
                layers.append((w.copy(), b.copy()))
            if off != len(raw):
                raise ValueError("trailing bytes in params.bin")
    except (OSError, ValueError, KeyError, json.JSONDecodeError, zipfile.BadZipFile) as e:
        raise ValueError(f"corrupt edge-model weights file {path}: {e}") from e
    return EdgeModel(detector="hed", layers=tuple(layers))


def learned_edges(img: np.ndarray, model: EdgeModel, source_image_id: str = "") -> EdgeImage:
    """Soft edge map in [0,1] from the loaded net, or normalized Sobel
    magnitude in fallback mode. Output spatial shape equals the input's."""
    gray, notes = _as_gray01(img)
    if model.detector == "fallback_gradient":
        gx, gy = sobel_gradients(gray)
        mag = np.hypot(gx, gy)
        peak = mag.max()
        pixels = mag / peak if peak > 0 else np.zeros_like(mag)
        return EdgeImage(pixels, "fallback_gradient", source_image_id, notes)

    x = gray.astype(np.float32)[None, None, :, :]
    for i, (w, b) in enumerate(model.layers):
        x = backend.conv2d_forward(np.ascontiguousarray(x), w, b, 1)
        if i < len(model.layers) - 1:
            x = np.maximum(x, 0.0)
    logits = x[0, 0].astype(np.float64)
    pixels = 1.0 / (1.0 + np.exp(-logits))
    return EdgeImage(pixels, "hed", source_image_id, notes)


# ---------------------------------------------------------------------------
# Similarity metrics
# ---------------------------------------------------------------------------

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = (0.01 * 1.0) ** 2
_SSIM_C2 = (0.03 * 1.0) ** 2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity: 11x11 Gaussian window (sigma 1.5), valid
    windows only, C1=1e-4, C2=9e-4 for unit dynamic range; mean over windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(a.shape) < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW} pixels per side")

    k = gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA)
    f = lambda im: backend.sep_filter_valid(np.ascontiguousarray(im), k)
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a * mu_a
    var_b = f(b * b) - mu_b * mu_b
    cov = f(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


def mean_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute per-pixel difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


# ---------------------------------------------------------------------------
# Edge-similarity audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeSimilarityRow:
    conditioning: frozenset
    ssim: float
    l1: float
    n_pairs: int

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")

    @property
    def label(self) -> str:
        return "+".join(sorted(self.conditioning)) if self.conditioning else "none"


def edge_similarity_report(groups: dict, detector_fn) -> list:
    """Per-conditioning mean SSIM / mean L1 between edge maps of
    (original, anonymized) pairs.

    `groups` maps a conditioning set to a list of image pairs; empty groups
    are skipped with a warning. Rows are ordered by conditioning label.
    """
    rows = []
    for cond in sorted(groups, key=lambda c: "+".join(sorted(c))):
        pairs = groups[cond]
        if not pairs:
            warnings.warn(f"skipping empty conditioning group {sorted(cond)}")
            continue
        svals, lvals = [], []
        for orig, anon in pairs:
            ea = detector_fn(orig)
            eb = detector_fn(anon)
            svals.append(ssim(ea, eb))
            lvals.append(mean_l1(ea, eb))
        rows.append(
            EdgeSimilarityRow(
                conditioning=frozenset(cond),
                ssim=float(np.mean(svals)),
                l1=float(np.mean(lvals)),
                n_pairs=len(pairs),
            )
        )
    return rows


def pairs_by_conditioning(manifest, loader=None) -> dict:
    """Group (original, anonymized) image pairs by the anonymizer's
    conditioning, following base_image_id links."""
    loader = loader or (lambda rec: imgio.load_image(rec.path))
    originals = {r.image_id: r for r in manifest.records if r.variant == "original"}
    groups = defaultdict(list)
    for r in manifest.records:
        if r.variant != "augmented" or r.base_image_id not in originals:
            continue
        orig = originals[r.base_image_id]
        groups[r.conditioning].append((loader(orig), loader(r)))
    return dict(groups)


def make_detector(kind: str, low: float = 100.0, high: float = 200.0,
                  blur: str = "before", model: EdgeModel | None = None):
    """Image -> edge-pixels callable for the report and the edges command."""
    if kind == "canny":
        return lambda img: canny_edges(img, low=low, high=high, blur=blur).pixels
    if kind in ("hed", "fallback_gradient"):
        mdl = model if model is not None else fallback_edge_model()
        return lambda img: learned_edges(img, mdl).pixels
    raise ValueError(f"unknown detector {kind!r}")


def report_to_csv(rows: list, path: str | Path) -> None:
    lines = ["conditioning,ssim,l1,n_pairs"]
    for r in rows:
        lines.append(f"{r.label},{r.ssim:.6f},{r.l1:.6f},{r.n_pairs}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
