"""Identity encoder, projection head, and checkpoint archive format.

The shipped encoder is a small 4-block strided convnet trained from
scratch; the point of the whole exercise is that nothing larger is needed.
Class-based backbones (resnet50_class, convnext_tiny_class, vit_class) are
adapter slots: register a factory to plug one in, none are bundled.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nn import Conv2d, GlobalAvgPool, Linear, ReLU, Sequential

ARCHITECTURES = ("tiny_conv", "resnet50_class", "convnext_tiny_class", "vit_class")

_CHECKPOINT_FORMAT = "edgeleak-checkpoint/1"


@dataclass(frozen=True)
class EncoderSpec:
    architecture: str = "tiny_conv"
    feature_dim: int = 256
    pretrained: bool = False
    in_channels: int = 1

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.in_channels <= 0:
            raise ValueError("in_channels must be positive")


@dataclass(frozen=True)
class ProjectionSpec:
    hidden_dim: int = 256
    output_dim: int = 128

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.output_dim <= 0:
            raise ValueError("projection dimensions must be positive")


def _build_tiny_conv(spec: EncoderSpec, rng: np.random.Generator) -> Sequential:
    chans = [max(4, spec.feature_dim >> s) for s in (3, 2, 1, 0)]
    layers = []
    prev = spec.in_channels
    for i, ch in enumerate(chans):
        layers.append(Conv2d(f"enc{i}", prev, ch, stride=2, rng=rng))
        layers.append(ReLU())
        prev = ch
    layers.append(GlobalAvgPool())
    return Sequential(layers)


_ENCODER_FACTORIES = {"tiny_conv": _build_tiny_conv}


def register_encoder(architecture: str, factory) -> None:
    """Plug in a backbone adapter: factory(spec, rng) -> Sequential-like."""
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}")
    _ENCODER_FACTORIES[architecture] = factory


def build_encoder(spec: EncoderSpec, rng: np.random.Generator):
    factory = _ENCODER_FACTORIES.get(spec.architecture)
    if factory is None:
        raise NotImplementedError(
            f"{spec.architecture} is an adapter slot; register a factory via "
            "register_encoder() or use tiny_conv"
        )
    return factory(spec, rng)


class Model:
    """Backbone producing features plus a two-layer projection head
    producing the embeddings the loss and the retrieval database use."""

    # small head init: adapts quickly under few optimizer steps, and the
    # loss normalizes embeddings so output scale is free
    HEAD_INIT = 0.05

    def __init__(self, encoder_spec: EncoderSpec, projection_spec: ProjectionSpec,
                 seed: int = 0, input_size: int | None = None):
        self.encoder_spec = encoder_spec
        self.projection_spec = projection_spec
        self.input_size = input_size
        rng = np.random.default_rng(seed)
        self.encoder = build_encoder(encoder_spec, rng)
        self.head = Sequential([
            Linear("proj0", encoder_spec.feature_dim, projection_spec.hidden_dim, rng,
                   weight_scale=self.HEAD_INIT),
            ReLU(),
            Linear("proj1", projection_spec.hidden_dim, projection_spec.output_dim, rng,
                   weight_scale=self.HEAD_INIT),
        ])

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != self.encoder_spec.in_channels:
            raise ValueError(
                f"expected (N, {self.encoder_spec.in_channels}, H, W) batch, got {x.shape}"
            )
        if self.input_size is not None and x.shape[2:] != (self.input_size, self.input_size):
            raise ValueError(
                f"resolution mismatch: model expects {self.input_size}, got {x.shape[2:]}"
            )
        return x

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.forward(self._check_input(x))

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward(self.features(x))

    def project(self, feats: np.ndarray) -> np.ndarray:
        feats = np.ascontiguousarray(feats, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[1] != self.encoder_spec.feature_dim:
            raise ValueError(
                f"expected (N, {self.encoder_spec.feature_dim}) features, got {feats.shape}"
            )
        return self.head.forward(feats)

    def backward_from_embedding(self, g_z: np.ndarray) -> None:
        g_f = self.head.backward(g_z)
        self.encoder.backward(g_f)

    def params(self):
        return self.encoder.params() + self.head.params()

    def state(self) -> dict:
        return {p.name: p.value.copy() for p in self.params()}

    def load_state(self, state: dict) -> None:
        for p in self.params():
            src = state[p.name]
            if src.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            p.value[...] = src


def encode(model: Model, images: np.ndarray) -> np.ndarray:
    """Backbone features for a preprocessed image batch (inference)."""
    return model.features(images)


def project(model: Model, feats: np.ndarray) -> np.ndarray:
    """Projection-head embeddings for a feature batch."""
    return model.project(feats)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def save_checkpoint(path: str | Path, model: Model, meta: dict) -> None:
    """Single-archive checkpoint: JSON metadata plus little-endian float32
    parameter tensors in a fixed order."""
    params = model.params()
    full_meta = dict(meta)
    full_meta["format"] = _CHECKPOINT_FORMAT
    full_meta["encoder"] = asdict(model.encoder_spec)
    full_meta["projection"] = asdict(model.projection_spec)
    full_meta["input_size"] = model.input_size
    full_meta["params"] = [{"name": p.name, "shape": list(p.value.shape)} for p in params]
    buf = io.BytesIO()
    for p in params:
        buf.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("meta.json", json.dumps(full_meta, indent=1, sort_keys=True))
        zf.writestr("params.bin", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            raw = zf.read("params.bin")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise ValueError(f"corrupt checkpoint {path}: {e}") from e
    if meta.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"corrupt checkpoint {path}: bad format tag")
    enc = EncoderSpec(**meta["encoder"])
    proj = ProjectionSpec(**meta["projection"])
    model = Model(enc, proj, seed=0, input_size=meta.get("input_size"))
    state = {}
    off = 0
    for entry in meta["params"]:
        n = int(np.prod(entry["shape"]))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(entry["shape"])
        state[entry["name"]] = arr.copy()
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"corrupt checkpoint {path}: parameter payload size mismatch")
    model.load_state(state)
    return model, meta
