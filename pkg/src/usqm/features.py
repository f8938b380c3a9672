"""Feature extraction: per-layer patch-token matrices and pooled descriptors.

Two extractors satisfy the same contract:

* BuiltinEncoder: a small pre-norm transformer encoder whose weights are
  drawn from a seeded generator, so extraction is a pure deterministic
  function of (pixels, seed). It stands in for a real foundation model at
  desk scale; every metric in this toolkit is backbone-agnostic.
* ExternalFeatureExtractor: serves precomputed per-layer tokens from a
  binary feature file keyed by image id, for use with real model weights
  exported offline.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import LayerIndexError, ShapeError, UsqmError
from .image import GrayImage

DEFAULT_SEED = 20240001
DEFAULT_LAYERS = (3, 5, 7, 11)

_PATCH = 16
_WIDTH = 64
_DEPTH = 12
_HEADS = 4
_MLP_RATIO = 4
_INPUT_SIDE = 224
_WEIGHT_STD = 0.25
_LN_EPS = 1e-6


@dataclass(frozen=True)
class ExtractorProfile:
    """Static shape information about an extractor."""

    num_layers: int
    grid_side: int
    channels_per_layer: tuple[int, ...]
    has_class_token: bool

    def __post_init__(self):
        if len(self.channels_per_layer) != self.num_layers:
            raise ShapeError("channels_per_layer length must equal num_layers")

    @property
    def tokens_per_layer(self) -> int:
        return self.grid_side * self.grid_side


@dataclass(frozen=True)
class TokenFeatures:
    """Per-layer token matrices (class token removed) for one 224x224 tile."""

    layers: tuple[int, ...]
    matrices: tuple[np.ndarray, ...]  # each (grid_side**2, C_l), float32
    grid_side: int

    def matrix(self, layer: int) -> np.ndarray:
        return self.matrices[self.layers.index(layer)]


@dataclass(frozen=True)
class GlobalDescriptor:
    """L2-normalized concatenation of layer-pooled token means."""

    vector: np.ndarray
    layers: tuple[int, ...]
    degenerate: bool  # pre-normalization vector was exactly zero


def _canon_layers(layers, num_layers: int) -> tuple[int, ...]:
    canon = tuple(sorted(set(int(l) for l in layers)))
    if not canon:
        raise LayerIndexError("layer set must be nonempty")
    for l in canon:
        if l < 0 or l >= num_layers:
            raise LayerIndexError(f"layer {l} outside [0, {num_layers})")
    return canon


def pooled_descriptor(feats: TokenFeatures) -> GlobalDescriptor:
    """Mean-pool each layer's tokens, concatenate, L2-normalize."""
    parts = [m.mean(axis=0) for m in feats.matrices]
    vec = np.concatenate(parts).astype(np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return GlobalDescriptor(vector=vec, layers=feats.layers, degenerate=True)
    return GlobalDescriptor(vector=vec / norm, layers=feats.layers, degenerate=False)


class BuiltinEncoder:
    """Seeded pre-norm transformer encoder over 16x16 patches of a 224x224 tile.

    12 blocks, width 64, 4 heads, GELU MLP with ratio 4, learnable class
    token and positional embeddings. All weights come from one seeded
    generator in a fixed draw order, so two encoders with the same seed
    are bit-identical. Weights are read-only after construction;
    concurrent extraction is safe.
    """

    name = "builtin-seeded"

    _CACHE_SIZE = 64

    def __init__(self, seed: int = DEFAULT_SEED):
        self.seed = int(seed)
        self._cache: dict[tuple, TokenFeatures] = {}
        self.profile = ExtractorProfile(
            num_layers=_DEPTH,
            grid_side=_INPUT_SIDE // _PATCH,
            channels_per_layer=(_WIDTH,) * _DEPTH,
            has_class_token=True,
        )
        rng = np.random.default_rng(self.seed)
        d = _WIDTH
        patch_dim = _PATCH * _PATCH
        n_tok = self.profile.tokens_per_layer + 1

        def w(*shape):
            return (rng.standard_normal(shape) * _WEIGHT_STD).astype(np.float32)

        self._patch_w = w(patch_dim, d)
        self._cls = w(1, d)
        self._pos = w(n_tok, d)
        self._blocks = []
        for _ in range(_DEPTH):
            self._blocks.append(
                {
                    "qkv": w(d, 3 * d),
                    "proj": w(d, d),
                    "mlp1": w(d, _MLP_RATIO * d),
                    "mlp2": w(_MLP_RATIO * d, d),
                }
            )

    @property
    def fingerprint(self) -> str:
        material = f"{self.name}:{self.seed}:depth={_DEPTH}:grid={self.profile.grid_side}:width={_WIDTH}:std={_WEIGHT_STD}"
        return hashlib.sha256(material.encode()).hexdigest()[:16]

    def extract(self, img224: GrayImage, layers=DEFAULT_LAYERS, image_id: str | None = None) -> TokenFeatures:
        """Run the encoder and return hidden states after each requested block.

        Layer indices are zero-based over blocks; the class token row is
        stripped from every returned matrix.
        """
        if img224.shape != (_INPUT_SIDE, _INPUT_SIDE):
            raise ShapeError(f"extractor input must be {_INPUT_SIDE}x{_INPUT_SIDE}, got {img224.shape}")
        canon = _canon_layers(layers, _DEPTH)
        g = self.profile.grid_side

        key = (hashlib.sha1(img224.data.tobytes()).digest(), canon)
        cached = self._cache.get(key)
        if cached is not None:
            return cached

        x = img224.data.astype(np.float32)
        patches = (
            x.reshape(g, _PATCH, g, _PATCH)
            .transpose(0, 2, 1, 3)
            .reshape(g * g, _PATCH * _PATCH)
        )
        tokens = patches @ self._patch_w
        tokens = np.concatenate([self._cls, tokens], axis=0) + self._pos

        wanted = set(canon)
        out: dict[int, np.ndarray] = {}
        for i, blk in enumerate(self._blocks):
            tokens = tokens + self._attention(_layer_norm(tokens), blk)
            tokens = tokens + self._mlp(_layer_norm(tokens), blk)
            if i in wanted:
                out[i] = np.ascontiguousarray(tokens[1:, :])  # strip class token
        mats = tuple(out[l] for l in canon)
        for m in mats:
            if not np.all(np.isfinite(m)):
                raise UsqmError("encoder produced non-finite features")
            m.flags.writeable = False
        result = TokenFeatures(layers=canon, matrices=mats, grid_side=g)
        if len(self._cache) >= self._CACHE_SIZE:
            try:  # concurrent extractions may race on eviction; losing is fine
                self._cache.pop(next(iter(self._cache)))
            except (StopIteration, KeyError):
                pass
        self._cache[key] = result
        return result

    def global_descriptor(self, img224: GrayImage, layers=DEFAULT_LAYERS, image_id: str | None = None) -> GlobalDescriptor:
        return pooled_descriptor(self.extract(img224, layers, image_id=image_id))

    def _attention(self, h: np.ndarray, blk: dict) -> np.ndarray:
        n, d = h.shape
        hd = d // _HEADS
        qkv = h @ blk["qkv"]
        q, k, v = np.split(qkv, 3, axis=1)
        q = q.reshape(n, _HEADS, hd).transpose(1, 0, 2)
        k = k.reshape(n, _HEADS, hd).transpose(1, 0, 2)
        v = v.reshape(n, _HEADS, hd).transpose(1, 0, 2)
        logits = q @ k.transpose(0, 2, 1) / np.float32(np.sqrt(hd))
        logits -= logits.max(axis=2, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(axis=2, keepdims=True)
        mixed = (attn @ v).transpose(1, 0, 2).reshape(n, d)
        return mixed @ blk["proj"]

    def _mlp(self, h: np.ndarray, blk: dict) -> np.ndarray:
        z = h @ blk["mlp1"]
        z = _gelu(z)
        return z @ blk["mlp2"]


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return ((x - mu) / np.sqrt(var + _LN_EPS)).astype(np.float32)


def _gelu(x: np.ndarray) -> np.ndarray:
    return (x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))).astype(np.float32)


class ExternalFeatureExtractor:
    """Serves precomputed layer tokens loaded from a feature file.

    Lookup is by image id (the id recorded at export time); pixel content
    is ignored. Tile-level ids follow the "<id>#y<row>x<col>" convention
    used by the tiling pipelines.
    """

    name = "external"

    def __init__(self, path: str):
        from .store import load_feature_file  # local import: store owns the bytes

        self.path = path
        self._by_id, self._digest = load_feature_file(path)
        if not self._by_id:
            raise UsqmError(f"{path}: feature file contains no images")
        first = next(iter(self._by_id.values()))
        if not first:
            raise UsqmError(f"{path}: first image record has no layers")
        layer_ids = sorted(first.keys())
        t = first[layer_ids[0]].shape[0]
        side = int(round(np.sqrt(t)))
        if side * side != t:
            raise ShapeError(f"{path}: token count {t} is not a square grid")
        num_layers = max(layer_ids) + 1
        channels = []
        for l in range(num_layers):
            channels.append(first[l].shape[1] if l in first else 0)
        self.profile = ExtractorProfile(
            num_layers=num_layers,
            grid_side=side,
            channels_per_layer=tuple(channels),
            has_class_token=True,
        )

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(f"{self.name}:{self._digest}".encode()).hexdigest()[:16]

    def extract(self, img224: GrayImage, layers=DEFAULT_LAYERS, image_id: str | None = None) -> TokenFeatures:
        if image_id is None:
            raise UsqmError("external extractor requires an image id")
        rec = self._by_id.get(image_id)
        if rec is None:
            raise UsqmError(f"{self.path}: no features stored for image id {image_id!r}")
        canon = _canon_layers(layers, self.profile.num_layers)
        mats = []
        for l in canon:
            if l not in rec:
                raise LayerIndexError(f"{self.path}: layer {l} missing for image id {image_id!r}")
            mats.append(rec[l])
        return TokenFeatures(layers=canon, matrices=tuple(mats), grid_side=self.profile.grid_side)

    def global_descriptor(self, img224: GrayImage, layers=DEFAULT_LAYERS, image_id: str | None = None) -> GlobalDescriptor:
        return pooled_descriptor(self.extract(img224, layers, image_id=image_id))


def tile_image_id(base: str, origin: tuple[int, int]) -> str:
    return f"{base}#y{origin[0]}x{origin[1]}"
