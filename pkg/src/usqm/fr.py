"""Full-reference feature-space distance and the token perceptual loss value.

The distance compares two same-size tiles through an extractor's token
matrices: a structural term built from temperature-softmaxed local token
similarity maps, plus a channel co-activation (Gram) term, summed per
layer and averaged over the layer set. The token loss is the mean squared
distance between normalized token rows, averaged over layers and sliding
windows; it is computed as a pure value (no gradients).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ParameterError, ShapeError
from .features import DEFAULT_LAYERS
from .image import DEFAULT_STRIDE, GrayImage, ensure_min_side, extract_tile, tile

DEBUG_CHECKS = os.environ.get("USQM_DEBUG", "") == "1"


@dataclass(frozen=True)
class FrConfig:
    layers: tuple[int, ...] = DEFAULT_LAYERS
    radius: int = 3
    temperature: float = 20.0
    loss_stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        if not self.layers:
            raise ParameterError("layer set must be nonempty")
        if self.radius < 0:
            raise ParameterError(f"radius must be >= 0, got {self.radius}")
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.loss_stride < 1:
            raise ParameterError(f"loss stride must be >= 1, got {self.loss_stride}")


@dataclass(frozen=True)
class LayerTerms:
    layer: int
    structural: float
    gram: float

    @property
    def total(self) -> float:
        return self.structural + self.gram


@dataclass(frozen=True)
class FrBreakdown:
    per_layer: tuple[LayerTerms, ...]
    final: float

    def to_json_dict(self) -> dict:
        return {
            "layers": [
                {"layer": t.layer, "ds": t.structural, "dg": t.gram, "d": t.total}
                for t in self.per_layer
            ],
            "final": self.final,
        }


def normalize_rows(F: np.ndarray) -> np.ndarray:
    """Unit-normalize each row; all-zero rows stay all-zero."""
    F = np.asarray(F, dtype=np.float64)
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return F / safe


@lru_cache(maxsize=32)
def _neighborhood_groups(grid_side: int, radius: int):
    """Token neighborhoods (Chebyshev balls clipped at borders), grouped by size.

    Returns a list of (token_ids, index_matrix) pairs where index_matrix has
    one row of row-major token indices per token in the group. Grouping by
    neighborhood size lets the distance batch its small matmuls.
    """
    g, r = grid_side, radius
    token_index = np.arange(g * g).reshape(g, g)
    by_size: dict[int, list[tuple[int, np.ndarray]]] = {}
    for i in range(g):
        i0, i1 = max(0, i - r), min(g - 1, i + r)
        for j in range(g):
            j0, j1 = max(0, j - r), min(g - 1, j + r)
            nbr = token_index[i0 : i1 + 1, j0 : j1 + 1].ravel()
            by_size.setdefault(nbr.size, []).append((i * g + j, nbr))
    groups = []
    for size in sorted(by_size):
        entries = by_size[size]
        qs = np.array([q for q, _ in entries])
        idx = np.stack([nbr for _, nbr in entries])
        groups.append((qs, idx))
    return groups


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def structural_distance(
    Fx: np.ndarray, Fy: np.ndarray, grid_side: int, radius: int = 3, temperature: float = 20.0
) -> float:
    """Mean absolute difference of local softmax similarity maps.

    For every token, the rows of both normalized token matrices inside its
    clipped square neighborhood are stacked and compared through row-wise
    softmax of (temperature * A A^T); per-token mean absolute differences
    (over all m*m entries) are averaged over the full grid.
    """
    Fx = np.asarray(Fx)
    Fy = np.asarray(Fy)
    if Fx.shape != Fy.shape:
        raise ShapeError(f"token matrices differ: {Fx.shape} vs {Fy.shape}")
    if Fx.shape[0] != grid_side * grid_side:
        raise ShapeError(
            f"token count {Fx.shape[0]} does not match grid {grid_side}x{grid_side}"
        )
    Fx_hat = normalize_rows(Fx)
    Fy_hat = normalize_rows(Fy)
    terms = np.empty(Fx.shape[0])
    for qs, idx in _neighborhood_groups(grid_side, radius):
        Ax = Fx_hat[idx]  # (B, m, C)
        Ay = Fy_hat[idx]
        Sx = _row_softmax(temperature * (Ax @ Ax.transpose(0, 2, 1)))
        Sy = _row_softmax(temperature * (Ay @ Ay.transpose(0, 2, 1)))
        if DEBUG_CHECKS:
            assert np.allclose(Sx.sum(axis=-1), 1.0, atol=1e-9)
            assert np.allclose(Sy.sum(axis=-1), 1.0, atol=1e-9)
        terms[qs] = np.abs(Sx - Sy).mean(axis=(1, 2))
    return float(terms.mean())


def gram_distance(Fx: np.ndarray, Fy: np.ndarray) -> float:
    """Mean absolute difference of normalized-token Gram matrices.

    Each Gram matrix is F_hat^T F_hat scaled by 1/(T*C).
    """
    Fx = np.asarray(Fx)
    Fy = np.asarray(Fy)
    if Fx.shape != Fy.shape:
        raise ShapeError(f"token matrices differ: {Fx.shape} vs {Fy.shape}")
    t, c = Fx.shape
    Gx = normalize_rows(Fx).T @ normalize_rows(Fx) / (t * c)
    Gy = normalize_rows(Fy).T @ normalize_rows(Fy) / (t * c)
    return float(np.abs(Gx - Gy).mean())


def ulpips(x: GrayImage, y: GrayImage, cfg: FrConfig, extractor) -> FrBreakdown:
    """Full-reference score between two 224x224 tiles.

    Per layer: structural + Gram term; final score is the mean of the
    per-layer sums over the configured layer set.
    """
    fx = extractor.extract(x, cfg.layers)
    fy = extractor.extract(y, cfg.layers)
    return _breakdown_from_features(fx, fy, cfg)


def _breakdown_from_features(fx, fy, cfg: FrConfig) -> FrBreakdown:
    per_layer = []
    for layer in fx.layers:
        Fx = fx.matrix(layer)
        Fy = fy.matrix(layer)
        ds = structural_distance(Fx, Fy, fx.grid_side, cfg.radius, cfg.temperature)
        dg = gram_distance(Fx, Fy)
        per_layer.append(LayerTerms(layer=layer, structural=ds, gram=dg))
    final = float(np.mean([t.total for t in per_layer]))
    return FrBreakdown(per_layer=tuple(per_layer), final=final)


def ulpips_tiled(
    x: GrayImage, y: GrayImage, cfg: FrConfig, extractor
) -> tuple[FrBreakdown, dict]:
    """Full-reference score for arbitrary same-size images.

    Images below the 224 minimum are upscaled by the short-side rule; larger
    images are scored on the 224/stride sliding grid and the per-layer terms
    averaged across windows. Returns the breakdown plus provenance about
    the preprocessing that was applied.
    """
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch: {x.shape} vs {y.shape}")
    x, resized = ensure_min_side(x)
    y, _ = ensure_min_side(y)
    grid = tile(x, 224, cfg.loss_stride)
    breakdowns = [
        _breakdown_from_features(
            extractor.extract(extract_tile(x, o, 224), cfg.layers),
            extractor.extract(extract_tile(y, o, 224), cfg.layers),
            cfg,
        )
        for o in grid.origins
    ]
    if len(breakdowns) == 1:
        merged = breakdowns[0]
    else:
        per_layer = []
        for i, layer in enumerate(breakdowns[0].per_layer):
            per_layer.append(
                LayerTerms(
                    layer=layer.layer,
                    structural=float(np.mean([b.per_layer[i].structural for b in breakdowns])),
                    gram=float(np.mean([b.per_layer[i].gram for b in breakdowns])),
                )
            )
        merged = FrBreakdown(
            per_layer=tuple(per_layer),
            final=float(np.mean([b.final for b in breakdowns])),
        )
    provenance = {"upscaled": resized, "windows": grid.num_tiles, "scored_shape": list(x.shape)}
    return merged, provenance


def token_loss(y_hat: GrayImage, y: GrayImage, cfg: FrConfig, extractor) -> float:
    """Token perceptual loss value on sliding 224x224 windows.

    Per window and layer: mean over tokens of the squared L2 distance
    between row-normalized token vectors; averaged over layers, then over
    windows. Symmetric and zero for identical inputs.
    """
    if y_hat.shape != y.shape:
        raise ShapeError(f"dimension mismatch: {y_hat.shape} vs {y.shape}")
    y_hat, _ = ensure_min_side(y_hat)
    y, _ = ensure_min_side(y)
    grid = tile(y_hat, 224, cfg.loss_stride)
    window_losses = []
    for origin in grid.origins:
        fa = extractor.extract(extract_tile(y_hat, origin, 224), cfg.layers)
        fb = extractor.extract(extract_tile(y, origin, 224), cfg.layers)
        layer_losses = []
        for layer in fa.layers:
            da = normalize_rows(fa.matrix(layer))
            db = normalize_rows(fb.matrix(layer))
            layer_losses.append(float(np.mean(np.sum((da - db) ** 2, axis=1))))
        window_losses.append(float(np.mean(layer_losses)))
    return float(np.mean(window_losses))
