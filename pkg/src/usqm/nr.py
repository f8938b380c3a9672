"""No-reference quality scoring against a clean-appearance model.

Clean patch descriptors (pooled extractor features of 224x224 tiles) are
projected into a shared PCA space and modeled per organ by a diagonal-
covariance Gaussian mixture fitted with EM. A test image is tiled the
same way; each patch is scored by log-likelihood under its organ's model
(or a uniform mixture over all organ models when the organ is unknown),
and the image score is the mean of the lowest-scoring patches so that
small localized failures dominate. Higher scores mean better quality.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FingerprintMismatchError,
    InsufficientDataError,
    ParameterError,
    UnknownOrganError,
)
from .features import DEFAULT_LAYERS
from .image import DEFAULT_STRIDE, DEFAULT_TILE, GrayImage, ensure_min_side, extract_tile, tile

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 200
EM_RESTARTS = 10
BANK_VERSION = "usqm-bank/1"
WORST_FRACTION = 0.15


@dataclass(frozen=True)
class NrqConfig:
    layers: tuple[int, ...] = DEFAULT_LAYERS
    tile_size: int = DEFAULT_TILE
    stride: int = DEFAULT_STRIDE
    pca_dim: int = 128
    components: int = 4
    seed: int = 0
    worst_fraction: float = WORST_FRACTION
    fingerprint_policy: str = "error"  # or "warn"

    def __post_init__(self):
        if self.pca_dim < 1:
            raise ParameterError(f"pca dim must be >= 1, got {self.pca_dim}")
        if self.components < 1:
            raise ParameterError(f"component count must be >= 1, got {self.components}")
        if not 0 < self.worst_fraction <= 1:
            raise ParameterError(f"worst fraction must be in (0,1], got {self.worst_fraction}")
        if self.fingerprint_policy not in ("error", "warn"):
            raise ParameterError(f"unknown fingerprint policy {self.fingerprint_policy!r}")


@dataclass(frozen=True)
class PcaModel:
    """Linear projection onto the top principal axes of the fit pool."""

    mean: np.ndarray  # (D,)
    components: np.ndarray  # (d, D), rows orthonormal
    variances: np.ndarray  # (d,), nonincreasing

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]

    def project(self, X: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(X) - self.mean) @ self.components.T

    def back_project(self, P: np.ndarray) -> np.ndarray:
        return np.atleast_2d(P) @ self.components + self.mean


@dataclass(frozen=True)
class DiagGmm:
    """Diagonal-covariance Gaussian mixture."""

    weights: np.ndarray  # (K,), sums to 1
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d), each >= VARIANCE_FLOOR
    loglik_trace: tuple[float, ...] = field(default=(), compare=False, repr=False)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class OrganModelBank:
    """Shared PCA basis plus one mixture model per organ."""

    pca: PcaModel
    organs: dict[str, DiagGmm]
    extractor_fingerprint: str
    layers: tuple[int, ...]
    tile_size: int
    stride: int
    version: str = BANK_VERSION
    created_at: int = 0
    config_hash: str = ""

    @property
    def organ_names(self) -> tuple[str, ...]:
        return tuple(self.organs.keys())


@dataclass(frozen=True)
class NrqResult:
    scores: tuple[float, ...]
    worst_indices: tuple[int, ...]
    kappa: int
    final: float
    origins: tuple[tuple[int, int], ...]
    organ: str | None

    def to_json_dict(self) -> dict:
        return {
            "final": self.final,
            "kappa": self.kappa,
            "num_patches": len(self.scores),
            "organ": self.organ,
            "worst": [
                {"row": self.origins[i][0], "col": self.origins[i][1], "score": self.scores[i]}
                for i in self.worst_indices
            ],
            "scores": list(self.scores),
        }


@dataclass(frozen=True)
class OrganFitInfo:
    organ: str
    patch_count: int
    em_iterations: int
    final_loglik: float


@dataclass(frozen=True)
class FitReport:
    organ_info: tuple[OrganFitInfo, ...]
    excluded: tuple[tuple[str, str], ...]  # (organ, reason)
    total_patches: int


def fit_pca(descriptors: np.ndarray, d: int) -> PcaModel:
    """Top-d principal axes of the sample covariance (ddof=1).

    Component signs are fixed so the largest-magnitude entry of each row
    is positive, making refits bit-reproducible.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ParameterError(f"descriptor matrix must be 2-D, got shape {X.shape}")
    n, dim = X.shape
    if d < 1 or d > dim:
        raise ParameterError(f"pca dim {d} outside [1, {dim}]")
    if n < d:
        raise InsufficientDataError(f"need at least {d} samples to fit {d} axes, got {n}")
    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:d]
    flip = np.sign(comps[np.arange(d), np.argmax(np.abs(comps), axis=1)])
    flip[flip == 0] = 1.0
    comps = comps * flip[:, None]
    variances = (s[:d] ** 2) / max(n - 1, 1)
    return PcaModel(mean=mean, components=comps, variances=variances)


def _log_density_matrix(gmm: DiagGmm, X: np.ndarray) -> np.ndarray:
    """Per-sample, per-component log densities including mixture weights: (N, K)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    diff = X[:, None, :] - gmm.means[None, :, :]  # (N, K, d)
    quad = np.sum(diff * diff / gmm.variances[None, :, :], axis=2)
    log_norm = np.sum(np.log(2.0 * np.pi * gmm.variances), axis=1)  # (K,)
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    return log_w[None, :] - 0.5 * (log_norm[None, :] + quad)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def log_density(gmm: DiagGmm, v: np.ndarray) -> float:
    """Log-likelihood of one vector under the mixture (stable log-sum-exp)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (gmm.dim,):
        raise ParameterError(f"vector has shape {v.shape}, model dim is {gmm.dim}")
    return float(_logsumexp(_log_density_matrix(gmm, v[None, :]), axis=1)[0])


def log_density_batch(gmm: DiagGmm, X: np.ndarray) -> np.ndarray:
    return _logsumexp(_log_density_matrix(gmm, X), axis=1)


def _kmeanspp_centers(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((X - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(n)])
            continue
        probs = d2 / total
        centers.append(X[rng.choice(n, p=probs)])
    return np.stack(centers)


def _init_from_centers(X: np.ndarray, centers: np.ndarray) -> DiagGmm:
    n, d = X.shape
    k = centers.shape[0]
    dist = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    assign = np.argmin(dist, axis=1)
    weights = np.zeros(k)
    means = np.array(centers, dtype=np.float64)
    variances = np.empty((k, d))
    global_var = np.maximum(X.var(axis=0), VARIANCE_FLOOR)
    for j in range(k):
        members = X[assign == j]
        weights[j] = max(len(members), 1)
        if len(members) >= 1:
            means[j] = members.mean(axis=0)
        if len(members) >= 2:
            variances[j] = np.maximum(members.var(axis=0), VARIANCE_FLOOR)
        else:
            variances[j] = global_var
    weights /= weights.sum()
    return DiagGmm(weights=weights, means=means, variances=variances)


def _em_run(X: np.ndarray, init: DiagGmm) -> tuple[DiagGmm, list[float]]:
    n, _ = X.shape
    weights = init.weights.copy()
    means = init.means.copy()
    variances = init.variances.copy()
    trace: list[float] = []
    prev = -np.inf
    for _ in range(EM_MAX_ITER):
        gmm = DiagGmm(weights=weights, means=means, variances=variances)
        joint = _log_density_matrix(gmm, X)  # (N, K)
        per_sample = _logsumexp(joint, axis=1)
        mean_ll = float(per_sample.mean())
        trace.append(mean_ll)
        if np.isfinite(prev) and abs(mean_ll - prev) < EM_TOL:
            break
        prev = mean_ll

        resp = np.exp(joint - per_sample[:, None])
        nk = resp.sum(axis=0)  # (K,)
        empty = np.where(nk < 1e-10)[0]
        safe_nk = np.maximum(nk, 1e-10)
        weights = nk / n
        means = (resp.T @ X) / safe_nk[:, None]
        sq = (resp.T @ (X * X)) / safe_nk[:, None]
        variances = np.maximum(sq - means**2, VARIANCE_FLOOR)
        if empty.size:
            worst = int(np.argmin(per_sample))
            global_var = np.maximum(X.var(axis=0), VARIANCE_FLOOR)
            for j in empty:
                log.warning(
                    "EM component %d collapsed; reseeding from lowest-likelihood point", j
                )
                means[j] = X[worst]
                variances[j] = global_var
                weights[j] = 1.0 / n
        weights = weights / weights.sum()
    final = DiagGmm(
        weights=weights, means=means, variances=variances, loglik_trace=tuple(trace)
    )
    return final, trace


def fit_gmm(projected: np.ndarray, K: int, seed) -> DiagGmm:
    """EM fit with seeded k-means++ initialization.

    Runs EM_RESTARTS independent inits and keeps the fit with the best
    final mean log-likelihood. Convergence: mean log-likelihood gain
    below EM_TOL or EM_MAX_ITER iterations. Collapsed components are
    reseeded from the lowest-likelihood point and logged.
    """
    X = np.asarray(projected, dtype=np.float64)
    if X.ndim != 2:
        raise ParameterError(f"projected matrix must be 2-D, got shape {X.shape}")
    n = X.shape[0]
    if K < 1:
        raise ParameterError(f"component count must be >= 1, got {K}")
    if n < K:
        raise InsufficientDataError(f"need at least {K} samples for {K} components, got {n}")
    rng = np.random.default_rng(seed)
    best: DiagGmm | None = None
    best_ll = -np.inf
    for _ in range(EM_RESTARTS):
        init = _init_from_centers(X, _kmeanspp_centers(X, K, rng))
        fit, trace = _em_run(X, init)
        if trace[-1] > best_ll:
            best, best_ll = fit, trace[-1]
    assert best is not None
    return best


def image_descriptors(img: GrayImage, extractor, cfg: NrqConfig, image_id: str | None = None):
    """Tile an image (after the minimum-side rule) and pool per-tile features.

    Returns (descriptor matrix N x D, tile origins).
    """
    from .features import tile_image_id

    img, _ = ensure_min_side(img, cfg.tile_size)
    grid = tile(img, cfg.tile_size, cfg.stride)
    rows = []
    for origin in grid.origins:
        patch = extract_tile(img, origin, cfg.tile_size)
        tid = tile_image_id(image_id, origin) if image_id is not None else None
        desc = extractor.global_descriptor(patch, cfg.layers, image_id=tid)
        rows.append(desc.vector)
    return np.stack(rows), grid.origins


def fit_bank(
    clean_images, extractor, cfg: NrqConfig, config_hash: str = "", created_at: int = 0
) -> tuple[OrganModelBank, FitReport]:
    """Fit the shared PCA and one mixture per organ from clean images.

    clean_images yields (image, organ) or (image, organ, image_id) tuples.
    The PCA pool is the union of all organs' patch descriptors; organs
    with fewer patches than mixture components are excluded and listed in
    the fit report.
    """
    per_organ: dict[str, list[np.ndarray]] = {}
    for entry in clean_images:
        img, organ = entry[0], entry[1]
        image_id = entry[2] if len(entry) > 2 else None
        descs, _ = image_descriptors(img, extractor, cfg, image_id=image_id)
        per_organ.setdefault(str(organ), []).append(descs)

    if not per_organ:
        raise InsufficientDataError("manifest produced no images")
    stacks = {o: np.concatenate(mats) for o, mats in sorted(per_organ.items())}
    pool = np.concatenate(list(stacks.values()))
    if pool.shape[0] < cfg.pca_dim:
        raise InsufficientDataError(
            f"{pool.shape[0]} clean patches cannot support pca dim {cfg.pca_dim}"
        )
    pca = fit_pca(pool, cfg.pca_dim)

    organs: dict[str, DiagGmm] = {}
    info = []
    excluded = []
    for idx, (organ, descs) in enumerate(stacks.items()):
        if descs.shape[0] < cfg.components:
            excluded.append(
                (organ, f"{descs.shape[0]} patches < {cfg.components} components")
            )
            continue
        projected = pca.project(descs)
        gmm = fit_gmm(projected, cfg.components, seed=[cfg.seed, idx])
        organs[organ] = gmm
        info.append(
            OrganFitInfo(
                organ=organ,
                patch_count=descs.shape[0],
                em_iterations=len(gmm.loglik_trace),
                final_loglik=gmm.loglik_trace[-1],
            )
        )
    if not organs:
        raise InsufficientDataError(
            "no organ had enough patches: " + "; ".join(f"{o} ({r})" for o, r in excluded)
        )
    bank = OrganModelBank(
        pca=pca,
        organs=organs,
        extractor_fingerprint=extractor.fingerprint,
        layers=cfg.layers,
        tile_size=cfg.tile_size,
        stride=cfg.stride,
        created_at=created_at,
        config_hash=config_hash,
    )
    report = FitReport(
        organ_info=tuple(info), excluded=tuple(excluded), total_patches=pool.shape[0]
    )
    return bank, report


def worst_kappa(n_patches: int, fraction: float = WORST_FRACTION) -> int:
    """Number of worst patches entering the final mean: max(1, round(f*N)).

    round() is half-away-from-zero.
    """
    return max(1, int(math.floor(fraction * n_patches + 0.5)))


def aggregate_worst(scores: np.ndarray, kappa: int) -> tuple[tuple[int, ...], float]:
    """Indices of the kappa smallest scores (ties: lower index wins) and their mean."""
    order = np.lexsort((np.arange(len(scores)), scores))
    worst = tuple(int(i) for i in order[:kappa])
    return worst, float(np.mean(scores[list(worst)]))


def patch_scores(bank: OrganModelBank, projected: np.ndarray, organ: str | None) -> np.ndarray:
    """Per-patch log-likelihoods under the organ model or the uniform mixture."""
    if organ is not None:
        if organ not in bank.organs:
            raise UnknownOrganError(
                f"organ {organ!r} not in bank (has: {', '.join(bank.organ_names)})"
            )
        return log_density_batch(bank.organs[organ], projected)
    per_organ = np.stack(
        [log_density_batch(g, projected) for g in bank.organs.values()], axis=1
    )
    return _logsumexp(per_organ, axis=1) - np.log(len(bank.organs))


def check_fingerprint(bank: OrganModelBank, extractor, policy: str = "error") -> None:
    if extractor.fingerprint == bank.extractor_fingerprint:
        return
    msg = (
        f"extractor fingerprint {extractor.fingerprint} does not match "
        f"bank fingerprint {bank.extractor_fingerprint}"
    )
    if policy == "warn":
        log.warning("%s; scores are not comparable across feature spaces", msg)
    else:
        raise FingerprintMismatchError(msg)


def nrq_score(
    img: GrayImage,
    bank: OrganModelBank,
    organ: str | None,
    extractor,
    worst_fraction: float = WORST_FRACTION,
    fingerprint_policy: str = "error",
    image_id: str | None = None,
) -> NrqResult:
    """Score one image against the bank; higher is better quality."""
    check_fingerprint(bank, extractor, fingerprint_policy)
    cfg = NrqConfig(
        layers=bank.layers,
        tile_size=bank.tile_size,
        stride=bank.stride,
        pca_dim=bank.pca.output_dim,
        components=next(iter(bank.organs.values())).n_components,
        fingerprint_policy=fingerprint_policy,
    )
    descs, origins = image_descriptors(img, extractor, cfg, image_id=image_id)
    projected = bank.pca.project(descs)
    scores = patch_scores(bank, projected, organ)
    kappa = worst_kappa(len(scores), worst_fraction)
    worst, final = aggregate_worst(scores, kappa)
    return NrqResult(
        scores=tuple(float(s) for s in scores),
        worst_indices=worst,
        kappa=kappa,
        final=final,
        origins=tuple(origins),
        organ=organ,
    )
