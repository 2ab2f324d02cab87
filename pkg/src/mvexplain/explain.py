"""Model-agnostic attribution for one-view explainer heads.

Every method treats the classifier as a cooperative game over image segments:
a coalition ``z`` (binary, length S) keeps the pixels of segments with
``z_s = 1`` and replaces the rest by a baseline colour, and the game value is
the classifier's probability for the target class. The solvers themselves
work on plain value functions ``v(Z) -> values`` over a batch of coalitions,
so they can be checked against constructed games directly.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from PIL import Image
from torch import nn

from .arch import MultiViewModel, scope_of_view, scope_views, softmax
from .backbone import FeatureExtractor, freeze, to_tensor
from .core import Dataset, MultiViewSchema, Sample, to_uint8
from .train import TrainConfig, train_heads

log = logging.getLogger(__name__)

METHODS = ("lime", "kernel_shap", "exact_shapley")
MAX_EXACT_SEGMENTS = 12
MAX_ENUMERATION_SEGMENTS = 25
ORANGE = np.array([255, 140, 0], dtype=float)

ValueFn = Callable[[np.ndarray], np.ndarray]


class ExplainError(ValueError):
    pass


@dataclass
class SegmentMask:
    labels: np.ndarray  # (H, W) int segment id per pixel
    num_segments: int

    def indicator(self, coalition) -> np.ndarray:
        """(H, W) bool: pixels kept by ``coalition``."""
        return np.asarray(coalition, bool)[self.labels]


@dataclass
class AttributionMap:
    per_segment: np.ndarray
    per_pixel: np.ndarray
    view_index: int
    target_class: int
    method: str
    base_value: float = float("nan")
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_segments(cls, scores, mask: SegmentMask, view_index: int, target_class: int, method: str,
                      base_value: float = float("nan")) -> "AttributionMap":
        scores = np.asarray(scores, dtype=float)
        return cls(scores, scores[mask.labels], view_index, target_class, method, base_value)

    def save(self, path_stem) -> None:
        """``<stem>.npy`` holds the per-pixel grid, ``<stem>.json`` the per-segment scores."""
        stem = Path(path_stem)
        np.save(stem.with_suffix(".npy"), self.per_pixel)
        meta = {
            "view_index": self.view_index,
            "target_class": self.target_class,
            "method": self.method,
            "base_value": self.base_value,
            "per_segment": [float(x) for x in self.per_segment],
        }
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


# ------------------------------------------------------------- segmentation

def _grid_shape(n: int, height: int, width: int) -> tuple[int, int]:
    best = (1, n)
    target = math.log(height / width)
    for r in range(1, n + 1):
        if n % r == 0:
            c = n // r
            if abs(math.log(r / c) - target) < abs(math.log(best[0] / best[1]) - target):
                best = (r, c)
    return best


def _edges(length: int, parts: int, jitter: float, rng: np.random.Generator) -> np.ndarray:
    edges = np.linspace(0, length, parts + 1)
    if jitter > 0 and parts > 1:
        step = length / parts
        edges[1:-1] += rng.uniform(-jitter, jitter, parts - 1) * step
    edges = np.rint(edges).astype(int)
    return np.maximum.accumulate(np.clip(edges, 0, length))


def segment(image, n_segments: int = 40, compactness: float = 0.15, n_iter: int = 10,
            jitter: float = 0.0, seed: int = 0) -> SegmentMask:
    """Grid superpixels whose boundaries are snapped toward intensity edges.

    Start from an (rows x cols) grid with rows * cols == n_segments, then for
    ``n_iter`` rounds let every pixel move to a 4-neighbour's segment if that
    lowers squared colour distance to the segment mean plus ``compactness**2``
    times the squared spatial distance (in grid-step units) to the segment centroid. Ties keep the
    current segment and no segment is allowed to vanish. ``jitter`` (fraction of
    a grid step, drawn from ``seed``) perturbs the initial grid lines.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W, C = img.shape
    if not 1 <= n_segments <= H * W:
        raise ValueError("n_segments must lie in [1, H*W]")
    rng = np.random.default_rng(seed)
    rows, cols = _grid_shape(n_segments, H, W)
    if rows > H or cols > W:
        raise ValueError(f"cannot lay a {rows}x{cols} grid on a {H}x{W} image")
    re = _edges(H, rows, jitter, rng)
    ce = _edges(W, cols, jitter, rng)
    if np.any(np.diff(re) == 0) or np.any(np.diff(ce) == 0):
        re, ce = _edges(H, rows, 0.0, rng), _edges(W, cols, 0.0, rng)
    r_idx = np.searchsorted(re, np.arange(H), side="right") - 1
    c_idx = np.searchsorted(ce, np.arange(W), side="right") - 1
    labels = (r_idx[:, None] * cols + c_idx[None, :]).astype(np.int64)

    step = math.sqrt(H * W / n_segments)
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    flat_img = img.reshape(-1, C)
    spatial_w = (compactness / step) ** 2
    for _ in range(n_iter):
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n_segments).astype(float)
        means = np.stack([np.bincount(flat, flat_img[:, ch], n_segments) for ch in range(C)], 1) / counts[:, None]
        cy = np.bincount(flat, yy.ravel(), n_segments) / counts
        cx = np.bincount(flat, xx.ravel(), n_segments) / counts

        cands = [labels]
        for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
            shifted = np.roll(labels, shift, axis=axis)
            # no wrap-around: edge rows/cols fall back to the pixel's own label
            if axis == 0:
                shifted[0 if shift == 1 else -1, :] = labels[0 if shift == 1 else -1, :]
            else:
                shifted[:, 0 if shift == 1 else -1] = labels[:, 0 if shift == 1 else -1]
            cands.append(shifted)
        cands = np.stack(cands)  # (5, H, W)
        colour = ((img[None] - means[cands]) ** 2).sum(-1)
        space = (yy[None] - cy[cands]) ** 2 + (xx[None] - cx[cands]) ** 2
        cost = colour + spatial_w * space
        choice = np.argmin(cost, axis=0)  # first minimum = own label on ties
        new = np.take_along_axis(cands, choice[None], 0)[0]
        present = np.bincount(new.ravel(), minlength=n_segments) > 0
        if not present.all():
            lost = ~present[labels]
            new[lost] = labels[lost]
        if np.array_equal(new, labels):
            break
        labels = new
    return SegmentMask(labels, n_segments)


def grid_segment(height: int, width: int, n_segments: int) -> SegmentMask:
    """Plain grid, no snapping."""
    return segment(np.zeros((height, width)), n_segments, n_iter=0)


# ---------------------------------------------------------------- perturbing

def baseline_image(image, mode: str = "mean_color") -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if mode == "mean_color":
        return np.broadcast_to(img.mean(axis=(0, 1), keepdims=True), img.shape).copy()
    if mode == "zeros":
        return np.zeros_like(img)
    raise ValueError("baseline must be 'mean_color' or 'zeros'")


def perturb(image, mask: SegmentMask, coalitions, baseline: str = "mean_color") -> np.ndarray:
    """(N, H, W, C) images: original pixels where the coalition keeps the segment, baseline elsewhere."""
    img = np.asarray(image, dtype=float)
    Z = np.atleast_2d(np.asarray(coalitions, dtype=bool))
    if Z.shape[1] != mask.num_segments:
        raise ValueError(f"coalitions must have length {mask.num_segments}")
    base = baseline_image(img, baseline)
    keep = Z[:, mask.labels]  # (N, H, W)
    return np.where(keep[..., None], img[None], base[None])


def perturb_and_predict(model_fn, image, mask: SegmentMask, coalitions, baseline: str = "mean_color",
                        batch_size: int = 256) -> np.ndarray:
    """``model_fn`` maps an (N, H, W, C) batch to (N, K) probabilities; returns (len(coalitions), K)."""
    Z = np.atleast_2d(np.asarray(coalitions))
    out = []
    for i in range(0, len(Z), batch_size):
        out.append(np.asarray(model_fn(perturb(image, mask, Z[i:i + batch_size], baseline)), dtype=float))
    return np.concatenate(out) if out else np.zeros((0, 0))


def image_game(model_fn, image, mask: SegmentMask, target_class: int, baseline: str = "mean_color") -> ValueFn:
    def v(Z: np.ndarray) -> np.ndarray:
        return perturb_and_predict(model_fn, image, mask, Z, baseline)[:, target_class]
    return v


# ---------------------------------------------------------------- LIME

def weighted_ridge(X: np.ndarray, y: np.ndarray, w: np.ndarray, ridge: float) -> tuple[np.ndarray, float]:
    """Weighted ridge regression with an unpenalised intercept.

    The penalty is measured against the raw (unnormalised) sample weights.
    """
    wn = w / w.sum()
    xm = wn @ X
    ym = wn @ y
    Xc = X - xm
    yc = y - ym
    A = Xc.T @ (Xc * w[:, None]) + ridge * np.eye(X.shape[1])
    coef = np.linalg.solve(A, Xc.T @ (w * yc))
    return coef, float(ym - xm @ coef)


def lime_coefficients(value_fn: ValueFn, n_segments: int, n_samples: int = 1000,
                      kernel_width: float | None = None, ridge: float = 1.0,
                      seed: int = 0) -> tuple[np.ndarray, float]:
    """Local linear surrogate over coalition indicators.

    Coalitions are uniform random bit vectors (the first is the full image);
    sample weights are exp(-d^2 / width^2) with d the cosine distance to the
    all-ones coalition.
    """
    S = n_segments
    if n_samples < S:
        raise ExplainError(f"n_samples ({n_samples}) must be >= number of segments ({S})")
    width = 0.25 * math.sqrt(S) if kernel_width is None else kernel_width
    rng = np.random.default_rng(seed)
    Z = rng.integers(0, 2, size=(n_samples, S)).astype(float)
    Z[0] = 1.0
    if np.all(Z == Z[0]):
        raise ExplainError("degenerate design: all coalitions identical")
    y = np.asarray(value_fn(Z), dtype=float)
    norms = np.linalg.norm(Z, axis=1)
    cos = np.divide(Z.sum(1), norms * math.sqrt(S), out=np.zeros(len(Z)), where=norms > 0)
    d = 1.0 - cos
    w = np.exp(-(d ** 2) / width ** 2)
    return weighted_ridge(Z, y, w, ridge)


# ----------------------------------------------------------- Shapley values

def _all_coalitions(S: int) -> np.ndarray:
    m = np.arange(2 ** S, dtype=np.int64)
    return ((m[:, None] >> np.arange(S)) & 1).astype(float)


def exact_shapley_values(value_fn: ValueFn, n_segments: int) -> np.ndarray:
    """Brute force: phi_i = sum_T |T|!(S-|T|-1)!/S! * (v(T + i) - v(T)) over all T not containing i."""
    S = n_segments
    if S > MAX_EXACT_SEGMENTS:
        raise ExplainError(
            f"exact Shapley enumerates 2^S coalitions; S={S} exceeds the limit of {MAX_EXACT_SEGMENTS}. "
            "Use kernel_shap or fewer segments."
        )
    Z = _all_coalitions(S)
    v = np.asarray(value_fn(Z), dtype=float)
    sizes = Z.sum(1).astype(int)
    fact = [math.factorial(k) for k in range(S + 1)]
    weight = np.array([fact[k] * fact[S - k - 1] / fact[S] if k < S else 0.0 for k in range(S + 1)])
    masks = np.arange(2 ** S)
    phi = np.zeros(S)
    for i in range(S):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = np.sum(weight[sizes[without]] * (v[without | bit] - v[without]))
    return phi


def shapley_kernel_weight(S: int, k) -> np.ndarray:
    k = np.asarray(k)
    comb = np.array([math.comb(S, int(x)) for x in np.ravel(k)], dtype=float).reshape(k.shape)
    return (S - 1) / (comb * k * (S - k))


def _constrained_wls(Z: np.ndarray, y: np.ndarray, w: np.ndarray, total: float) -> np.ndarray:
    """min sum w (y - Z phi)^2  s.t.  sum(phi) = total, by eliminating the last coordinate."""
    S = Z.shape[1]
    if S == 1:
        return np.array([total])
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1] * total
    sw = np.sqrt(w)
    head, *_ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    return np.append(head, total - head.sum())


def kernel_shap_values(value_fn: ValueFn, n_segments: int, n_samples: int = 2048,
                       full_enumeration: bool | None = None, seed: int = 0) -> tuple[np.ndarray, float]:
    """Shapley-kernel weighted least squares with the efficiency constraint.

    Returns (attributions, v(empty)). With ``full_enumeration`` (default: whenever
    all 2^S - 2 proper coalitions fit in ``n_samples``) every coalition is used with
    its kernel weight and the result equals the exact Shapley values. Otherwise
    coalitions are drawn from the kernel distribution in complementary pairs and
    weighted uniformly.
    """
    S = n_segments
    if full_enumeration is None:
        full_enumeration = S <= MAX_ENUMERATION_SEGMENTS and 2 ** S - 2 <= n_samples
    if full_enumeration and S > MAX_ENUMERATION_SEGMENTS:
        raise ExplainError(
            f"full enumeration of 2^{S} coalitions requested; limit is S <= {MAX_ENUMERATION_SEGMENTS}"
        )
    ends = np.vstack([np.zeros(S), np.ones(S)])
    v_empty, v_full = np.asarray(value_fn(ends), dtype=float)
    total = v_full - v_empty
    if S == 1:
        return np.array([total]), float(v_empty)
    if full_enumeration:
        Z = _all_coalitions(S)[1:-1]
        sizes = Z.sum(1)
        w = shapley_kernel_weight(S, sizes)
    else:
        if n_samples < S + 2:
            raise ExplainError(f"n_samples ({n_samples}) must be >= S + 2 = {S + 2}")
        rng = np.random.default_rng(seed)
        ks = np.arange(1, S)
        p = shapley_kernel_weight(S, ks) * np.array([math.comb(S, int(k)) for k in ks])
        p /= p.sum()
        half = (n_samples - 2) // 2
        sizes = rng.choice(ks, size=half, p=p)
        Z = np.zeros((half, S))
        for row, k in enumerate(sizes):
            Z[row, rng.choice(S, size=k, replace=False)] = 1.0
        Z = np.vstack([Z, 1.0 - Z])
        w = np.ones(len(Z))
    y = np.asarray(value_fn(Z), dtype=float) - v_empty
    return _constrained_wls(Z, y, w, total), float(v_empty)


# ------------------------------------------------------- image-level wrappers

def _target(model_fn, image, target_class) -> int:
    if target_class is not None:
        return int(target_class)
    return int(np.argmax(np.asarray(model_fn(np.asarray(image, float)[None]))[0]))


def lime_explain(model_fn, image, mask: SegmentMask, target_class: int | None = None, n_samples: int = 1000,
                 kernel_width: float | None = None, ridge: float = 1.0, seed: int = 0,
                 baseline: str = "mean_color", view_index: int = -1) -> AttributionMap:
    target = _target(model_fn, image, target_class)
    coef, intercept = lime_coefficients(image_game(model_fn, image, mask, target, baseline), mask.num_segments,
                                        n_samples, kernel_width, ridge, seed)
    return AttributionMap.from_segments(coef, mask, view_index, target, "lime", intercept)


def kernel_shap_explain(model_fn, image, mask: SegmentMask, target_class: int | None = None,
                        n_samples: int = 2048, seed: int = 0, full_enumeration: bool | None = None,
                        baseline: str = "mean_color", view_index: int = -1) -> AttributionMap:
    target = _target(model_fn, image, target_class)
    phi, base = kernel_shap_values(image_game(model_fn, image, mask, target, baseline), mask.num_segments,
                                   n_samples, full_enumeration, seed)
    return AttributionMap.from_segments(phi, mask, view_index, target, "kernel_shap", base)


def exact_shapley(model_fn, image, mask: SegmentMask, target_class: int | None = None,
                  baseline: str = "mean_color", view_index: int = -1) -> AttributionMap:
    if mask.num_segments > MAX_EXACT_SEGMENTS:
        raise ExplainError(
            f"exact_shapley needs S <= {MAX_EXACT_SEGMENTS} segments, got {mask.num_segments}; "
            "lower the segment count or use kernel_shap"
        )
    target = _target(model_fn, image, target_class)
    game = image_game(model_fn, image, mask, target, baseline)
    phi = exact_shapley_values(game, mask.num_segments)
    base = float(game(np.zeros((1, mask.num_segments)))[0])
    return AttributionMap.from_segments(phi, mask, view_index, target, "exact_shapley", base)


# --------------------------------------------------------- explainer bundle

@dataclass
class ExplainParams:
    n_segments: int = 40
    compactness: float = 0.15
    lime_samples: int = 1000
    kernel_width: float | None = None
    ridge: float = 1.0
    shap_samples: int = 2048
    baseline: str = "mean_color"
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ExplainerBundle:
    """Frozen extractors plus one trained one-view head per scope."""

    kind: str
    schema: MultiViewSchema
    extractors: Mapping[str, FeatureExtractor]
    heads: dict[str, nn.Module]
    views_by_scope: dict[str, list[int]]

    def model_fn(self, view_index: int) -> Callable[[np.ndarray], np.ndarray]:
        scope = scope_of_view(self.kind, self.schema, view_index)
        if scope not in self.heads:
            raise ExplainError(f"no trained head for scope {scope!r} (view {view_index})")
        fe, head = self.extractors[scope], self.heads[scope]
        fe.eval()
        head.eval()

        def fn(images: np.ndarray) -> np.ndarray:
            with torch.no_grad():
                logits = head(fe(to_tensor(np.asarray(images, dtype=np.float32))))
            return softmax(logits.double().numpy())
        return fn


def build_explainer(model: MultiViewModel, train_ds: Dataset, cfg: TrainConfig) -> ExplainerBundle:
    """Freeze every extractor of ``model`` and fit the one-view heads for its kind."""
    for fe in model.extractors.values():
        freeze(fe)
    views = scope_views(model.kind, model.schema)
    extractors = dict(model.extractors.items())
    heads = train_heads(extractors, train_ds, cfg, views)
    return ExplainerBundle(model.kind, model.schema, extractors, heads, views)


def explain_view(bundle: ExplainerBundle, sample: Sample, view_index: int, method: str = "lime",
                 target_class: int | None = None, params: ExplainParams | None = None) -> AttributionMap:
    if method not in METHODS:
        raise ExplainError(f"method must be one of {METHODS}")
    p = params or ExplainParams()
    if method == "exact_shapley" and p.n_segments > MAX_EXACT_SEGMENTS:
        raise ExplainError(
            f"exact_shapley needs at most {MAX_EXACT_SEGMENTS} segments but n_segments={p.n_segments}; "
            "pass a smaller segment count or use --method kernel_shap"
        )
    if not 0 <= view_index < bundle.schema.num_views:
        raise IndexError(f"view {view_index} out of range")
    fn = bundle.model_fn(view_index)
    image = np.asarray(sample.views[view_index], dtype=float)
    mask = segment(image, p.n_segments, p.compactness, seed=p.seed)
    if method == "lime":
        return lime_explain(fn, image, mask, target_class, p.lime_samples, p.kernel_width, p.ridge, p.seed,
                            p.baseline, view_index)
    if method == "kernel_shap":
        return kernel_shap_explain(fn, image, mask, target_class, p.shap_samples, p.seed, None, p.baseline,
                                   view_index)
    return exact_shapley(fn, image, mask, target_class, p.baseline, view_index)


def global_attribution(bundle: ExplainerBundle, samples, view_index: int, method: str = "kernel_shap",
                       target_class: int | None = None, params: ExplainParams | None = None) -> np.ndarray:
    """Mean absolute per-pixel attribution of one view over a set of samples."""
    maps = [explain_view(bundle, s, view_index, method, target_class, params).per_pixel for s in samples]
    if not maps:
        raise ExplainError("global attribution needs at least one sample")
    return np.mean(np.abs(maps), axis=0)


# ----------------------------------------------------------------- overlays

def top_positive_pixels(per_pixel, q: float = 0.2) -> np.ndarray:
    """Boolean mask of the highest-scoring positive pixels, at most a q fraction of the image."""
    scores = np.asarray(per_pixel, dtype=float)
    k = int(round(q * scores.size))
    order = np.argsort(-scores.ravel(), kind="stable")[:k]
    sel = np.zeros(scores.size, bool)
    sel[order] = True
    sel &= scores.ravel() > 0
    return sel.reshape(scores.shape)


def render_overlay(image, per_pixel, q: float = 0.2, alpha: float = 0.6) -> np.ndarray:
    """uint8 RGB: the view in grey (or colour) with the top-q positive pixels tinted orange."""
    base = to_uint8(image).astype(float)
    if base.ndim == 2:
        base = np.repeat(base[:, :, None], 3, axis=2)
    sel = top_positive_pixels(per_pixel, q)
    base[sel] = (1 - alpha) * base[sel] + alpha * ORANGE
    return np.clip(np.rint(base), 0, 255).astype(np.uint8)


def save_overlay(path, image, per_pixel, q: float = 0.2) -> None:
    Image.fromarray(render_overlay(image, per_pixel, q)).save(path)
