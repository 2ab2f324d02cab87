"""Seeded synthetic multi-view datasets with planted, mask-annotated defects.

Views in the first sub-group are rendered in a "disk" style (a bright, smoothly
shaded disk on a dark background); every other sub-group gets a "striped
relief" style blended in by ``style_gap`` (0 = same style as the first group,
1 = fully striped). Striped views naturally contain a few dark pores, so a dark
spot is evidence of a defect only on disk-style views. Defective samples carry
dark blobs on disk-style views and thin bright cracks on the other views.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import Dataset, MultiViewSchema, Sample, default_schema, save_dataset

DEFECT_KINDS = ("crack_stripe", "dark_blob")


@dataclass(frozen=True)
class SyntheticSpec:
    schema: MultiViewSchema = field(default_factory=default_schema)
    n_samples: int = 40
    defect_kinds: tuple[str, ...] = DEFECT_KINDS
    defect_intensity: float = 0.8
    texture_noise_sigma: float = 0.04
    style_gap: float = 1.0
    class_balance: float = 0.5
    seed: int = 0
    # probability that each view of a defective sample carries a defect (>= 1 view always does)
    defect_view_prob: float = 0.5
    area_band: tuple[float, float] = (0.02, 0.15)
    id_prefix: str = "s"

    def __post_init__(self):
        object.__setattr__(self, "defect_kinds", tuple(self.defect_kinds))
        object.__setattr__(self, "area_band", tuple(self.area_band))
        if self.n_samples < 0:
            raise ValueError("n_samples: must be >= 0")
        if not self.defect_kinds or any(k not in DEFECT_KINDS for k in self.defect_kinds):
            raise ValueError(f"defect_kinds: must be a non-empty subset of {DEFECT_KINDS}")
        if not 0.0 < self.defect_intensity <= 1.0:
            raise ValueError("defect_intensity: must lie in (0, 1]")
        if self.texture_noise_sigma < 0:
            raise ValueError("texture_noise_sigma: must be >= 0")
        if not 0.0 <= self.style_gap <= 1.0:
            raise ValueError(f"style_gap: must lie in [0, 1], got {self.style_gap}")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValueError("class_balance: must lie in [0, 1]")
        if not 0.0 <= self.defect_view_prob <= 1.0:
            raise ValueError("defect_view_prob: must lie in [0, 1]")
        lo, hi = self.area_band
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("area_band: need 0 < low <= high < 1")
        if not {"Normal", "Defective"} <= set(self.schema.class_names):
            raise ValueError("schema: class_names must contain 'Normal' and 'Defective'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        d["defect_kinds"] = list(self.defect_kinds)
        d["area_band"] = list(self.area_band)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "schema" in d:
            d["schema"] = MultiViewSchema.from_dict(d["schema"])
        return cls(**d)


def _quantize(img: np.ndarray) -> np.ndarray:
    # multiples of 1/255 so that a PNG round trip is lossless
    q = np.clip(np.rint(img * 255.0), 0, 255) + 0.0  # +0.0 folds -0.0 into 0.0
    return (q / 255.0).astype(np.float32)


def _smooth_noise(rng, shape, sigma_px: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_px, mode="reflect")
    return n / (n.std() + 1e-12)


def _ellipse(rng, H, W, cy, cx, frac) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    ratio = rng.uniform(0.6, 1.0)
    a = math.sqrt(frac * H * W / (math.pi * ratio))
    b = a * ratio
    ang = rng.uniform(0, np.pi)
    u = (yy - cy) * np.cos(ang) + (xx - cx) * np.sin(ang)
    v = -(yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _disk_style(rng, H, W, noise) -> tuple[np.ndarray, tuple[float, float, float]]:
    cy = H / 2 + rng.uniform(-0.05, 0.05) * H
    cx = W / 2 + rng.uniform(-0.05, 0.05) * W
    r = min(H, W) * rng.uniform(0.38, 0.44)
    yy, xx = np.mgrid[0:H, 0:W]
    dist = np.hypot(yy - cy, xx - cx)
    inside = np.clip(r - dist + 0.5, 0.0, 1.0)
    level = rng.uniform(0.5, 0.6)
    img = 0.03 + inside * (level - 0.03 + 0.05 * _smooth_noise(rng, (H, W), min(H, W) / 10))
    img = img + noise * rng.standard_normal((H, W))
    return img, (cy, cx, r)


def _stripe_style(rng, H, W, noise, pore_darkness: float, band) -> np.ndarray:
    """Near-horizontal relief stripes with a few dark pores, which are normal in this style."""
    yy, xx = np.mgrid[0:H, 0:W]
    theta = rng.uniform(-0.2, 0.2)
    period = rng.uniform(7.0, 11.0) * H / 64
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (yy * np.cos(theta) + xx * np.sin(theta)) / period + phase)
    img = 0.46 + 0.1 * wave + 0.04 * _smooth_noise(rng, (H, W), min(H, W) / 8)
    lo = band[0]
    for _ in range(rng.integers(1, 4)):
        pore = _ellipse(rng, H, W, rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W,
                        rng.uniform(lo, lo * 3))
        img = np.where(pore, (1 - pore_darkness) * img + pore_darkness * 0.02, img)
    return img + noise * rng.standard_normal((H, W))


def _blob_mask(rng, H, W, disk, band) -> np.ndarray:
    cy0, cx0, r = disk
    lo, hi = band
    for _ in range(100):
        frac = rng.uniform(lo, min(hi, lo * 3))
        a = math.sqrt(frac * H * W / math.pi)
        rr = rng.uniform(0, max(r - a, 0) * 0.7)
        phi = rng.uniform(0, 2 * np.pi)
        mask = _ellipse(rng, H, W, cy0 + rr * np.sin(phi), cx0 + rr * np.cos(phi), frac)
        if lo <= mask.mean() <= hi:
            return mask
    raise RuntimeError("could not place a blob inside the area band")


def _crack_mask(rng, H, W, band) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    lo, hi = band
    for _ in range(100):
        width = rng.uniform(4.0, 5.0) * H / 64
        frac = rng.uniform(lo, min(hi, lo * 2.5))
        length = frac * H * W / width
        ang = rng.uniform(np.pi / 4, 3 * np.pi / 4)  # steep: crosses the near-horizontal stripes
        cy = H / 2 + rng.uniform(-0.2, 0.2) * H
        cx = W / 2 + rng.uniform(-0.2, 0.2) * W
        dy, dx = np.sin(ang), np.cos(ang)
        along = (yy - cy) * dy + (xx - cx) * dx
        across = -(yy - cy) * dx + (xx - cx) * dy
        mask = (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)
        if lo <= mask.mean() <= hi:
            return mask
    raise RuntimeError("could not place a crack inside the area band")


def _render_sample(spec: SyntheticSpec, index: int, defective: bool):
    schema = spec.schema
    H, W, C = schema.image_shape
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    noise = spec.texture_noise_sigma
    views, masks = [], []
    n_views = schema.num_views
    if defective:
        carry = rng.random(n_views) < spec.defect_view_prob
        eligible = [v for v in range(n_views) if _defect_kind(schema, v) in spec.defect_kinds]
        if not eligible:
            raise ValueError("defect_kinds: no view can carry any of the enabled defect kinds")
        carry &= np.isin(np.arange(n_views), eligible)
        if not carry.any():
            carry[eligible[rng.integers(len(eligible))]] = True
    else:
        carry = np.zeros(n_views, bool)
    for v in range(n_views):
        disk_img, disk = _disk_style(rng, H, W, noise)
        if schema.group_of(v) == 0:
            img = disk_img
        else:
            stripes = _stripe_style(rng, H, W, noise, spec.defect_intensity, spec.area_band)
            img = (1 - spec.style_gap) * disk_img + spec.style_gap * stripes
        mask = np.zeros((H, W), bool)
        if carry[v]:
            a = spec.defect_intensity
            if _defect_kind(schema, v) == "dark_blob":
                mask = _blob_mask(rng, H, W, disk, spec.area_band)
                img = np.where(mask, (1 - a) * img + a * 0.02, img)
            else:
                mask = _crack_mask(rng, H, W, spec.area_band)
                img = np.where(mask, (1 - a) * img + a * 1.0, img)
        img = _quantize(img)
        if C == 3:
            img = np.stack([img, img, img], -1)
        else:
            img = img[:, :, None]
        views.append(img)
        masks.append(mask)
    return views, masks


def _defect_kind(schema: MultiViewSchema, view: int) -> str:
    return "dark_blob" if schema.group_of(view) == 0 else "crack_stripe"


def generate(spec: SyntheticSpec) -> tuple[Dataset, dict[tuple[str, int], np.ndarray]]:
    """Returns the dataset and a (sample_id, view) -> bool mask mapping covering every view."""
    schema = spec.schema
    n = spec.n_samples
    n_def = int(round(n * spec.class_balance))
    order = np.random.default_rng(np.random.SeedSequence([spec.seed, 2 ** 31])).permutation(n)
    defective = np.zeros(n, bool)
    defective[order[:n_def]] = True
    normal_idx = schema.class_names.index("Normal")
    defect_idx = schema.class_names.index("Defective")
    width = max(4, len(str(max(n - 1, 0))))
    samples, masks = [], {}
    for i in range(n):
        sid = f"{spec.id_prefix}{i:0{width}d}"
        views, vmasks = _render_sample(spec, i, bool(defective[i]))
        samples.append(Sample(tuple(views), defect_idx if defective[i] else normal_idx, sid))
        for k, m in enumerate(vmasks):
            masks[(sid, k)] = m
    return Dataset(schema, tuple(samples), "unsplit"), masks


def difficulty_sweep(base_spec: SyntheticSpec, style_gaps) -> list[SyntheticSpec]:
    gaps = list(style_gaps)
    if not gaps:
        raise ValueError("style_gaps must be non-empty")
    return [replace(base_spec, style_gap=float(g)) for g in gaps]


def group_mean_intensity(ds: Dataset) -> list[float]:
    """Mean pixel value per sub-group over the whole dataset."""
    arr = ds.view_array()
    return [float(arr[:, list(g)].mean()) for g in ds.schema.subgroups]


def write_synthetic(ds: Dataset, masks, root_dir, spec: SyntheticSpec | None = None) -> None:
    """Dataset layout plus ``masks/<sample_id>/view_<k>.png`` (255 inside the defect)."""
    root = Path(root_dir)
    save_dataset(ds, root)
    for (sid, k), m in sorted(masks.items()):
        d = root / "masks" / sid
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray((np.asarray(m, bool) * 255).astype(np.uint8)).save(d / f"view_{k}.png")
    if spec is not None:
        (root / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))


def load_masks(root_dir, ds: Dataset) -> dict[tuple[str, int], np.ndarray]:
    root = Path(root_dir) / "masks"
    out = {}
    for s in ds.samples:
        for k in range(ds.schema.num_views):
            p = root / s.sample_id / f"view_{k}.png"
            if p.exists():
                with Image.open(p) as im:
                    out[(s.sample_id, k)] = np.asarray(im.convert("L")) > 127
    return out
