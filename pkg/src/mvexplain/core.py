"""Multi-view samples, schemas, datasets and on-disk ingestion.

Directory layout understood by :func:`load_dataset` and written by
:func:`save_dataset`::

    <root>/labels.csv               # header: sample_id,label
    <root>/<sample_id>/view_0.png
    ...
    <root>/<sample_id>/view_<V-1>.png
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

SPLIT_TAGS = ("train", "test", "unsplit")


class DatasetError(ValueError):
    """Raised for malformed datasets or dataset directories."""


@dataclass(frozen=True)
class MultiViewSchema:
    num_views: int
    subgroups: tuple[tuple[int, ...], ...]
    image_shape: tuple[int, int, int]
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "subgroups", tuple(tuple(int(v) for v in g) for g in self.subgroups))
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if not self.subgroups or any(len(g) == 0 for g in self.subgroups):
            raise ValueError("subgroups must be non-empty groups")
        flat = sorted(v for g in self.subgroups for v in g)
        if flat != list(range(self.num_views)):
            raise ValueError(
                f"subgroups {self.subgroups} must partition views 0..{self.num_views - 1}"
            )
        if len(self.image_shape) != 3 or min(self.image_shape[:2]) < 1:
            raise ValueError("image_shape must be (height, width, channels)")
        if self.image_shape[2] not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if len(self.class_names) < 2 or len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class_names must hold >= 2 distinct labels")

    @property
    def height(self) -> int:
        return self.image_shape[0]

    @property
    def width(self) -> int:
        return self.image_shape[1]

    @property
    def channels(self) -> int:
        return self.image_shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def group_of(self, view: int) -> int:
        for g, members in enumerate(self.subgroups):
            if view in members:
                return g
        raise IndexError(f"view {view} out of range")

    def to_dict(self) -> dict:
        return {
            "num_views": self.num_views,
            "subgroups": [list(g) for g in self.subgroups],
            "image_shape": list(self.image_shape),
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultiViewSchema":
        return cls(
            num_views=d["num_views"],
            subgroups=d["subgroups"],
            image_shape=d["image_shape"],
            class_names=d["class_names"],
        )


def default_schema(height: int = 64, width: int = 64, channels: int = 1) -> MultiViewSchema:
    """Five views: top=0, bottom=1 in the first group, profiles 2..4 in the second."""
    return MultiViewSchema(
        num_views=5,
        subgroups=((0, 1), (2, 3, 4)),
        image_shape=(height, width, channels),
        class_names=("Normal", "Defective"),
    )


@dataclass(frozen=True)
class Sample:
    views: tuple[np.ndarray, ...]
    label: int
    sample_id: str

    def validate(self, schema: MultiViewSchema) -> None:
        if len(self.views) != schema.num_views:
            raise DatasetError(
                f"sample {self.sample_id} has {len(self.views)} views, expected {schema.num_views}"
            )
        for k, v in enumerate(self.views):
            if v.shape != schema.image_shape:
                raise DatasetError(
                    f"sample {self.sample_id} view {k} has shape {v.shape}, expected {schema.image_shape}"
                )
            if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
                raise DatasetError(f"sample {self.sample_id} view {k} has pixels outside [0, 1]")
        if not 0 <= self.label < schema.num_classes:
            raise DatasetError(f"sample {self.sample_id} label {self.label} out of range")


@dataclass(frozen=True)
class Dataset:
    schema: MultiViewSchema
    samples: tuple[Sample, ...]
    split_tag: str = "unsplit"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}")
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("sample_ids must be unique")
        for s in self.samples:
            s.validate(self.schema)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def get(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)

    def view_array(self) -> np.ndarray:
        """All pixels stacked as (N, V, H, W, C) float32."""
        if not self.samples:
            return np.zeros((0, self.schema.num_views, *self.schema.image_shape), np.float32)
        return np.stack([np.stack(s.views) for s in self.samples]).astype(np.float32)

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.sample_id.encode())
            h.update(str(s.label).encode())
            for v in s.views:
                h.update(np.ascontiguousarray(v, dtype=np.float32).tobytes())
        return h.hexdigest()


def _read_labels(path: Path) -> dict[str, str]:
    if not path.exists():
        raise DatasetError(f"labels file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"sample_id", "label"} <= set(reader.fieldnames):
            raise DatasetError(f"{path} must have header 'sample_id,label'")
        return {row["sample_id"]: row["label"] for row in reader}


def _decode(path: Path, schema: MultiViewSchema) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L" if schema.channels == 1 else "RGB")
            if im.size != (schema.width, schema.height):
                im = im.resize((schema.width, schema.height), Image.BILINEAR)
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    if arr.dtype == np.uint16:
        arr = arr.astype(np.float32) / 65535.0
    else:
        arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_dataset(root_dir, schema: MultiViewSchema) -> Dataset:
    root = Path(root_dir)
    labels = _read_labels(root / "labels.csv")
    samples = []
    for sample_id in sorted(labels):
        name = labels[sample_id]
        if name not in schema.class_names:
            raise DatasetError(f"sample {sample_id} has unknown class {name!r}")
        views = []
        for k in range(schema.num_views):
            path = root / sample_id / f"view_{k}.png"
            if not path.exists():
                raise DatasetError(f"sample {sample_id} missing view {k}")
            views.append(_decode(path, schema))
        samples.append(Sample(tuple(views), schema.class_names.index(name), sample_id))
    return Dataset(schema, tuple(samples), "unsplit")


def to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return arr[:, :, 0] if arr.ndim == 3 and arr.shape[2] == 1 else arr


def save_dataset(ds: Dataset, root_dir) -> None:
    """Write ``ds`` in the layout read by :func:`load_dataset` (8-bit PNG)."""
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"])
        for s in ds.samples:
            w.writerow([s.sample_id, ds.schema.class_names[s.label]])
    for s in ds.samples:
        d = root / s.sample_id
        d.mkdir(exist_ok=True)
        for k, v in enumerate(s.views):
            Image.fromarray(to_uint8(v)).save(d / f"view_{k}.png")


def split_dataset(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split.

    The train side gets round(N * train_fraction) samples, apportioned across
    classes by largest remainder (ties broken by the seeded generator) and
    clamped so both sides keep at least one sample of every class.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(ds) < 2:
        raise DatasetError("need at least 2 samples to split")
    rng = np.random.default_rng(seed)
    labels = ds.labels
    classes = np.unique(labels)
    members = {c: np.flatnonzero(labels == c) for c in classes}
    for c, idx in members.items():
        if len(idx) < 2:
            raise DatasetError(
                f"class {ds.schema.class_names[c]!r} has {len(idx)} sample(s); cannot stratify"
            )
    quota = np.array([len(members[c]) * train_fraction for c in classes])
    alloc = np.floor(quota).astype(int)
    extra = int(round(len(ds) * train_fraction)) - alloc.sum()
    tiebreak = rng.permutation(len(classes))
    order = sorted(range(len(classes)), key=lambda i: (-(quota[i] - alloc[i]), tiebreak[i]))
    for i in order[:max(extra, 0)]:
        alloc[i] += 1
    train_idx: list[int] = []
    for c, n_train in zip(classes, alloc):
        idx = members[c]
        n_train = int(np.clip(n_train, 1, len(idx) - 1))
        train_idx.extend(rng.permutation(idx)[:n_train].tolist())
    chosen = set(train_idx)
    train = tuple(s for i, s in enumerate(ds.samples) if i in chosen)
    test = tuple(s for i, s in enumerate(ds.samples) if i not in chosen)
    return Dataset(ds.schema, train, "train"), Dataset(ds.schema, test, "test")


def subset(ds: Dataset, sample_ids: Sequence[str], split_tag: str | None = None) -> Dataset:
    wanted = set(sample_ids)
    return Dataset(
        ds.schema,
        tuple(s for s in ds.samples if s.sample_id in wanted),
        split_tag or ds.split_tag,
    )
