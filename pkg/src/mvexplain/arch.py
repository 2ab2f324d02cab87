"""The four multi-view topologies and their forward semantics.

==== =============================================  ===============================
kind extractors                                     fusion
==== =============================================  ===============================
CSV  one, shared by every view                       pool over all views -> classifier
SSG  one per sub-group                               pool per group, concat -> classifier
PSG  one per view                                    pool per group -> group classifier
                                                     -> softmax, concat -> combiner
CDV  one per view                                    pool over all views -> classifier
==== =============================================  ===============================
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import (
    BackboneConfig,
    FeatureExtractor,
    fan_in_uniform_,
    load_archive,
    load_extractor,
    save_archive,
    save_extractor,
    to_tensor,
    weight_arrays,
)
from .core import MultiViewSchema

KINDS = ("CSV", "SSG", "PSG", "CDV")
POOL_MODES = ("max", "mean")


def view_pool(features, mode: str = "max"):
    """Elementwise max/mean across K feature vectors.

    Accepts a list of 1-D arrays (returns an array) or a list of (B, D) tensors
    (returns a (B, D) tensor).
    """
    if mode not in POOL_MODES:
        raise ValueError(f"pool mode must be one of {POOL_MODES}")
    if len(features) == 0:
        raise ValueError("view_pool needs at least one feature vector")
    if isinstance(features[0], torch.Tensor):
        if len({tuple(f.shape) for f in features}) != 1:
            raise ValueError("ragged feature vectors")
        stacked = torch.stack(list(features), 0)
        return stacked.amax(0) if mode == "max" else stacked.mean(0)
    arrs = [np.asarray(f, dtype=float) for f in features]
    if len({a.shape for a in arrs}) != 1:
        raise ValueError("ragged feature vectors")
    stacked = np.stack(arrs)
    return stacked.max(0) if mode == "max" else stacked.mean(0)


def make_classifier(in_dim: int, out_dim: int, depth: int = 1, hidden: int = 64) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(depth - 1):
        layers += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


def extractor_scopes(kind: str, schema: MultiViewSchema) -> list[str]:
    if kind == "CSV":
        return ["all"]
    if kind == "SSG":
        return [str(g) for g in range(len(schema.subgroups))]
    return [str(v) for v in range(schema.num_views)]


def scope_of_view(kind: str, schema: MultiViewSchema, view: int) -> str:
    if not 0 <= view < schema.num_views:
        raise IndexError(f"view {view} out of range")
    if kind == "CSV":
        return "all"
    if kind == "SSG":
        return str(schema.group_of(view))
    return str(view)


def scope_views(kind: str, schema: MultiViewSchema) -> dict[str, list[int]]:
    """Which views each extractor scope (and hence each explainer head) sees."""
    out: dict[str, list[int]] = {s: [] for s in extractor_scopes(kind, schema)}
    for v in range(schema.num_views):
        out[scope_of_view(kind, schema, v)].append(v)
    return out


class MultiViewModel(nn.Module):
    def __init__(self, kind: str, schema: MultiViewSchema, backbone_config: BackboneConfig | None = None,
                 pool_mode: str = "max", seed: int = 0, head_depth: int = 1):
        super().__init__()
        kind = kind.upper()
        if kind not in KINDS:
            raise ValueError(f"unknown architecture kind {kind!r}; expected one of {KINDS}")
        if pool_mode not in POOL_MODES:
            raise ValueError(f"pool_mode must be one of {POOL_MODES}")
        self.kind = kind
        self.schema = schema
        self.backbone_config = backbone_config or BackboneConfig()
        self.pool_mode = pool_mode
        self.seed = seed
        self.head_depth = head_depth
        D = self.backbone_config.feature_dim
        K = schema.num_classes
        G = len(schema.subgroups)

        self.extractors = nn.ModuleDict({
            scope: FeatureExtractor(schema.image_shape, self.backbone_config, seed=seed * 1000 + i,
                                    extractor_id=f"{kind.lower()}-{scope}")
            for i, scope in enumerate(extractor_scopes(kind, schema))
        })
        gen = torch.Generator().manual_seed(seed * 1000 + 999)
        if kind == "PSG":
            self.group_classifiers = nn.ModuleList(make_classifier(D, K, head_depth) for _ in range(G))
            self.combiner = nn.Linear(G * K, K)
            fan_in_uniform_(self.group_classifiers, gen)
            fan_in_uniform_(self.combiner, gen)
        else:
            in_dim = G * D if kind == "SSG" else D
            self.classifier = make_classifier(in_dim, K, head_depth)
            fan_in_uniform_(self.classifier, gen)

    def extractor_for_view(self, view: int) -> FeatureExtractor:
        return self.extractors[scope_of_view(self.kind, self.schema, view)]

    def view_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """x: (B, V, C, H, W) -> list of V (B, D) tensors."""
        if x.dim() != 5 or x.shape[1] != self.schema.num_views:
            raise ValueError(f"expected (B, {self.schema.num_views}, C, H, W) input, got {tuple(x.shape)}")
        if self.kind == "CSV":
            B, V = x.shape[:2]
            f = self.extractors["all"](x.flatten(0, 1))
            return list(f.view(B, V, -1).unbind(1))
        return [self.extractor_for_view(v)(x[:, v]) for v in range(self.schema.num_views)]

    def group_probabilities(self, x: torch.Tensor) -> list[torch.Tensor]:
        """PSG only: per-group softmax decisions."""
        if self.kind != "PSG":
            raise ValueError("group probabilities exist only for PSG")
        feats = self.view_features(x)
        return [
            torch.softmax(clf(view_pool([feats[v] for v in group], self.pool_mode)), dim=-1)
            for clf, group in zip(self.group_classifiers, self.schema.subgroups)
        ]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "PSG":
            return self.combiner(torch.cat(self.group_probabilities(x), dim=-1))
        feats = self.view_features(x)
        if self.kind == "SSG":
            pooled = torch.cat(
                [view_pool([feats[v] for v in group], self.pool_mode) for group in self.schema.subgroups],
                dim=-1,
            )
        else:
            pooled = view_pool(feats, self.pool_mode)
        return self.classifier(pooled)

    def classifier_modules(self) -> dict[str, nn.Module]:
        if self.kind == "PSG":
            mods = {f"group_classifier_{g}": m for g, m in enumerate(self.group_classifiers)}
            mods["combiner"] = self.combiner
            return mods
        return {"classifier": self.classifier}

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "schema": self.schema.to_dict(),
            "pool_mode": self.pool_mode,
            "seed": self.seed,
            "head_depth": self.head_depth,
            "backbone": self.backbone_config.to_dict(),
            "extractors": {s: f"extractor_{s}.npz" for s in self.extractors},
            "classifiers": {n: f"{n}.npz" for n in self.classifier_modules()},
        }


def build_model(kind: str, schema: MultiViewSchema, backbone_config: BackboneConfig | None = None,
                pool_mode: str = "max", seed: int = 0, head_depth: int = 1) -> MultiViewModel:
    return MultiViewModel(kind, schema, backbone_config, pool_mode, seed, head_depth)


def _views_tensor(model: MultiViewModel, sample_views) -> torch.Tensor:
    views = list(sample_views)
    if len(views) != model.schema.num_views:
        raise ValueError(f"expected {model.schema.num_views} views, got {len(views)}")
    return to_tensor(np.stack([np.asarray(v) for v in views])[None])


def forward(model: MultiViewModel, sample_views: Sequence[np.ndarray]) -> np.ndarray:
    x = _views_tensor(model, sample_views)
    model.eval()
    with torch.no_grad():
        return model(x)[0].double().numpy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: MultiViewModel, sample_views: Sequence[np.ndarray]) -> np.ndarray:
    return softmax(forward(model, sample_views))


def predict_proba_batch(model: MultiViewModel, views: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """views: (N, V, H, W, C) -> (N, K) probabilities."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(views), batch_size):
            out.append(model(to_tensor(views[i:i + batch_size])).double().numpy())
    if not out:
        return np.zeros((0, model.schema.num_classes))
    return softmax(np.concatenate(out))


# -------------------------------------------------------------- checkpoints

def save_checkpoint(model: MultiViewModel, ckpt_dir) -> None:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    man = model.manifest()
    for scope, fe in model.extractors.items():
        save_extractor(fe, d / man["extractors"][scope])
    for name, mod in model.classifier_modules().items():
        save_archive(d / man["classifiers"][name], weight_arrays(mod), {"name": name, "kind": model.kind})
    (d / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))


def load_checkpoint(ckpt_dir) -> MultiViewModel:
    d = Path(ckpt_dir)
    man_path = d / "manifest.json"
    if not man_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {man_path}")
    man = json.loads(man_path.read_text())
    model = build_model(
        man["kind"],
        MultiViewSchema.from_dict(man["schema"]),
        BackboneConfig(**man["backbone"]),
        man["pool_mode"],
        man["seed"],
        man["head_depth"],
    )
    for scope, fname in man["extractors"].items():
        model.extractors[scope] = load_extractor(d / fname)
    for name, mod in model.classifier_modules().items():
        arrays, _ = load_archive(d / man["classifiers"][name])
        mod.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model
