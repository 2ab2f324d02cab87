"""Mini-batch training of multi-view models and of one-view explainer heads."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .arch import MultiViewModel, predict_proba_batch, scope_views
from .backbone import FeatureExtractor, to_tensor, weight_hash
from .core import Dataset, DatasetError
from .metrics import auc, positive_class_index

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 150
    learning_rate: float = 5e-5
    optimizer: str = "adam"
    loss: str = "cross_entropy"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # fit the extractors' input mean/std on the training images before the first step
    standardize_inputs: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and learning_rate > 0 required")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.loss != "cross_entropy":
            raise ValueError("only the cross_entropy loss is supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    final_test_acc: float = float("nan")
    final_test_auc: float = float("nan")
    best_test_acc: float = float("nan")
    best_epoch: int = -1
    wall_time_s: float = 0.0

    def curves_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,test_acc"]
        for e, row in enumerate(zip(self.train_loss, self.train_acc, self.test_acc)):
            lines.append(f"{e + 1},{row[0]!r},{row[1]!r},{row[2]!r}")
        return "\n".join(lines) + "\n"

    def summary(self, include_time: bool = True) -> dict:
        d = {
            "epochs": len(self.train_loss),
            "final_test_acc": self.final_test_acc,
            "final_test_auc": self.final_test_auc,
            "best_test_acc": self.best_test_acc,
            "best_epoch": self.best_epoch,
        }
        if include_time:
            d["wall_time_s"] = self.wall_time_s
        return d

    def write(self, out_dir, prefix: str = "train") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{prefix}_curves.csv").write_text(self.curves_csv())
        # wall time is kept apart so that reruns give byte-identical summaries
        (out / f"{prefix}_summary.json").write_text(json.dumps(self.summary(False), indent=2, sort_keys=True))
        (out / f"{prefix}_timing.json").write_text(json.dumps({"wall_time_s": self.wall_time_s}, indent=2))


def _check_schema(model_schema, ds: Dataset) -> None:
    if ds.schema != model_schema:
        raise DatasetError("dataset schema does not match the model schema")


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)


def evaluate_model(model: MultiViewModel, ds: Dataset) -> tuple[float, float]:
    """(accuracy, AUC) of ``model`` on ``ds``; AUC is nan when only one class is present."""
    if len(ds) == 0:
        return float("nan"), float("nan")
    probs = predict_proba_batch(model, ds.view_array())
    labels = ds.labels
    acc = float(np.mean(probs.argmax(1) == labels))
    pos = positive_class_index(ds.schema.class_names)
    binary = (labels == pos).astype(int)
    a = auc(probs[:, pos], binary) if 0 < binary.sum() < len(binary) else float("nan")
    return acc, a


def set_input_standardization(model: MultiViewModel, ds: Dataset) -> tuple[float, float]:
    """Store the global pixel mean/std of ``ds`` in every extractor's config."""
    arr = ds.view_array()
    mean, std = float(arr.mean()), float(arr.std())
    std = std if std > 1e-8 else 1.0
    cfg = replace(model.backbone_config, input_mean=mean, input_std=std)
    model.backbone_config = cfg
    for fe in model.extractors.values():
        fe.config = cfg
    return mean, std


def train_model(model: MultiViewModel, train_ds: Dataset, test_ds: Dataset | None, cfg: TrainConfig) -> TrainReport:
    """Train ``model`` in place.

    ``train_acc`` is the running accuracy of the in-epoch predictions; ``test_acc``
    is measured after every epoch.
    """
    _check_schema(model.schema, train_ds)
    if test_ds is not None:
        _check_schema(model.schema, test_ds)
    if len(train_ds) == 0:
        raise DatasetError("train_ds is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if cfg.standardize_inputs and cfg.epochs > 0:
        set_input_standardization(model, train_ds)
    x_all = to_tensor(train_ds.view_array())
    y_all = torch.from_numpy(train_ds.labels)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = _make_optimizer(params, cfg)
    loss_fn = nn.CrossEntropyLoss()
    report = TrainReport()
    t0 = time.perf_counter()
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            xb, yb = x_all[idx], y_all[idx]
            opt.zero_grad()
            logits = model(xb)
            loss = loss_fn(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
        report.train_loss.append(total_loss / n)
        report.train_acc.append(correct / n)
        if test_ds is not None and len(test_ds):
            acc, _ = evaluate_model(model, test_ds)
            report.test_acc.append(acc)
            if not report.best_test_acc >= acc:
                report.best_test_acc, report.best_epoch = acc, epoch + 1
        else:
            report.test_acc.append(float("nan"))
        log.debug("epoch %d loss %.4f train_acc %.3f test_acc %.3f", epoch + 1,
                  report.train_loss[-1], report.train_acc[-1], report.test_acc[-1])
    if test_ds is not None:
        report.final_test_acc, report.final_test_auc = evaluate_model(model, test_ds)
    report.wall_time_s = time.perf_counter() - t0
    return report


# ------------------------------------------------------------ explainer heads

def _features(fe: FeatureExtractor, images: np.ndarray, batch_size: int = 256) -> torch.Tensor:
    fe.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(fe(to_tensor(images[i:i + batch_size])))
    return torch.cat(out)


def fit_head(head: nn.Module, feats: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig) -> list[float]:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = _make_optimizer(head.parameters(), cfg)
    loss_fn = nn.CrossEntropyLoss()
    losses = []
    n = len(labels)
    head.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            opt.zero_grad()
            loss = loss_fn(head(feats[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite head loss at epoch {epoch + 1}, batch {b + 1}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
    head.eval()
    return losses


def train_heads(frozen_extractors: Mapping[str, FeatureExtractor], train_ds: Dataset, cfg: TrainConfig,
                views_by_scope: Mapping[str, list[int]]) -> dict[str, nn.Linear]:
    """Fit one dense head per scope on frozen features of the views in that scope.

    Every (view, label) pair in the scope is one training example, so a scope
    covering all five views trains on 5 * len(train_ds) pairs.
    """
    if len(train_ds) == 0:
        raise DatasetError("train_ds is empty")
    for scope, fe in frozen_extractors.items():
        if not fe.frozen:
            raise TrainingError(f"extractor {scope!r} must be frozen before fitting its head")
    arr = train_ds.view_array()
    labels = torch.from_numpy(train_ds.labels)
    heads: dict[str, nn.Linear] = {}
    for i, (scope, fe) in enumerate(frozen_extractors.items()):
        views = views_by_scope[scope]
        before = weight_hash(fe)
        images = arr[:, views].reshape(-1, *arr.shape[2:])
        feats = _features(fe, images)
        y = labels.repeat_interleave(len(views))
        torch.manual_seed(cfg.seed * 7919 + i)
        head = nn.Linear(fe.feature_dim, train_ds.schema.num_classes)
        fit_head(head, feats, y, TrainConfig(**{**cfg.to_dict(), "seed": cfg.seed * 7919 + i}))
        assert weight_hash(fe) == before, "extractor mutated during head training"
        heads[scope] = head
    return heads


def freeze_model(model: MultiViewModel) -> MultiViewModel:
    from .backbone import freeze

    for fe in model.extractors.values():
        freeze(fe)
    return model


def model_scopes(model: MultiViewModel) -> dict[str, list[int]]:
    return scope_views(model.kind, model.schema)


def write_curves_plot(report: TrainReport, path, title: str = "") -> None:
    """Loss and accuracy trends side by side."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = np.arange(1, len(report.train_loss) + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(epochs, report.train_loss, label="train")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax2.plot(epochs, report.train_acc, label="train")
    ax2.plot(epochs, report.test_acc, label="test")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(-0.02, 1.02)
    ax2.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def read_curves_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]

