"""Classification metrics and explanation-quality scores against ground-truth masks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata


def positive_class_index(class_names) -> int:
    """'Defective' when present, otherwise the last class."""
    names = list(class_names)
    return names.index("Defective") if "Defective" in names else len(names) - 1


def auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted 0.5.

    Computed from midranks (Mann-Whitney U), which equals the trapezoidal ROC area.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(pred, labels, num_classes: int) -> np.ndarray:
    """counts[true, predicted]."""
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, int), np.asarray(pred, int)), 1)
    return m


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    confusion: list[list[int]]
    precision: list[float]
    recall: list[float]
    class_names: list[str]
    explanation: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_nan_to_none(asdict(self)), indent=2, sort_keys=True)


def _nan_to_none(obj):
    # undefined ratios (e.g. precision of a never-predicted class) become JSON null
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def evaluate_predictions(probs, labels, class_names) -> EvalReport:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    K = len(class_names)
    pred = probs.argmax(1)
    cm = confusion(pred, labels, K)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.diag(cm) / cm.sum(0)
        recall = np.diag(cm) / cm.sum(1)
    pos = positive_class_index(class_names)
    binary = (labels == pos).astype(int)
    a = auc(probs[:, pos], binary) if 0 < binary.sum() < len(binary) else float("nan")
    return EvalReport(
        accuracy=float(np.trace(cm) / cm.sum()),
        auc=a,
        confusion=cm.tolist(),
        precision=[float(x) for x in precision],
        recall=[float(x) for x in recall],
        class_names=list(class_names),
    )


def _scores(attr) -> np.ndarray:
    return np.asarray(getattr(attr, "per_pixel", attr), dtype=float)


def _check_mask(scores: np.ndarray, gt_mask) -> np.ndarray:
    mask = np.asarray(gt_mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ValueError(f"attribution shape {scores.shape} != mask shape {mask.shape}")
    if not mask.any():
        raise ValueError("ground-truth mask is empty; metric undefined for normal samples")
    return mask


def dilate(mask, pixels: int) -> np.ndarray:
    if pixels <= 0:
        return np.asarray(mask, bool)
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=pixels)


def pointing_game(attr, gt_mask, tolerance_px: int = 3) -> bool:
    """Hit iff the maximal attribution pixel (lowest flat index on ties) lies in the dilated mask.

    An attribution with no positive score is a miss.
    """
    scores = _scores(attr)
    mask = _check_mask(scores, gt_mask)
    flat = int(np.argmax(scores))
    if scores.flat[flat] <= 0:
        return False
    return bool(dilate(mask, tolerance_px).flat[flat])


def topq_iou(attr, gt_mask, q: float = 0.2) -> float:
    """IoU between the top-q fraction of pixels by attribution and the mask (stable ordering)."""
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    scores = _scores(attr)
    mask = _check_mask(scores, gt_mask)
    k = max(1, int(round(q * scores.size)))
    order = np.argsort(-scores.ravel(), kind="stable")[:k]
    top = np.zeros(scores.size, bool)
    top[order] = True
    m = mask.ravel()
    return float((top & m).sum() / (top | m).sum())
