"""Per-view convolutional feature extractor, freezing, weight archives and gradient checking."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "softplus": nn.Softplus}


@dataclass
class BackboneConfig:
    """Three conv(3x3) -> activation -> maxpool(2x2) blocks, flatten, dense to ``feature_dim``."""

    feature_dim: int = 128
    channels: tuple[int, ...] = (4, 8, 16)
    activation: str = "relu"
    # per-channel input standardization; identity by default
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.feature_dim < 1 or not self.channels:
            raise ValueError("feature_dim and channels must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def fan_in_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every conv/linear weight and bias."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=generator, dtype=m.weight.dtype) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.copy_(torch.rand(m.bias.shape, generator=generator, dtype=m.bias.dtype) * 2 * bound - bound)


class FeatureExtractor(nn.Module):
    """Maps a batch of images (B, C, H, W) to features (B, feature_dim).

    The final dense layer is linear, so features may be negative.
    """

    def __init__(self, image_shape, config: BackboneConfig | None = None, seed: int = 0,
                 extractor_id: str = "fe"):
        super().__init__()
        self.config = config or BackboneConfig()
        self.image_shape = tuple(int(s) for s in image_shape)
        self.extractor_id = extractor_id
        self.seed = seed
        self.frozen = False
        h, w, c = self.image_shape
        act = ACTIVATIONS[self.config.activation]
        layers: list[nn.Module] = []
        in_ch = c
        for out_ch in self.config.channels:
            layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), act(), nn.MaxPool2d(2)]
            in_ch = out_ch
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError(f"image {self.image_shape} too small for {len(self.config.channels)} pooling blocks")
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch * h * w, self.config.feature_dim)
        fan_in_uniform_(self, torch.Generator().manual_seed(seed))

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != (self.image_shape[2], self.image_shape[0], self.image_shape[1]):
            raise ValueError(f"expected images (B, C, H, W) matching {self.image_shape}, got {tuple(x.shape)}")
        cfg = self.config
        if cfg.input_mean != 0.0 or cfg.input_std != 1.0:
            x = (x - cfg.input_mean) / cfg.input_std
        x = self.conv(x)
        return self.fc(torch.flatten(x, 1))

    def manifest(self) -> dict:
        return {
            "extractor_id": self.extractor_id,
            "feature_dim": self.feature_dim,
            "image_shape": list(self.image_shape),
            "config": self.config.to_dict(),
            "seed": self.seed,
            "frozen": self.frozen,
        }


def to_tensor(images) -> torch.Tensor:
    """(..., H, W, C) array -> (..., C, H, W) float tensor."""
    arr = np.asarray(images)
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    return t.movedim(-1, -3)


def extract(fe: FeatureExtractor, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.shape != fe.image_shape:
        raise ValueError(f"image shape {image.shape} does not match extractor geometry {fe.image_shape}")
    dtype = next(fe.parameters()).dtype
    was_training = fe.training
    fe.eval()
    with torch.no_grad():
        out = fe(to_tensor(image[None]).to(dtype))
    fe.train(was_training)
    return out[0].numpy().copy()


def freeze(fe: FeatureExtractor) -> FeatureExtractor:
    fe.frozen = True
    for p in fe.parameters():
        p.requires_grad_(False)
        p.grad = None
    return fe


def weight_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def weight_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(weight_arrays(module).items()):
        h.update(k.encode())
        h.update(str(v.dtype).encode())
        h.update(v.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- archives

def save_archive(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Named arrays plus a JSON manifest in one uncompressed .npz file."""
    payload = dict(arrays)
    payload["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != "__manifest__"}
        manifest = json.loads(z["__manifest__"].tobytes().decode())
    return arrays, manifest


def save_extractor(fe: FeatureExtractor, path) -> None:
    save_archive(path, weight_arrays(fe), fe.manifest())


def load_extractor(path) -> FeatureExtractor:
    arrays, man = load_archive(path)
    cfg = BackboneConfig(**man["config"])
    fe = FeatureExtractor(man["image_shape"], cfg, seed=man["seed"], extractor_id=man["extractor_id"])
    fe.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    if man.get("frozen"):
        freeze(fe)
    return fe


# ---------------------------------------------------------- gradient check

@dataclass
class GradientCheckReport:
    ok: bool
    max_rel_error: float
    worst: tuple[str, int] | None
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0

    def __bool__(self) -> bool:
        return self.ok


def gradient_check_report(
    fe: FeatureExtractor,
    image: np.ndarray,
    tolerance: float = 1e-4,
    step: float = 1e-3,
    coords_per_param: int = 8,
    seed: int = 0,
    grad_transform: Callable[[dict[str, torch.Tensor]], dict[str, torch.Tensor]] | None = None,
    floor: float = 1e-7,
) -> GradientCheckReport:
    """Compare autograd parameter gradients of a random linear probe of the features against
    central finite differences, on a float64 copy of ``fe``.

    ``grad_transform`` lets callers tamper with the analytic gradients (used to check that
    the comparison actually fails). Relative error is |a - n| / max(|a|, |n|, floor).
    Coordinates whose perturbation changes a max-pool or ReLU pattern are skipped.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != fe.image_shape:
        raise ValueError(f"image shape {image.shape} does not match extractor geometry {fe.image_shape}")
    net = copy.deepcopy(fe).double().eval()
    for p in net.parameters():
        p.requires_grad_(True)
    gen = torch.Generator().manual_seed(seed)
    probe = torch.randn(net.feature_dim, generator=gen, dtype=torch.float64)
    x = to_tensor(image[None]).double()

    def loss() -> torch.Tensor:
        return (net(x)[0] * probe).sum()

    net.zero_grad()
    loss().backward()
    grads = {n: p.grad.detach().clone() for n, p in net.named_parameters()}
    if grad_transform is not None:
        grads = grad_transform(grads)

    # Piecewise-linear units (max-pool winners, ReLU signs) are recorded on every
    # evaluation; a coordinate whose +-step crosses a kink is not a smooth probe
    # point and is replaced by another draw.
    patterns: list[torch.Tensor] = []

    def record(module, inputs, output):
        x_in = inputs[0]
        if isinstance(module, nn.MaxPool2d):
            patterns.append(nn.functional.max_pool2d(x_in, module.kernel_size, module.stride,
                                                     return_indices=True)[1])
        else:
            patterns.append(x_in > 0)

    hooks = [m.register_forward_hook(record) for m in net.modules() if isinstance(m, (nn.MaxPool2d, nn.ReLU))]

    def evaluate() -> tuple[float, list[torch.Tensor]]:
        patterns.clear()
        val = loss().item()
        return val, list(patterns)

    rng = np.random.default_rng(seed)
    worst = GradientCheckReport(True, 0.0, None)
    checked = 0
    try:
        with torch.no_grad():
            _, ref = evaluate()
            for name, p in net.named_parameters():
                flat = p.view(-1)
                n = flat.numel()
                want = min(coords_per_param, n)
                done = 0
                for i in rng.permutation(n)[:max(want * 4, want)]:
                    if done == want:
                        break
                    i = int(i)
                    orig = flat[i].item()
                    flat[i] = orig + step
                    up, pat_up = evaluate()
                    flat[i] = orig - step
                    down, pat_down = evaluate()
                    flat[i] = orig
                    if any(not torch.equal(a, b) or not torch.equal(a, c) for a, b, c in zip(ref, pat_up, pat_down)):
                        continue
                    done += 1
                    num = (up - down) / (2 * step)
                    ana = grads[name].view(-1)[i].item()
                    rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                    if abs(ana - num) < floor:
                        rel = 0.0
                    checked += 1
                    if rel > worst.max_rel_error or worst.worst is None:
                        worst = GradientCheckReport(True, rel, (name, i), ana, num)
    finally:
        for h in hooks:
            h.remove()
    worst.checked = checked
    worst.ok = worst.max_rel_error <= tolerance
    if not worst.ok:
        log.warning(
            "gradient check failed: %s[%d] analytic=%.6g numeric=%.6g rel=%.3g",
            worst.worst[0], worst.worst[1], worst.analytic, worst.numeric, worst.max_rel_error,
        )
    return worst


def gradient_check(fe: FeatureExtractor, image: np.ndarray, tolerance: float = 1e-4, **kwargs) -> bool:
    return bool(gradient_check_report(fe, image, tolerance, **kwargs))
