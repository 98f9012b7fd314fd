"""Small encoder-decoder depth predictor, trained once and then frozen.

Architecture (all convs 3x3, stride 1, padding 1, with bias)::

    enc{i}:  conv -> leaky_relu(0.2) -> avgpool_down2      3 -> 16 -> 32 -> 64 -> 64
    dec{i}:  nearest_up2 -> concat skip -> conv -> leaky_relu
             (64+64 -> 64, 64+64 -> 32, 32+32 -> 16, 16+16 -> 16)
    head:    conv 1x1, 16 -> 1

Depth mode returns ``exp(clip(head, log 1e-2, log 1e2))``; disparity mode
returns ``relu(head)``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from . import gradcore as gc
from . import losses
from .gradcore import DTYPE, Tensor

log = logging.getLogger(__name__)

WEIGHT_MAGIC = b"PDWT"
WEIGHT_VERSION = 1
OUTPUT_MODES = ("depth", "disparity")
DEPTH_RANGE = (1e-2, 1e2)

ENC_CHANNELS = [(3, 16), (16, 32), (32, 64), (64, 64)]
DEC_CHANNELS = [(128, 64), (128, 32), (64, 16), (32, 16)]


def conv_table(prefix: str, enc, dec, head_in: int, head_out: int) -> list:
    table = []
    for i, (ci, co) in enumerate(enc):
        table += [(f"{prefix}enc{i}.w", (co, ci, 3, 3)), (f"{prefix}enc{i}.b", (co,))]
    for i, (ci, co) in enumerate(dec):
        table += [(f"{prefix}dec{i}.w", (co, ci, 3, 3)), (f"{prefix}dec{i}.b", (co,))]
    table += [(f"{prefix}head.w", (head_out, head_in, 1, 1)), (f"{prefix}head.b", (head_out,))]
    return table


ARCHITECTURE = conv_table("", ENC_CHANNELS, DEC_CHANNELS, 16, 1)
PARAM_COUNT = sum(int(np.prod(shape)) for _, shape in ARCHITECTURE)


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if min(self.std) <= 0:
            raise ValueError("normalization std must be positive")

    def _stats(self, ndim: int):
        shape = (1,) * (ndim - 3) + (3, 1, 1)
        return (np.asarray(self.mean, dtype=DTYPE).reshape(shape),
                np.asarray(self.std, dtype=DTYPE).reshape(shape))

    def apply(self, x):
        """phi: map [0, 1] images (channels at axis -3) to the network input range."""
        if isinstance(x, Tensor):
            mean, std = self._stats(x.ndim)
            return (x - mean) / std
        x = np.asarray(x, dtype=DTYPE)
        mean, std = self._stats(x.ndim)
        return ((x - mean) / std).astype(DTYPE)

    def invert(self, x) -> np.ndarray:
        """phi^-1 for plain arrays."""
        x = np.asarray(x, dtype=DTYPE)
        mean, std = self._stats(x.ndim)
        return (x * std + mean).astype(DTYPE)

    def low(self) -> np.ndarray:
        return self.apply(np.zeros((3, 1, 1), dtype=DTYPE))

    def high(self) -> np.ndarray:
        return self.apply(np.ones((3, 1, 1), dtype=DTYPE))

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


@dataclass
class DepthNetWeights:
    params: dict
    output_mode: str = "depth"
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}")
        check_shapes(self.params, ARCHITECTURE)

    def copy(self) -> "DepthNetWeights":
        return dataclasses.replace(self, params={k: v.copy() for k, v in self.params.items()}, hyper=dict(self.hyper))

    def tensors(self, trainable: bool = False) -> dict:
        return {k: Tensor(v, requires_grad=trainable) for k, v in self.params.items()}

    def fingerprint(self) -> bytes:
        return b"".join(self.params[name].tobytes() for name, _ in ARCHITECTURE)


def check_shapes(params: dict, table: list) -> None:
    expected = dict(table)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"shape-table mismatch: missing {missing}, unexpected {extra}")
    for name, shape in table:
        arr = params[name]
        if tuple(arr.shape) != tuple(shape):
            raise ValueError(f"shape-table mismatch for {name}: {arr.shape} != {shape}")
        if not np.isfinite(arr).all():
            raise ValueError(f"non-finite values in {name}")


DISPARITY_HEAD_BIAS = 1.0


def kaiming_init(table: list, rng: np.random.Generator) -> dict:
    params = {}
    for name, shape in table:
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)
        else:
            params[name] = np.zeros(shape, dtype=DTYPE)
    return params


def init_depthnet(seed: int = 0, output_mode: str = "depth", normalization: NormalizationSpec | None = None) -> DepthNetWeights:
    rng = np.random.default_rng(seed)
    params = kaiming_init(ARCHITECTURE, rng)
    if output_mode == "disparity":
        # a zero-bias relu head is killed by the first few SGD steps; start every pixel active
        params["head.b"][:] = DISPARITY_HEAD_BIAS
    return DepthNetWeights(params, output_mode, normalization or NormalizationSpec())


def unet_forward(p: dict, x: Tensor, prefix: str, n_levels: int) -> Tensor:
    """Shared encoder/decoder body; returns the head's raw output."""
    skips = []
    for i in range(n_levels):
        x = gc.leaky_relu(gc.conv2d(x, p[f"{prefix}enc{i}.w"], p[f"{prefix}enc{i}.b"], 1, 1), 0.2)
        skips.append(x)
        x = gc.resample2(x, "avgpool_down2")
    for i, skip in enumerate(reversed(skips)):
        x = gc.resample2(x, "nearest_up2")
        x = gc.concat([x, skip], axis=1)
        x = gc.leaky_relu(gc.conv2d(x, p[f"{prefix}dec{i}.w"], p[f"{prefix}dec{i}.b"], 1, 1), 0.2)
    return gc.conv2d(x, p[f"{prefix}head.w"], p[f"{prefix}head.b"], 1, 0)


def forward(params: dict, x, output_mode: str = "depth") -> Tensor:
    """Network-normalized input [N,3,H,W] -> raw output map [N,H,W] (depth or disparity)."""
    x = gc.as_tensor(x)
    n, c, h, w = x.shape
    if c != 3 or h % 16 or w % 16:
        raise ValueError(f"expected [N,3,H,W] with H, W divisible by 16, got {x.shape}")
    head = gc.reshape(unet_forward(params, x, "", len(ENC_CHANNELS)), (n, h, w))
    if output_mode == "depth":
        lo, hi = np.log(DEPTH_RANGE[0]), np.log(DEPTH_RANGE[1])
        return gc.exp(gc.clip(head, lo, hi))
    return gc.relu(head)


def predict_depth(params: dict, x, output_mode: str, fg_mask=None) -> Tensor:
    """Forward pass followed by the disparity-to-depth transform in disparity mode."""
    out = forward(params, x, output_mode)
    if output_mode == "disparity":
        return losses.disparity_to_depth(out, fg_mask)
    return out


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    rgb: np.ndarray  # [N,3,H,W] in [0,1]
    gt: np.ndarray  # [N,H,W] mean-5 normalized on V, 0 elsewhere
    mask: np.ndarray  # [N,H,W] bool
    rays: np.ndarray  # [N,H,W,3]

    def __len__(self) -> int:
        return len(self.gt)

    def take(self, idx) -> "Batch":
        return Batch(self.rgb[idx], self.gt[idx], self.mask[idx], self.rays[idx])


def make_batch(samples: list) -> Batch:
    rgb = np.stack([s.rgb.transpose(2, 0, 1) for s in samples]).astype(DTYPE)
    mask = np.stack([s.mask for s in samples])
    depth = np.stack([np.where(s.mask, s.depth, 0) for s in samples])
    gt = np.where(mask, losses.normalize_mean5(depth, mask), 0).astype(DTYPE)
    rays = np.stack([losses.pixel_rays(s.intrinsics) for s in samples])
    return Batch(rgb, gt, mask, rays)


def white_input(batch: Batch, norm: NormalizationSpec) -> np.ndarray:
    """phi(I) with every background pixel replaced by white."""
    m = batch.mask[:, None]
    return norm.apply(np.where(m, batch.rgb, 1.0))


def batch_order(n_samples: int, batch: int, iters: int, seed: int):
    """Deterministic stream of index batches: a fresh permutation per epoch."""
    rng = np.random.default_rng(seed)
    perm, pos = rng.permutation(n_samples), 0
    for _ in range(iters):
        if pos + batch > n_samples:
            perm, pos = rng.permutation(n_samples), 0
        yield perm[pos:pos + batch]
        pos += batch


def lr_at(step: int, hyper: dict) -> float:
    """Constant rate, multiplied by ``anneal_factor`` for the final ``anneal_iters`` steps."""
    if step >= hyper["iters"] - hyper.get("anneal_iters", 0):
        return hyper["lr"] * hyper.get("anneal_factor", 0.1)
    return hyper["lr"]


# ---------------------------------------------------------------- training

DEFAULT_TRAIN = {"iters": 5000, "batch": 8, "lr": 5e-3, "anneal_iters": 1000, "anneal_factor": 0.1,
                 "seed": 0, "log_every": 100, "input": "native", "grad_clip": 0.0}


class DivergenceError(RuntimeError):
    def __init__(self, message, weights=None, log_rows=None):
        super().__init__(message)
        self.weights = weights
        self.log_rows = log_rows or []


def batch_loss(params: dict, batch: Batch, inputs: np.ndarray, output_mode: str) -> Tensor:
    pred = predict_depth(params, inputs, output_mode)
    return losses.total_loss(pred, batch.gt, batch.rays, batch.mask)


def evaluate_loss(weights: DepthNetWeights, samples: list, input_kind: str = "native", chunk: int = 16) -> dict:
    """Mean total loss and mean si-RMSE over ``samples`` (no gradients)."""
    params = weights.tensors(False)
    data = samples if isinstance(samples, Batch) else make_batch(samples)
    tot, si, n = 0.0, 0.0, 0
    for i in range(0, len(data), chunk):
        b = data.take(slice(i, i + chunk))
        x = weights.normalization.apply(b.rgb) if input_kind == "native" else white_input(b, weights.normalization)
        pred = predict_depth(params, x, weights.output_mode)
        tot += float(losses.total_loss(pred, b.gt, b.rays, b.mask, reduce_batch=False).data.sum())
        si += float(losses.si_rmse(pred, b.gt, b.mask).data.sum())
        n += len(b.gt)
    return {"loss": tot / n, "si_rmse": si / n}


def _sgd_loop(weights: DepthNetWeights, train: list, val: list, hyper: dict) -> tuple:
    h = {**DEFAULT_TRAIN, **hyper}
    if len(train) < h["batch"]:
        raise ValueError(f"need at least {h['batch']} training samples, got {len(train)}")
    w = weights.copy()
    data = make_batch(train)
    val = make_batch(val) if val else None
    params = w.tensors(True)
    norm = w.normalization
    rows = []
    last_good = w.copy()

    def record(step, train_loss):
        row = {"iter": step, "train_loss": train_loss}
        if val is not None:
            row.update({f"val_{k}": v for k, v in evaluate_loss(_snapshot(), val, h["input"]).items()})
        rows.append(row)
        log.info("iter %d %s", step, row)

    def _snapshot():
        return dataclasses.replace(w, params={k: t.data for k, t in params.items()})

    for step, idx in enumerate(batch_order(len(train), h["batch"], h["iters"], h["seed"])):
        b = data.take(idx)
        x = norm.apply(b.rgb) if h["input"] == "native" else white_input(b, norm)
        try:
            loss = batch_loss(params, b, x, w.output_mode)
            loss.backward()
        except gc.NonFiniteError as exc:
            raise DivergenceError(f"non-finite loss at iter {step}", last_good, rows) from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at iter {step}", last_good, rows)
        lr = DTYPE(lr_at(step, h))
        scale = DTYPE(1.0)
        if h["grad_clip"] > 0:
            gnorm = float(np.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum()) for t in params.values())))
            scale = DTYPE(min(1.0, h["grad_clip"] / max(gnorm, 1e-12)))
        for t in params.values():
            if t.grad is not None:
                t.data = t.data - lr * scale * t.grad
                t.grad = None
        if h["log_every"] and step % h["log_every"] == 0:
            last_good = _snapshot().copy()
            record(step, value)
    final = _snapshot().copy()
    if h["log_every"]:
        record(h["iters"], None)
    final.hyper = {k: h[k] for k in DEFAULT_TRAIN}
    return final, rows


def train_depthnet(train: list, val: list, hyper: dict | None = None, output_mode: str = "depth",
                   init_seed: int | None = None) -> tuple:
    """Plain SGD on the total loss over foreground pixels, native backgrounds as input."""
    h = {**DEFAULT_TRAIN, **(hyper or {})}
    w = init_depthnet(h["seed"] if init_seed is None else init_seed, output_mode)
    return _sgd_loop(w, train, val, h)


def finetune_depthnet(weights: DepthNetWeights, train: list, val: list | None = None, hyper: dict | None = None) -> tuple:
    """Same loop as training, started from ``weights`` (white backgrounds by default)."""
    h = {**DEFAULT_TRAIN, "input": "white", **(hyper or {})}
    if h["iters"] == 0:
        return weights.copy(), []
    return _sgd_loop(weights, train, val or [], h)


# ---------------------------------------------------------------- IO

def save_weights(weights: DepthNetWeights, path) -> None:
    path = Path(path)
    formats.write_container(path, WEIGHT_MAGIC, WEIGHT_VERSION, {n: weights.params[n] for n, _ in ARCHITECTURE})
    formats.write_json(sidecar_path(path), {
        "output_mode": weights.output_mode,
        "normalization": weights.normalization.to_dict(),
        "hyper": weights.hyper,
        "param_count": PARAM_COUNT,
    })


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_weights(path) -> DepthNetWeights:
    tensors, _ = formats.read_container(path, WEIGHT_MAGIC, WEIGHT_VERSION, what="weight file")
    side = sidecar_path(path)
    meta = formats.read_json(side) if side.exists() else {}
    norm = meta.get("normalization", {})
    return DepthNetWeights(
        params=tensors,
        output_mode=meta.get("output_mode", "depth"),
        normalization=NormalizationSpec(tuple(norm.get("mean", (0.5,) * 3)), tuple(norm.get("std", (0.5,) * 3))),
        hyper=meta.get("hyper", {}),
    )
