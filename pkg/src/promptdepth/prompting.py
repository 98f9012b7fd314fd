"""Background prompts: parameterizations, compositing, learning and inference.

A prompt is a background placed behind the segmented object before the frozen
depth network sees it. Three trainable forms exist:

* ``PromptSpectrum`` - one complex spectrum decoded by an inverse FFT (1-BG)
* ``PromptImage``    - one raw pre-sigmoid image (image-space ablation)
* ``PNetWeights``    - a small U-Net mapping the object mask to a spectrum
"""

from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import depthnet as dn
from . import formats
from . import gradcore as gc
from . import losses
from .depthnet import Batch, DepthNetWeights, NormalizationSpec
from .gradcore import DTYPE, Tensor

log = logging.getLogger(__name__)

# Calibrated once (scripts/calibrate_gain.py) so the 64x64 pre-sigmoid image has std ~0.5.
ONE_OVER_F_GAIN = 9.03
IMAGE_INIT_STD = 0.1

PROMPT_MAGIC = b"PDPR"
PROMPT_VERSION = 1
KIND_CODES = {"unconditional_spectrum": 0, "unconditional_image": 1, "pnet": 2}
BASELINE_KINDS = ("white", "random_noise", "textured", "original")

PNET_ENC = [(1, 16), (16, 32), (32, 64)]
PNET_DEC = [(128, 32), (64, 16), (32, 16)]


class PromptDivergence(RuntimeError):
    def __init__(self, message, best=None, log_rows=None):
        super().__init__(message)
        self.best = best
        self.log_rows = log_rows or []


# ---------------------------------------------------------------- representations

@dataclass
class PromptSpectrum:
    real: np.ndarray  # [3,H,W]
    imag: np.ndarray

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=DTYPE)
        self.imag = np.asarray(self.imag, dtype=DTYPE)
        if self.real.shape != self.imag.shape or self.real.ndim != 3 or self.real.shape[0] != 3:
            raise ValueError("spectrum parts must both be [3,H,W]")
        h, w = self.real.shape[1:]
        if not (gc._is_pow2(h) and gc._is_pow2(w)):
            raise ValueError("spectrum resolution must be a power of two")
        if not (np.isfinite(self.real).all() and np.isfinite(self.imag).all()):
            raise ValueError("non-finite spectrum")

    @property
    def resolution(self) -> tuple:
        return self.real.shape[1:]

    def copy(self) -> "PromptSpectrum":
        return PromptSpectrum(self.real.copy(), self.imag.copy())


@dataclass
class PromptImage:
    """Pre-sigmoid background image [3,H,W]."""

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=DTYPE)

    def copy(self) -> "PromptImage":
        return PromptImage(self.raw.copy())


@dataclass
class PNetWeights:
    params: dict
    bias: PromptSpectrum | PromptImage | None = None
    input_kind: str = "mask"  # or "image"
    image_space: bool = False

    def __post_init__(self):
        dn.check_shapes(self.params, pnet_architecture(self.input_kind, self.image_space))

    def copy(self) -> "PNetWeights":
        return dataclasses.replace(self, params={k: v.copy() for k, v in self.params.items()},
                                   bias=None if self.bias is None else self.bias.copy())


def pnet_architecture(input_kind: str = "mask", image_space: bool = False) -> list:
    enc = [(1 if input_kind == "mask" else 3, 16)] + PNET_ENC[1:]
    return dn.conv_table("pnet.", enc, PNET_DEC, 16, 3 if image_space else 6)


# ---------------------------------------------------------------- initialization

def frequency_magnitude(h: int, w: int) -> np.ndarray:
    """``sqrt((u'/H)^2 + (v'/W)^2)`` with signed integer frequency indices."""
    fu = np.fft.fftfreq(h)[:, None]  # u'/H
    fv = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fu * fu + fv * fv)


def one_over_f_amplitude(h: int, w: int, gain: float = ONE_OVER_F_GAIN) -> np.ndarray:
    f_min = 1.0 / max(h, w)
    return gain / np.maximum(frequency_magnitude(h, w), f_min)


def init_spectrum_one_over_f(seed: int, h: int = 64, w: int = 64, gain: float = ONE_OVER_F_GAIN) -> PromptSpectrum:
    if not (gc._is_pow2(h) and gc._is_pow2(w)):
        raise ValueError("prompt resolution must be a power of two")
    rng = np.random.default_rng(seed)
    amp = one_over_f_amplitude(h, w, gain)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(3, h, w))
    return PromptSpectrum(amp * np.cos(phase), amp * np.sin(phase))


def init_image_gaussian(seed: int, h: int = 64, w: int = 64, std: float = IMAGE_INIT_STD) -> PromptImage:
    rng = np.random.default_rng(seed)
    return PromptImage(rng.normal(0.0, std, size=(3, h, w)))


def init_pnet(seed: int, h: int = 64, w: int = 64, input_kind: str = "mask", no_bias: bool = False,
              image_space: bool = False) -> PNetWeights:
    """Kaiming encoder/decoder, zero head; bias set to the unconditional initialization."""
    rng = np.random.default_rng(seed)
    params = dn.kaiming_init(pnet_architecture(input_kind, image_space), rng)
    params["pnet.head.w"][:] = 0.0
    bias = None
    if not no_bias:
        bias = init_image_gaussian(seed, h, w) if image_space else init_spectrum_one_over_f(seed, h, w)
    return PNetWeights(params, bias, input_kind, image_space)


# ---------------------------------------------------------------- decoding and compositing

def spectrum_to_background(real, imag, norm: NormalizationSpec) -> Tensor:
    """``phi(sigmoid(ifft2(real + i imag)))``; works on [3,H,W] or [N,3,H,W]."""
    return norm.apply(gc.sigmoid(gc.ifft2(real, imag)))


def image_to_background(raw, norm: NormalizationSpec) -> Tensor:
    return norm.apply(gc.sigmoid(raw))


def _as_batched(b: Tensor) -> Tensor:
    return gc.reshape(b, (1,) + b.shape) if b.ndim == 3 else b


@dataclass
class CompositeInput:
    composite: Tensor  # [N,3,H,W], network-normalized
    mask: np.ndarray  # [N,H,W]
    provenance: str


def composite(image, mask, background_normalized, norm: NormalizationSpec, provenance: str = "learned_unconditional") -> CompositeInput:
    """Replace background pixels: ``C = M phi(I) + (1 - M) B``, exact per pixel."""
    img = np.asarray(image, dtype=DTYPE)
    m = np.asarray(mask, dtype=bool)
    single = img.ndim == 3
    if single:
        img, m = img[None], m[None]
    b = _as_batched(gc.as_tensor(background_normalized))
    if img.shape[-2:] != m.shape[-2:] or b.shape[-3:] != img.shape[-3:]:
        raise ValueError(f"shape mismatch: image {img.shape}, mask {m.shape}, background {b.shape}")
    fg = norm.apply(img)
    c = gc.where_mask(m[:, None], fg, b)
    if single:
        c = gc.reshape(c, c.shape[1:])
        m = m[0]
    return CompositeInput(c, m, provenance)


def additive_composite(image, mask, background_normalized, norm: NormalizationSpec) -> CompositeInput:
    """``clip(phi(I) + B - phi(0.5), phi(0), phi(1))`` at every pixel, object included."""
    img = np.asarray(image, dtype=DTYPE)
    m = np.asarray(mask, dtype=bool)
    b = gc.as_tensor(background_normalized)
    if img.ndim == 4:
        b = _as_batched(b)
    if b.shape[-3:] != img.shape[-3:] or m.shape[-2:] != img.shape[-2:]:
        raise ValueError(f"shape mismatch: image {img.shape}, mask {m.shape}, background {b.shape}")
    stat = (1,) * (img.ndim - 3) + (3, 1, 1)
    mid = norm.apply(np.full((3, 1, 1), 0.5, dtype=DTYPE)).reshape(stat)
    c = gc.clip(b + norm.apply(img) - mid, norm.low().reshape(stat), norm.high().reshape(stat))
    return CompositeInput(c, m, "learned_additive")


# ---------------------------------------------------------------- prompt application

def prompt_background(prompt, batch_mask: np.ndarray, norm: NormalizationSpec, tensors=None, image=None) -> Tensor:
    """Normalized background for a batch; ``tensors`` overrides trainable leaves."""
    if isinstance(prompt, PromptSpectrum):
        real, imag = tensors if tensors else (prompt.real, prompt.imag)
        return spectrum_to_background(real, imag, norm)
    if isinstance(prompt, PromptImage):
        raw = tensors[0] if tensors else prompt.raw
        return image_to_background(raw, norm)
    if isinstance(prompt, PNetWeights):
        return pnet_background(prompt, batch_mask, norm, tensors, image)
    raise TypeError(f"not a learnable prompt: {type(prompt).__name__}")


def pnet_input(w: PNetWeights, mask: np.ndarray, image=None, norm: NormalizationSpec | None = None) -> np.ndarray:
    m = np.asarray(mask, dtype=DTYPE)[:, None]
    if w.input_kind == "mask":
        return m
    if image is None or norm is None:
        raise ValueError("image-input PNet needs the object image")
    return norm.apply(np.asarray(image, dtype=DTYPE)) * m


def pnet_raw(w: PNetWeights, mask, tensors=None, image=None, norm=None):
    """Head output plus bias: ``(real, imag)`` spectra, or a raw image in image-space mode."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
        image = None if image is None else np.asarray(image)[None]
    p = tensors["params"] if tensors else {k: Tensor(v) for k, v in w.params.items()}
    bias = tensors["bias"] if tensors else _bias_tensors(w.bias)
    x = Tensor(pnet_input(w, mask, image, norm))
    if x.shape[-2:] != mask.shape[-2:] or x.shape[-1] % 8:
        raise ValueError(f"PNet input shape {x.shape} unsupported")
    out = dn.unet_forward(p, x, "pnet.", len(PNET_ENC))
    if w.image_space:
        raw = out if bias is None else out + gc.reshape(bias[0], (1,) + bias[0].shape)
        return (raw,)
    real, imag = out[:, 0:3], out[:, 3:6]
    if bias is not None:
        real = real + gc.reshape(bias[0], (1,) + bias[0].shape)
        imag = imag + gc.reshape(bias[1], (1,) + bias[1].shape)
    return real, imag


def _bias_tensors(bias):
    if bias is None:
        return None
    if isinstance(bias, PromptSpectrum):
        return (Tensor(bias.real), Tensor(bias.imag))
    return (Tensor(bias.raw),)


def pnet_forward(w: PNetWeights, mask, image=None, norm=None) -> PromptSpectrum | PromptImage:
    """Predict the prompt for a single mask [H,W]."""
    parts = pnet_raw(w, mask, image=image, norm=norm)
    if w.image_space:
        return PromptImage(parts[0].data[0])
    return PromptSpectrum(parts[0].data[0], parts[1].data[0])


def pnet_background(w: PNetWeights, mask, norm, tensors=None, image=None) -> Tensor:
    parts = pnet_raw(w, mask, tensors, image, norm)
    if w.image_space:
        return image_to_background(parts[0], norm)
    return spectrum_to_background(parts[0], parts[1], norm)


def build_input(prompt, batch: Batch, norm: NormalizationSpec, additive: bool = False, tensors=None,
                seed: int = 0) -> CompositeInput:
    """Network input for ``batch`` under a learned prompt or a baseline background kind."""
    if isinstance(prompt, str):
        return baseline_input(prompt, batch, norm, seed)
    bg = prompt_background(prompt, batch.mask, norm, tensors, batch.rgb)
    if additive:
        return additive_composite(batch.rgb, batch.mask, bg, norm)
    kind = "learned_conditional" if isinstance(prompt, PNetWeights) else "learned_unconditional"
    return composite(batch.rgb, batch.mask, bg, norm, kind)


def checker_image(h: int, w: int, period: int = 8) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    chk = ((yy // period + xx // period) % 2).astype(DTYPE)
    light, dark = np.array([0.85, 0.8, 0.7], DTYPE), np.array([0.3, 0.35, 0.45], DTYPE)
    return (light[:, None, None] * (1 - chk) + dark[:, None, None] * chk).astype(DTYPE)


def baseline_input(kind: str, batch: Batch, norm: NormalizationSpec, seed: int = 0) -> CompositeInput:
    n, _, h, w = batch.rgb.shape
    if kind == "original":
        return CompositeInput(Tensor(norm.apply(batch.rgb)), batch.mask, kind)
    if kind == "white":
        bg = np.ones((n, 3, h, w), dtype=DTYPE)
    elif kind == "random_noise":
        bg = np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 3, h, w)).astype(DTYPE)
    elif kind == "textured":
        bg = np.broadcast_to(checker_image(h, w), (n, 3, h, w))
    else:
        raise ValueError(f"unknown baseline background {kind!r}")
    return composite(batch.rgb, batch.mask, Tensor(norm.apply(bg)), norm, kind)


# ---------------------------------------------------------------- learning

# Spectrum gradients carry the 1/(H W) of the inverse DFT, hence the large ``lr``;
# ``lr_image`` is the matching step for pixel-space prompts at 64x64 (2e6 / 4096).
DEFAULT_PROMPT = {"iters": 3000, "batch": 8, "lr": 2e6, "lr_net": 1e3, "lr_image": 500.0, "anneal_iters": 600,
                  "anneal_factor": 0.1, "seed": 0, "log_every": 100}


def _leaves(prompt):
    """Trainable leaves, ``(leaf, lr_key)`` pairs, and a rebuild function."""
    if isinstance(prompt, PromptSpectrum):
        leaves = (Tensor(prompt.real, True), Tensor(prompt.imag, True))
        return leaves, [(t, "lr") for t in leaves], lambda: PromptSpectrum(leaves[0].data, leaves[1].data)
    if isinstance(prompt, PromptImage):
        leaves = (Tensor(prompt.raw, True),)
        return leaves, [(leaves[0], "lr_image")], lambda: PromptImage(leaves[0].data)
    params = {k: Tensor(v, True) for k, v in prompt.params.items()}
    bias = None
    if prompt.bias is not None:
        bias = tuple(Tensor(t.data, True) for t in _bias_tensors(prompt.bias))
    bias_lr = "lr_image" if prompt.image_space else "lr"
    flat = [(t, "lr_net") for t in params.values()] + [(t, bias_lr) for t in bias or ()]

    def rebuild():
        if bias is None:
            b = None
        elif prompt.image_space:
            b = PromptImage(bias[0].data)
        else:
            b = PromptSpectrum(bias[0].data, bias[1].data)
        return PNetWeights({k: t.data for k, t in params.items()}, b, prompt.input_kind, prompt.image_space)

    return {"params": params, "bias": bias}, flat, rebuild


def _learn(frozen: DepthNetWeights, samples, prompt, hyper: dict, additive: bool = False) -> tuple:
    h = {**DEFAULT_PROMPT, **(hyper or {})}
    data = samples if isinstance(samples, Batch) else dn.make_batch(samples)
    if len(data) < h["batch"]:
        raise ValueError(f"need at least {h['batch']} samples, got {len(data)}")
    before = frozen.fingerprint()
    net = frozen.tensors(False)
    norm = frozen.normalization
    tensors, flat, rebuild = _leaves(prompt)
    rows, running = [], []
    best, best_loss = prompt.copy(), np.inf
    for step, idx in enumerate(dn.batch_order(len(data), h["batch"], h["iters"], h["seed"])):
        b = data.take(idx)
        try:
            c = build_input(prompt, b, norm, additive, tensors)
            pred = dn.predict_depth(net, c.composite, frozen.output_mode)
            loss = losses.total_loss(pred, b.gt, b.rays, b.mask)
            loss.backward()
        except gc.NonFiniteError as exc:
            raise PromptDivergence(f"non-finite loss at iter {step}", best, rows) from exc
        value = float(loss.data)
        running.append(value)
        rates = {k: DTYPE(dn.lr_at(step, {**h, "lr": h[k]})) for k in ("lr", "lr_net", "lr_image")}
        for t, key in flat:
            if t.grad is not None:
                t.data = t.data - rates[key] * t.grad
                t.grad = None
        if h["log_every"] and (step + 1) % h["log_every"] == 0:
            mean_loss = float(np.mean(running))
            rows.append({"iter": step + 1, "train_loss": mean_loss})
            log.info("prompt iter %d loss %.4f", step + 1, mean_loss)
            if mean_loss < best_loss:
                best, best_loss = rebuild(), mean_loss
            running = []
    if frozen.fingerprint() != before:
        raise AssertionError("frozen depth network weights changed during prompt learning")
    return rebuild(), rows


def learn_prompt_unconditional(frozen: DepthNetWeights, samples, hyper: dict | None = None,
                               additive: bool = False, image_space: bool = False) -> tuple:
    """Learn one background shared by all inputs; returns ``(prompt, log_rows)``."""
    h = {**DEFAULT_PROMPT, **(hyper or {})}
    data = samples if isinstance(samples, Batch) else dn.make_batch(samples)
    res = data.rgb.shape[-2:]
    init = init_image_gaussian(h["seed"], *res) if image_space else init_spectrum_one_over_f(h["seed"], *res)
    if h["iters"] == 0:
        return init, []
    return _learn(frozen, data, init, h, additive)


def learn_prompt_conditional(frozen: DepthNetWeights, samples, hyper: dict | None = None,
                             image_input: bool = False, no_bias: bool = False, image_space: bool = False) -> tuple:
    """Learn a PNet predicting the background from the mask (or masked image)."""
    h = {**DEFAULT_PROMPT, **(hyper or {})}
    data = samples if isinstance(samples, Batch) else dn.make_batch(samples)
    res = data.rgb.shape[-2:]
    init = init_pnet(h["seed"], *res, input_kind="image" if image_input else "mask",
                     no_bias=no_bias, image_space=image_space)
    if h["iters"] == 0:
        return init, []
    return _learn(frozen, data, init, h)


# ---------------------------------------------------------------- inference

def predict_batch(frozen: DepthNetWeights, prompt, batch: Batch, additive: bool = False, seed: int = 0) -> np.ndarray:
    """Object-depth predictions [N,H,W] for a batch (raw network depth off the object)."""
    c = build_input(prompt, batch, frozen.normalization, additive, seed=seed)
    return dn.predict_depth(frozen.tensors(False), c.composite, frozen.output_mode).data


def infer_object_depth(frozen: DepthNetWeights, prompt, image, mask, intrinsics, additive: bool = False,
                       seed: int = 0) -> dict:
    """Depth and normals for one object. Background pixels keep the raw output and are flagged."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty object mask")
    rgb = np.asarray(image, dtype=DTYPE)
    if rgb.shape[-1] == 3 and rgb.ndim == 3:
        rgb = rgb.transpose(2, 0, 1)
    rays = losses.pixel_rays(intrinsics)
    batch = Batch(rgb[None], np.zeros((1,) + m.shape, DTYPE), m[None], rays[None])
    c = build_input(prompt, batch, frozen.normalization, additive, seed=seed)
    depth = dn.predict_depth(frozen.tensors(False), c.composite, frozen.output_mode).data[0]
    normals, valid = losses.normals_from_depth(depth, rays, m)
    shown = frozen.normalization.invert(c.composite.data[0]).transpose(1, 2, 0)
    return {"depth": depth, "normals": normals.data, "normals_valid": valid, "object_mask": m,
            "composite": np.clip(shown, 0.0, 1.0)}


# ---------------------------------------------------------------- IO

def save_prompt(prompt, path, config: dict | None = None) -> None:
    path = Path(path)
    if isinstance(prompt, PromptSpectrum):
        kind, tensors = "unconditional_spectrum", {"real": prompt.real, "imag": prompt.imag}
    elif isinstance(prompt, PromptImage):
        kind, tensors = "unconditional_image", {"image": prompt.raw}
    elif isinstance(prompt, PNetWeights):
        kind = "pnet"
        tensors = {n: prompt.params[n] for n, _ in pnet_architecture(prompt.input_kind, prompt.image_space)}
        if isinstance(prompt.bias, PromptSpectrum):
            tensors.update({"bias.real": prompt.bias.real, "bias.imag": prompt.bias.imag})
        elif isinstance(prompt.bias, PromptImage):
            tensors["bias.image"] = prompt.bias.raw
    else:
        raise TypeError(f"cannot save {type(prompt).__name__}")
    formats.write_container(path, PROMPT_MAGIC, PROMPT_VERSION, tensors, struct.pack("<B", KIND_CODES[kind]))
    meta = {"kind": kind, **(config or {})}
    if isinstance(prompt, PNetWeights):
        meta.update({"input_kind": prompt.input_kind, "image_space": prompt.image_space, "no_bias": prompt.bias is None})
    formats.write_json(dn.sidecar_path(path), meta)


def load_prompt(path):
    tensors, extra = formats.read_container(path, PROMPT_MAGIC, PROMPT_VERSION, extra_len=1, what="prompt file")
    code = extra[0]
    kinds = {v: k for k, v in KIND_CODES.items()}
    if code not in kinds:
        raise formats.FormatError(f"unknown prompt kind byte {code}")
    kind = kinds[code]
    if kind == "unconditional_spectrum":
        return PromptSpectrum(tensors["real"], tensors["imag"])
    if kind == "unconditional_image":
        return PromptImage(tensors["image"])
    image_space = tensors["pnet.head.w"].shape[0] == 3
    input_kind = "mask" if tensors["pnet.enc0.w"].shape[1] == 1 else "image"
    bias = None
    if "bias.real" in tensors:
        bias = PromptSpectrum(tensors.pop("bias.real"), tensors.pop("bias.imag"))
    elif "bias.image" in tensors:
        bias = PromptImage(tensors.pop("bias.image"))
    return PNetWeights(tensors, bias, input_kind, image_space)


def load_prompt_or_baseline(spec):
    """A baseline kind name passes through; anything else is a prompt file path."""
    if isinstance(spec, str) and spec in BASELINE_KINDS:
        return spec
    return load_prompt(spec)
