"""Procedural ray-cast renderer for synthetic object views.

Camera at the origin looking down +z, image origin top-left, pixel centers at
half-integers. Rays are ``K^-1 [u+0.5, v+0.5, 1]`` so the hit parameter along
a ray equals camera-space depth.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats

NEAR = 0.1
SQ_BISECT_ITERS = 60
SQ_MARCH_STEPS = 96
SPLIT_SALT = {"train": 0, "val": 1_000_000, "ood": 2_000_000}
SAMPLE_FILES = ("rgb.png", "depth.pfm", "mask.png", "meta.json")


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 64.0
    fy: float = 64.0
    cx: float = 32.0
    cy: float = 32.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]], dtype=np.float64)

    def rays(self) -> np.ndarray:
        """Per-pixel ray directions [H, W, 3] with unit z component (float64)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        x, y = np.meshgrid(u, v)
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SceneConfig:
    """Everything needed to render one view; ``render_sample`` is a pure function of it."""

    shape_family: str = "sphere"
    rotation: tuple = (0.0, 0.0, 0.0)  # xyz Euler angles, radians
    translation: tuple = (0.0, 0.0, 5.0)
    shape_params: dict = field(default_factory=lambda: {"radius": 1.0})
    albedo: tuple = (0.8, 0.5, 0.3)
    light: tuple = (-0.3, -0.5, -0.8)  # unit-ish vector pointing toward the light
    background: dict = field(default_factory=lambda: {"kind": "white"})
    seed: int = 0
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    centered: bool = True
    with_object: bool = True

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["intrinsics"] = Intrinsics(**d.get("intrinsics", {}))
        for key in ("rotation", "translation", "albedo", "light"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class Sample:
    rgb: np.ndarray  # [H, W, 3] in [0, 1]
    depth: np.ndarray  # [H, W]; inf where nothing was hit
    mask: np.ndarray  # [H, W] bool
    intrinsics: Intrinsics
    meta: dict

    def validate(self) -> "Sample":
        h, w = self.mask.shape
        if self.rgb.shape != (h, w, 3) or self.depth.shape != (h, w):
            raise ValueError("rgb/depth/mask shapes disagree")
        if (self.intrinsics.height, self.intrinsics.width) != (h, w):
            raise ValueError("intrinsics do not match image size")
        if self.rgb.min() < 0 or self.rgb.max() > 1:
            raise ValueError("rgb outside [0, 1]")
        fg = self.depth[self.mask]
        if not (np.isfinite(fg).all() and (fg > 0).all()):
            raise ValueError("foreground depth must be finite and positive")
        return self


# ---------------------------------------------------------------- geometry

def rotation_matrix(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def intersect_sphere(o, d, center, radius):
    """Nearest forward hit of rays ``o + t d`` with a sphere; returns (t, normal)."""
    oc = o - np.asarray(center, dtype=np.float64)
    a = np.einsum("...i,...i", d, d)
    b = 2.0 * np.einsum("...i,...i", d, oc)
    c = np.einsum("...i,...i", oc, oc) - radius * radius
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = np.where(hit, (-b - sq) / (2 * a), np.inf)
    t = np.where(t > NEAR, t, np.inf)
    p = oc + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    n = np.where(np.isfinite(t)[..., None], p / radius, 0.0)
    return t, n


def intersect_box(o, d, center, half):
    """Slab-method intersection with an axis-aligned box."""
    half = np.asarray(half, dtype=np.float64)
    oc = o - np.asarray(center, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - oc) * inv
        t2 = (half - oc) * inv
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    tlo = np.nan_to_num(tlo, nan=-np.inf)
    thi = np.nan_to_num(thi, nan=np.inf)
    tnear = tlo.max(axis=-1)
    tfar = thi.min(axis=-1)
    hit = (tnear <= tfar) & (tnear > NEAR)
    t = np.where(hit, tnear, np.inf)
    axis = tlo.argmax(axis=-1)
    n = np.zeros(d.shape, dtype=np.float64)
    sgn = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1))[..., 0]
    np.put_along_axis(n, axis[..., None], sgn[..., None], axis=-1)
    n[~hit] = 0.0
    return t, n


def superquadric_f(p, scale, e1, e2):
    """Inside-outside function: negative inside, zero on the surface."""
    a, b, c = scale
    x, y, z = np.abs(p[..., 0] / a), np.abs(p[..., 1] / b), np.abs(p[..., 2] / c)
    xy = x ** (2.0 / e2) + y ** (2.0 / e2)
    return xy ** (e2 / e1) + z ** (2.0 / e1) - 1.0


def superquadric_grad(p, scale, e1, e2):
    a, b, c = scale
    x, y, z = p[..., 0] / a, p[..., 1] / b, p[..., 2] / c
    ax, ay, az = np.abs(x), np.abs(y), np.abs(z)
    xy = ax ** (2.0 / e2) + ay ** (2.0 / e2)
    outer = (2.0 / e1) * np.where(xy > 0, xy, 1.0) ** (e2 / e1 - 1.0)
    gx = outer * np.sign(x) * ax ** (2.0 / e2 - 1.0) / a
    gy = outer * np.sign(y) * ay ** (2.0 / e2 - 1.0) / b
    gz = (2.0 / e1) * np.sign(z) * az ** (2.0 / e1 - 1.0) / c
    return np.stack([gx, gy, gz], axis=-1)


def intersect_superquadric(o, d, center, scale, e1, e2):
    """March the bounding-sphere segment to bracket the first crossing, then bisect."""
    oc = o - np.asarray(center, dtype=np.float64)
    radius = float(np.linalg.norm(scale)) * 1.01
    a = np.einsum("...i,...i", d, d)
    b = 2.0 * np.einsum("...i,...i", d, oc)
    c = np.einsum("...i,...i", oc, oc) - radius * radius
    disc = b * b - 4 * a * c
    cand = disc > 0
    sq = np.sqrt(np.where(cand, disc, 0.0))
    t0 = np.maximum((-b - sq) / (2 * a), NEAR)
    t1 = (-b + sq) / (2 * a)
    cand &= t1 > t0
    t = np.full(d.shape[:-1], np.inf)
    n = np.zeros(d.shape, dtype=np.float64)
    if not cand.any():
        return t, n
    oc_c = np.broadcast_to(oc, d.shape)[cand]
    dc, t0c, t1c = d[cand], t0[cand], t1[cand]
    steps = np.linspace(0.0, 1.0, SQ_MARCH_STEPS + 1)
    ts = t0c[:, None] + (t1c - t0c)[:, None] * steps[None, :]
    f = superquadric_f(oc_c[:, None, :] + ts[..., None] * dc[:, None, :], scale, e1, e2)
    inside = f < 0
    has = inside.any(axis=1)
    first = inside.argmax(axis=1)
    lo_idx = np.maximum(first - 1, 0)
    rows = np.arange(len(first))
    lo = ts[rows, lo_idx]
    hi = ts[rows, first]
    for _ in range(SQ_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        fm = superquadric_f(oc_c + mid[:, None] * dc, scale, e1, e2)
        outside = fm > 0
        lo = np.where(outside, mid, lo)
        hi = np.where(outside, hi, mid)
    th = 0.5 * (lo + hi)
    # rays starting inside the bound at t0 would bracket nothing useful
    has &= first > 0
    th = np.where(has, th, np.inf)
    p = oc_c + np.where(has, th, 0.0)[:, None] * dc
    g = superquadric_grad(p, scale, e1, e2)
    g /= np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    t[cand] = th
    nc = np.zeros_like(dc)
    nc[has] = g[has]
    n[cand] = nc
    return t, n


def _primitive_hits(kind: str, params: dict, o, d, center=(0.0, 0.0, 0.0)):
    if kind == "sphere":
        return intersect_sphere(o, d, center, params["radius"])
    if kind == "box":
        return intersect_box(o, d, center, params["half_extents"])
    if kind == "superquadric":
        return intersect_superquadric(o, d, center, params["scale"], params["e1"], params["e2"])
    raise ValueError(f"unknown primitive {kind!r}")


def object_hits(config: SceneConfig, rays: np.ndarray):
    """Depth (inf on miss) and camera-space unit normals of the object."""
    rot = rotation_matrix(config.rotation)
    trans = np.asarray(config.translation, dtype=np.float64)
    o = -rot.T @ trans
    d = rays @ rot  # row-vector form of R^T d
    fam = config.shape_family
    if fam in ("sphere", "box", "superquadric"):
        t, n = _primitive_hits(fam, config.shape_params, o, d)
    elif fam == "union2":
        t, n = np.full(rays.shape[:-1], np.inf), np.zeros(rays.shape)
        for part in config.shape_params["parts"]:
            tp, np_ = _primitive_hits(part["kind"], part, o, d, center=part["offset"])
            closer = tp < t
            t = np.where(closer, tp, t)
            n = np.where(closer[..., None], np_, n)
    else:
        raise ValueError(f"unknown shape family {fam!r}")
    n_cam = n @ rot.T
    return t, n_cam


def _checker(u, v, period):
    return ((np.floor(u / period) + np.floor(v / period)) % 2).astype(np.float64)


def render_background(config: SceneConfig, rays: np.ndarray, rng: np.random.Generator):
    bg = config.background
    kind = bg["kind"]
    h, w = rays.shape[:2]
    depth = np.full((h, w), np.inf)
    if kind == "white":
        return np.ones((h, w, 3)), depth
    if kind == "noise":
        rgb = np.clip(0.5 + bg.get("sigma", 0.2) * rng.standard_normal((h, w, 3)), 0.0, 1.0)
        return rgb, depth
    c0 = np.asarray(bg.get("color_a", (0.9, 0.9, 0.85)))
    c1 = np.asarray(bg.get("color_b", (0.3, 0.35, 0.4)))
    period = bg.get("scale", 0.5)
    if kind == "checker":
        dist = bg.get("distance", 12.0)
        p = rays * dist
        chk = _checker(p[..., 0], p[..., 1], period)[..., None]
        rgb = (c0 * (1 - chk) + c1 * chk) * bg.get("shade", 0.9)
        depth[:] = dist
        return np.clip(rgb, 0, 1), depth
    if kind == "ground_plane":
        dist = bg.get("distance", 10.0)
        tilt = bg.get("tilt", 0.0)
        normal = np.array([0.0, -np.sin(tilt), -np.cos(tilt)])
        p0 = np.array([0.0, 0.0, dist])
        denom = rays @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (normal @ p0) / denom
        hit = (denom < -1e-9) & (t > NEAR)
        t = np.where(hit, t, np.inf)
        p = np.where(hit[..., None], rays * np.where(hit, t, 0.0)[..., None], 0.0)
        e1 = np.array([1.0, 0.0, 0.0])
        e2 = np.cross(normal, e1)
        chk = _checker((p - p0) @ e1, (p - p0) @ e2, period)[..., None]
        light = _unit(config.light)
        shade = 0.2 + 0.8 * max(0.0, float(normal @ light))
        falloff = np.exp(-0.04 * np.where(hit, t - dist, 0.0))[..., None]
        ground = np.clip((c0 * (1 - chk) + c1 * chk) * shade * falloff, 0, 1)
        sky = np.asarray(bg.get("sky", (0.55, 0.7, 0.9)))
        rgb = np.where(hit[..., None], ground, sky)
        depth = t
        return rgb, depth
    raise ValueError(f"unknown background kind {kind!r}")


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def render_sample(config: SceneConfig) -> Sample:
    """Render RGB, exact depth, mask and intrinsics for one scene."""
    k = config.intrinsics
    rays = k.rays()
    rng = np.random.default_rng(config.seed)
    rgb, depth = render_background(config, rays, rng)
    mask = np.zeros(depth.shape, dtype=bool)
    if config.with_object:
        t, n = object_hits(config, rays)
        mask = np.isfinite(t) & (t < depth)
        if config.centered and not mask.any():
            raise RenderError("object not visible: no ray hits the object")
        lam = np.clip(n @ _unit(config.light), 0.0, None)
        shade = np.clip(0.2 + 0.8 * lam, 0.0, 1.0)[..., None]
        obj_rgb = np.clip(np.asarray(config.albedo) * shade, 0.0, 1.0)
        rgb = np.where(mask[..., None], obj_rgb, rgb)
        depth = np.where(mask, t, depth)
    sample = Sample(
        rgb=rgb.astype(np.float32),
        depth=depth.astype(np.float32),
        mask=mask,
        intrinsics=k,
        meta=config.to_dict(),
    )
    return sample.validate()


def touches_border(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


# ---------------------------------------------------------------- scene sampling

def _sample_primitive(rng, kind):
    if kind == "sphere":
        return {"radius": float(rng.uniform(0.6, 1.1))}
    if kind == "box":
        return {"half_extents": [float(v) for v in rng.uniform(0.35, 0.9, size=3)]}
    if kind == "superquadric":
        return {
            "scale": [float(v) for v in rng.uniform(0.5, 1.0, size=3)],
            "e1": float(rng.uniform(0.3, 1.0)),
            "e2": float(rng.uniform(0.3, 1.0)),
        }
    raise ValueError(kind)


def _sample_background(rng, kinds):
    kind = kinds[int(rng.integers(len(kinds)))]
    colors = {
        "color_a": [float(v) for v in rng.uniform(0.55, 1.0, size=3)],
        "color_b": [float(v) for v in rng.uniform(0.05, 0.45, size=3)],
        "scale": float(rng.uniform(0.3, 1.2)),
    }
    if kind == "ground_plane":
        return {"kind": kind, "distance": float(rng.uniform(9.0, 14.0)),
                "tilt": float(rng.uniform(0.9, 1.35)), **colors}
    if kind == "checker":
        return {"kind": kind, "distance": float(rng.uniform(9.0, 14.0)),
                "shade": float(rng.uniform(0.6, 1.0)), **colors}
    if kind == "noise":
        return {"kind": kind, "sigma": float(rng.uniform(0.1, 0.3))}
    return {"kind": kind}


def sample_scene(split: str, seed: int, intrinsics: Intrinsics | None = None, background: dict | None = None) -> SceneConfig:
    """Draw a scene for ``split`` from ``seed``; retries deterministically until centered."""
    if split not in SPLIT_SALT:
        raise ValueError(f"unknown split {split!r}")
    k = intrinsics or Intrinsics()
    rng = np.random.default_rng(seed)
    for _ in range(100):
        if split == "ood":
            family = "superquadric"
            z = float(rng.choice([rng.uniform(3.6, 4.2), rng.uniform(6.0, 7.0)]))
            xy = rng.uniform(-0.6, 0.6, size=2)
            params = _sample_primitive(rng, family)
            bg_kinds = ["ground_plane", "checker", "noise"]
        else:
            family = ["sphere", "box", "union2"][int(rng.integers(3))]
            z = float(rng.uniform(3.8, 5.2))
            xy = rng.uniform(-0.35, 0.35, size=2)
            if family == "union2":
                parts = []
                for _ in range(2):
                    pk = ["sphere", "box"][int(rng.integers(2))]
                    part = {"kind": pk, **_sample_primitive(rng, pk)}
                    if pk == "sphere":
                        part["radius"] *= 0.75
                    else:
                        part["half_extents"] = [0.75 * v for v in part["half_extents"]]
                    part["offset"] = [float(v) for v in rng.uniform(-0.6, 0.6, size=3)]
                    parts.append(part)
                params = {"parts": parts}
            else:
                params = _sample_primitive(rng, family)
            bg_kinds = ["ground_plane", "checker"]
        rotation = tuple(float(v) for v in rng.uniform(-np.pi, np.pi, size=3))
        albedo = tuple(float(v) for v in rng.uniform(0.25, 0.95, size=3))
        light = _unit([rng.uniform(-0.6, 0.6), rng.uniform(-0.9, -0.2), -1.0])
        bg = dict(background) if background else _sample_background(rng, bg_kinds)
        config = SceneConfig(
            shape_family=family,
            rotation=rotation,
            translation=(float(xy[0]), float(xy[1]), z),
            shape_params=params,
            albedo=albedo,
            light=tuple(float(v) for v in light),
            background=bg,
            seed=int(seed),
            intrinsics=k,
        )
        t, _ = object_hits(config, k.rays())
        hit = np.isfinite(t)
        if hit.sum() >= 0.04 * hit.size and not touches_border(hit):
            return config
    raise RenderError(f"could not draw a centered {split} scene for seed {seed}")


# ---------------------------------------------------------------- disk IO

def save_sample(sample: Sample, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_rgb_png(out / "rgb.png", sample.rgb)
    formats.write_pfm(out / "depth.pfm", sample.depth)
    formats.write_mask_png(out / "mask.png", sample.mask)
    meta = dict(sample.meta)
    meta["intrinsics"] = sample.intrinsics.to_dict()
    formats.write_json(out / "meta.json", meta)


def load_sample(sample_dir) -> Sample:
    d = Path(sample_dir)
    for name in SAMPLE_FILES:
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing sample file: {name} in {d}")
    meta = formats.read_json(d / "meta.json")
    k = Intrinsics(**meta["intrinsics"])
    sample = Sample(
        rgb=formats.read_rgb_png(d / "rgb.png"),
        depth=formats.read_pfm(d / "depth.pfm"),
        mask=formats.read_mask_png(d / "mask.png"),
        intrinsics=k,
        meta=meta,
    )
    return sample.validate()


def generate_dataset(n: int, split: str, out_dir, base_config: dict | None = None) -> dict:
    """Render ``n`` samples with seeds ``salt(split) + i`` and write a manifest."""
    if n < 1:
        raise ValueError("n must be >= 1")
    base = dict(base_config or {})
    k = Intrinsics(**base["intrinsics"]) if "intrinsics" in base else Intrinsics()
    background = base.get("background")
    salt = SPLIT_SALT[split] + int(base.get("seed_offset", 0))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        seed = salt + i
        sample = render_sample(sample_scene(split, seed, k, background))
        rel = f"{split}_{i:05d}"
        save_sample(sample, out / rel)
        entries.append({"path": rel, "seed": seed, "shape_family": sample.meta["shape_family"]})
    manifest = {"split": split, "n": n, "intrinsics": k.to_dict(), "samples": entries}
    formats.write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(root, limit: int | None = None) -> list:
    root = Path(root)
    manifest = formats.read_json(root / "manifest.json")
    entries = manifest["samples"][:limit] if limit else manifest["samples"]
    return [load_sample(root / e["path"]) for e in entries]
