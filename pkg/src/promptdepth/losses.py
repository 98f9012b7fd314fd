"""Depth losses and geometry shared by network training, finetuning and prompt learning.

Spatial maps are ``[..., H, W]``; leading axes are treated as a batch and every
loss returns one value per leading index. All losses are restricted to the
foreground set V given as a boolean mask.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import gradcore as gc
from .gradcore import DTYPE, Tensor

DISPARITY_FLOOR = 0.05
MEAN_DEPTH = 5.0


class DegenerateDisparityWarning(RuntimeWarning):
    pass


def _spatial(mask) -> np.ndarray:
    return np.asarray(mask, dtype=bool)


def _count(v: np.ndarray) -> np.ndarray:
    n = v.sum(axis=(-2, -1))
    if (n == 0).any():
        raise ValueError("empty foreground set V")
    return n


# ---------------------------------------------------------------- disparity

def disparity_to_depth(disparity, fg_mask=None) -> Tensor:
    """Min-max normalize disparity, floor at 0.05 and invert: depth in [1, 20].

    min/max are taken over the whole map unless ``fg_mask`` is given. A
    constant map maps to depth 20 everywhere and emits a warning.
    """
    d = gc.as_tensor(disparity)
    axes = (-2, -1)
    lo = gc.reduce("min", d, axis=axes, mask=fg_mask, keepdims=True)
    hi = gc.reduce("max", d, axis=axes, mask=fg_mask, keepdims=True)
    span = hi - lo
    flat = span.data <= 0
    if flat.any():
        warnings.warn("constant disparity map; depth falls back to 1/0.05", DegenerateDisparityWarning, stacklevel=2)
        span = gc.where_mask(~flat, span, np.ones_like(span.data))
    normalized = gc.clip((d - lo) / span, DISPARITY_FLOOR, np.inf)
    return gc.div(1.0, normalized)


# ---------------------------------------------------------------- si-RMSE

def optimal_scale(pred, gt, mask) -> np.ndarray:
    """Closed-form least-squares scale ``sum(D D*) / sum(D^2)`` over V (float64)."""
    d = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    g = np.where(mask, np.asarray(gt, dtype=np.float64), 0.0)
    v = _spatial(mask)
    _count(v)
    den = np.where(v, d * d, 0).sum(axis=(-2, -1))
    if (den <= 0).any():
        raise ValueError("all-zero prediction on V")
    return np.where(v, d * g, 0).sum(axis=(-2, -1)) / den


def si_rmse(pred, gt, mask) -> Tensor:
    """Scale-invariant RMSE over V, one value per leading index.

    Evaluated in float64. The backward pass uses the closed-form scale: at the
    minimizing s the partial derivative w.r.t. s vanishes, so only the explicit
    dependence on the prediction contributes.
    """
    p = gc.as_tensor(pred)
    v = _spatial(mask)
    n = _count(v).astype(np.float64)
    d = p.data.astype(np.float64)
    g = np.where(v, np.asarray(gt, dtype=np.float64), 0.0)
    s = optimal_scale(d, g, v)
    sb = s[..., None, None]
    resid = np.where(v, sb * d - g, 0.0)
    loss = np.sqrt((resid * resid).sum(axis=(-2, -1)) / n)

    def backward(gout):
        safe = np.where(loss > 0, loss, 1.0)
        coef = np.where(loss > 0, np.asarray(gout, dtype=np.float64) / (safe * n), 0.0)
        return ((coef[..., None, None] * sb * resid).astype(DTYPE),)

    return gc._make(loss, (p,), backward, "si_rmse")


def si_rmse_reference(pred, gt, mask) -> Tensor:
    """si-RMSE assembled from generic primitives (independent of the fused op)."""
    p = gc.as_tensor(pred)
    v = _spatial(mask)
    g = np.where(v, np.asarray(gt, dtype=DTYPE), 0).astype(DTYPE)
    axes = (-2, -1)
    num = gc.sum(p * g, axis=axes, mask=v, keepdims=True)
    den = gc.sum(gc.square(p), axis=axes, mask=v, keepdims=True)
    resid = p * (num / den) - g
    return gc.sqrt(gc.mean(gc.square(resid), axis=axes, mask=v))


# ---------------------------------------------------------------- normals

def pixel_rays(intrinsics, shape=None) -> np.ndarray:
    """``K^-1 [u+0.5, v+0.5, 1]`` for every pixel, [H, W, 3] float32."""
    return np.asarray(intrinsics.rays(), dtype=DTYPE)


def stencil_valid(mask) -> np.ndarray:
    """Pixels whose 4-neighbour stencil lies inside V (borders excluded)."""
    v = _spatial(mask)
    out = np.zeros_like(v)
    inner = v[..., 1:-1, 1:-1]
    inner = inner & v[..., 1:-1, 2:] & v[..., 1:-1, :-2] & v[..., 2:, 1:-1] & v[..., :-2, 1:-1]
    out[..., 1:-1, 1:-1] = inner
    return out


def normals_from_depth(depth, rays, mask):
    """Unit normals [..., H, W, 3] from unprojected depth, plus their validity mask.

    Tangents are central differences along u and v; the normal is
    ``-normalize(dP/du x dP/dv)``, which faces the camera for any visible,
    non-folded surface (N_z < 0 for fronto-parallel geometry).
    """
    d = gc.as_tensor(depth)
    r = np.asarray(rays, dtype=DTYPE)
    lead = d.ndim - 2
    if r.ndim == 3 and lead:
        r = np.broadcast_to(r, d.shape + (3,))
    pts = gc.reshape(d, d.shape + (1,)) * r
    ell = (slice(None),) * lead
    du = pts[ell + (slice(1, -1), slice(2, None))] - pts[ell + (slice(1, -1), slice(None, -2))]
    dv = pts[ell + (slice(2, None), slice(1, -1))] - pts[ell + (slice(None, -2), slice(1, -1))]

    def comp(t, i):
        return t[..., i:i + 1]

    ux, uy, uz = comp(du, 0), comp(du, 1), comp(du, 2)
    vx, vy, vz = comp(dv, 0), comp(dv, 1), comp(dv, 2)
    cross = gc.concat([uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx], axis=-1)
    norm2 = gc.sum(gc.square(cross), axis=-1, keepdims=True)
    valid = stencil_valid(mask)
    nondegenerate = np.zeros_like(valid)
    nondegenerate[..., 1:-1, 1:-1] = norm2.data[..., 0] > 1e-20
    valid &= nondegenerate
    inner_valid = valid[..., 1:-1, 1:-1][..., None]
    safe = gc.where_mask(inner_valid, norm2, np.ones_like(norm2.data))
    unit = -(cross / gc.sqrt(safe))
    unit = gc.where_mask(inner_valid, unit, np.zeros_like(unit.data))
    widths = [(0, 0)] * lead + [(1, 1), (1, 1), (0, 0)]
    return gc.pad(unit, widths), valid


def cos_sim_loss(normals, normals_gt, mask) -> Tensor:
    """Mean over V of ``1/2 - 1/2 N . N*``; one value per leading index."""
    n = gc.as_tensor(normals)
    ngt = np.asarray(normals_gt.data if isinstance(normals_gt, Tensor) else normals_gt, dtype=DTYPE)
    v = _spatial(mask)
    _count(v)
    for arr in (n.data, ngt):
        lengths = np.linalg.norm(arr[v], axis=-1)
        if lengths.size and np.abs(lengths - 1.0).max() > 1e-3:
            raise ValueError("cos_sim_loss expects unit normals on V")
    dot = gc.sum(n * ngt, axis=-1)
    return gc.mean(0.5 - 0.5 * dot, axis=(-2, -1), mask=v)


def total_loss(pred, gt, rays, mask, reduce_batch: bool = True) -> Tensor:
    """si-RMSE + normal cosine loss with unit weights, over V.

    ``gt`` must be finite on V (background values are ignored). Returns the
    batch mean unless ``reduce_batch`` is false.
    """
    v = _spatial(mask)
    gt = np.where(v, np.asarray(gt, dtype=DTYPE), 0).astype(DTYPE)
    si = si_rmse(pred, gt, v)
    n_pred, valid_pred = normals_from_depth(pred, rays, v)
    n_gt, valid_gt = normals_from_depth(Tensor(np.where(v, gt, 1).astype(DTYPE)), rays, v)
    v_normals = valid_pred & valid_gt
    cos = cos_sim_loss(n_pred, n_gt.data, v_normals)
    per_sample = si + cos
    return gc.mean(per_sample) if reduce_batch else per_sample


def normalize_mean5(depth, mask) -> np.ndarray:
    """Scale each map so its mean over V equals 5."""
    v = _spatial(mask)
    n = _count(v)
    d = np.asarray(depth, dtype=np.float64)
    mean = np.where(v, d, 0).sum(axis=(-2, -1)) / n
    if (mean <= 0).any():
        raise ValueError("foreground mean depth must be positive")
    return (d * (MEAN_DEPTH / mean)[..., None, None]).astype(DTYPE)
