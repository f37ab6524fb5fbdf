"""The nine CAM variants plus heatmap post-processing.

Every method maps a single sample's activation stack A (C, h, w), and for
the gradient-based ones the matching gradient stack G, to a raw 2-D map at
the layer's resolution.  ReLU placement is the distinguishing math of each
variant and is pinned by oracle tests; do not "simplify" it.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-12

CAM_METHODS = (
    "grad_cam",
    "hires_cam",
    "grad_cam_elementwise",
    "grad_cam_pp",
    "xgrad_cam",
    "ablation_cam",
    "eigen_cam",
    "eigen_grad_cam",
    "layer_cam",
)

GRADIENT_FREE_METHODS = ("eigen_cam",)


class CamError(ValueError):
    pass


def _check_pair(a, g):
    if a.shape != g.shape:
        raise CamError(f"activation shape {a.shape} != gradient shape {g.shape}")
    if a.ndim != 3:
        raise CamError(f"expected (C, h, w) stacks, got shape {a.shape}")


def grad_cam(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Channel weights are spatially averaged gradients."""
    _check_pair(a, g)
    w = g.mean(axis=(1, 2))
    return np.maximum(np.einsum("c,chw->hw", w, a, optimize=False), 0.0)


def hires_cam(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Hadamard product of gradients and activations, summed over channels."""
    _check_pair(a, g)
    return np.maximum((g * a).sum(axis=0), 0.0)


def grad_cam_elementwise(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Like hires_cam but each channel product is rectified before the sum."""
    _check_pair(a, g)
    return np.maximum(g * a, 0.0).sum(axis=0)


def grad_cam_pp(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Higher-order coefficients under the exponential-score convention.

    alpha = G^2 / (2 G^2 + sum(A) G^3), with zero-denominator terms set to
    0; channel weight = sum(alpha * relu(G)).
    """
    _check_pair(a, g)
    g2 = g * g
    g3 = g2 * g
    denom = 2.0 * g2 + a.sum(axis=(1, 2), keepdims=True) * g3
    alpha = np.where(denom != 0.0, g2 / np.where(denom != 0.0, denom, 1.0), 0.0)
    w = (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))
    return np.maximum(np.einsum("c,chw->hw", w, a, optimize=False), 0.0)


def xgrad_cam(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradients weighted by sum-normalized activations."""
    _check_pair(a, g)
    norm = a.sum(axis=(1, 2), keepdims=True) + EPS
    w = (a / norm * g).sum(axis=(1, 2))
    return np.maximum(np.einsum("c,chw->hw", w, a, optimize=False), 0.0)


def ablation_cam(a: np.ndarray, rescore, y_c: float, batch_size: int = 32) -> np.ndarray:
    """Channel weights are relative score drops when zeroing each channel.

    `rescore` maps a batch of modified activation stacks (B, C, h, w) to
    class scores (B,); the result is independent of batch_size because each
    modified stack is scored the same way regardless of grouping.
    """
    if a.ndim != 3:
        raise CamError(f"expected (C, h, w) stack, got shape {a.shape}")
    if batch_size < 1:
        raise CamError("batch_size must be >= 1")
    c = a.shape[0]
    scores = np.empty(c)
    for start in range(0, c, batch_size):
        ks = range(start, min(start + batch_size, c))
        batch = np.repeat(a[None, :, :, :], len(ks), axis=0)
        for row, k in enumerate(ks):
            batch[row, k] = 0.0
        scores[list(ks)] = np.asarray(rescore(batch), dtype=np.float64).reshape(len(ks))
    w = (y_c - scores) / (abs(y_c) + EPS)
    return np.maximum(np.einsum("c,chw->hw", w, a, optimize=False), 0.0)


def _leading_projection(m: np.ndarray) -> np.ndarray:
    """Project pixels of the (C, pixels) matrix onto the leading left
    singular direction, sign-fixed so the largest-magnitude element is
    positive."""
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    proj = m.T @ u[:, 0]
    peak = np.argmax(np.abs(proj))
    if proj[peak] < 0.0:
        proj = -proj
    return proj


def eigen_cam(a: np.ndarray) -> np.ndarray:
    """First principal component of the activation stack; class-agnostic."""
    if a.ndim != 3:
        raise CamError(f"expected (C, h, w) stack, got shape {a.shape}")
    c, h, w = a.shape
    proj = _leading_projection(a.reshape(c, h * w))
    return np.maximum(proj.reshape(h, w), 0.0)


def eigen_grad_cam(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """eigen_cam applied to the gradient-weighted activations."""
    _check_pair(a, g)
    return eigen_cam(g * a)


def layer_cam(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Activations weighted by the positive gradient at each location."""
    _check_pair(a, g)
    return np.maximum((np.maximum(g, 0.0) * a).sum(axis=0), 0.0)


def compute_cam(method: str, a: np.ndarray, g: np.ndarray | None = None, *,
                rescore=None, y_c: float | None = None, batch_size: int = 32) -> np.ndarray:
    """Dispatch one method; validates the result is finite."""
    if method not in CAM_METHODS:
        raise CamError(f"unknown CAM method {method!r}")
    if method == "eigen_cam":
        raw = eigen_cam(a)
    elif method == "ablation_cam":
        if rescore is None or y_c is None:
            raise CamError("ablation_cam needs a rescore hook and the base score")
        raw = ablation_cam(a, rescore, y_c, batch_size)
    else:
        if g is None:
            raise CamError(f"{method} needs a gradient stack")
        raw = globals()[method](a, g)
    if not np.isfinite(raw).all():
        raise CamError(f"{method} produced non-finite values")
    return raw


def bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Upsample with half-pixel-center sampling and edge clamping."""
    h, w = a.shape
    if (out_h, out_w) == (h, w):
        return a.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = (1.0 - fx) * a[np.ix_(y0, x0)] + fx * a[np.ix_(y0, x1)]
    bot = (1.0 - fx) * a[np.ix_(y1, x0)] + fx * a[np.ix_(y1, x1)]
    return (1.0 - fy) * top + fy * bot


def postprocess(raw: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Upsample a raw map to input resolution and min-max normalize to [0, 1].

    Degenerate maps: all-zero stays all-zero, a positive constant maps to
    all ones (there is nothing to rank, but the support is active).
    """
    th, tw = target
    if th < raw.shape[0] or tw < raw.shape[1]:
        raise CamError(f"target {target} smaller than raw map {raw.shape}")
    up = bilinear_resize(np.asarray(raw, dtype=np.float64), th, tw)
    lo = up.min()
    hi = up.max()
    if hi == lo:
        return np.ones_like(up) if hi > 0.0 else np.zeros_like(up)
    return (up - lo) / (hi - lo)
