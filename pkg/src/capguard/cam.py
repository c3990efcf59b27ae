"""Class activation maps: GAP-of-gradients weights, rectified weighted sum,
corner-aligned bilinear upsampling, and min-max normalization.

The importance weight of filter k for class c is the spatial mean of
dy^c/dA^k; the map is ReLU(sum_k alpha_k * A^k), so only filters that
push the class score up contribute.
"""

from __future__ import annotations

import numpy as np


def alpha_weights(grads: np.ndarray) -> np.ndarray:
    """Per-filter importance: alpha_k = (1/(H*W)) * sum_ij grads[k,i,j]."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 3:
        raise ValueError(f"expected rank-3 gradient tensor, got rank {grads.ndim}")
    return grads.mean(axis=(1, 2))


def grad_cam(activations: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """cam[i,j] = max(0, sum_k alpha[k] * activations[k,i,j])."""
    activations = np.asarray(activations, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if activations.ndim != 3:
        raise ValueError(f"expected rank-3 activations, got rank {activations.ndim}")
    if alpha.shape != (activations.shape[0],):
        raise ValueError(
            f"filter count mismatch: {len(alpha)} weights for "
            f"{activations.shape[0]} activation maps"
        )
    return np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)


def upsample_bilinear(cam: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with corner-aligned bilinear interpolation.

    Output corners sample input corners exactly; constant maps stay
    constant.  Shrinking is refused — CAMs are only ever blown up to the
    mask resolution.
    """
    cam = np.asarray(cam, dtype=np.float64)
    if cam.ndim != 2:
        raise ValueError(f"expected a 2-d map, got rank {cam.ndim}")
    h, w = cam.shape
    if out_h < h or out_w < w:
        raise ValueError(f"cannot downsample {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return cam.copy()

    def src_coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = src_coords(out_h, h)
    xs = src_coords(out_w, w)
    y0 = np.minimum(ys.astype(int), h - 1)
    x0 = np.minimum(xs.astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    top = cam[np.ix_(y0, x0)] * (1 - fx) + cam[np.ix_(y0, x1)] * fx
    bottom = cam[np.ix_(y1, x0)] * (1 - fx) + cam[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def minmax_normalize(cam: np.ndarray) -> np.ndarray:
    """Rescale to [0,1]; a constant map (no range) collapses to all zeros."""
    cam = np.asarray(cam, dtype=np.float64)
    lo = cam.min()
    hi = cam.max()
    if hi == lo:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)
