"""Grad-CAM heatmaps over a model's final convolutional feature map."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ClassOutOfRange, DimMismatch, NoConvLayer
from .imageproc import Image, to_grayscale, write_netpbm

# 5-stop jet approximation: blue, cyan, green, yellow, red
JET_STOPS = np.array([[0, 0, 1], [0, 1, 1], [0, 1, 0], [1, 1, 0], [1, 0, 0]], dtype=np.float64)
BLEND = 0.5


@dataclass
class Heatmap:
    values: np.ndarray
    target_class: int
    layer: str


def bilinear_resize(a, out_h, out_w):
    """Resize a 2-D array with half-pixel centres and clamped borders."""
    h, w = a.shape

    def axis(n_out, n_in):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(out_h, h)
    x0, x1, fx = axis(out_w, w)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def grad_cam(model, sample, target_class=None, layer="student.final_features"):
    """Grad-CAM map for one ``[3, h, w]`` sample.

    ``model.forward_features(x)`` must return ``(logits, A)`` where ``A`` is
    the ``[1, K, h', w']`` activation being explained. ``target_class=None``
    explains the predicted class.
    """
    if not hasattr(model, "forward_features"):
        raise NoConvLayer(f"{type(model).__name__} exposes no convolutional feature map")
    x = np.asarray(sample.data if isinstance(sample, T.Tensor) else sample)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise DimMismatch(f"grad_cam takes one [3, h, w] sample, got {x.shape}")
    h, w = x.shape[2:]
    xt = T.Tensor(x, requires_grad=True)
    logits, acts = model.forward_features(xt)
    if acts is None or acts.ndim != 4:
        raise NoConvLayer("forward_features did not return a [1, K, h, w] activation")
    c = logits.shape[1]
    if target_class is None:
        target_class = int(np.argmax(logits.data[0]))
    if not 0 <= target_class < c:
        raise ClassOutOfRange(f"target class {target_class} outside [0, {c})")

    acts.retain_grad()
    score = logits[0, target_class]
    grad = None
    if score.node is not None:
        T.backward(score)
        grad = acts.grad
    a = acts.data[0].astype(np.float64)
    if grad is None:
        grad = np.zeros_like(a)
    else:
        grad = np.asarray(grad, dtype=np.float64)[0]
    alpha = grad.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    up = np.maximum(bilinear_resize(raw, h, w), 0.0)
    peak = up.max()
    values = up / peak if peak > 0 else np.zeros_like(up)
    return Heatmap(values, int(target_class), layer)


def jet(v):
    """Map values in [0, 1] to RGB floats in [0, 1]."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    pos = v * (len(JET_STOPS) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(JET_STOPS) - 2)
    frac = (pos - lo)[..., None]
    return JET_STOPS[lo] * (1 - frac) + JET_STOPS[lo + 1] * frac


def heatmap_gray(values):
    return np.floor(np.clip(values, 0, 1) * 255.0 + 0.5).astype(np.uint8)


def heatmap_overlay(values, gray):
    """Blend the colormap onto a grayscale image.

    The colormap is weighted by the heatmap value, so cold regions show the
    original dimmed by the blend factor and hot regions turn red.
    """
    base = np.repeat(gray.astype(np.float64)[:, :, None], 3, axis=2)
    colour = values[:, :, None] * jet(values) * 255.0
    out = (1 - BLEND) * base + BLEND * colour
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def render_heatmap(hm, original, out_prefix):
    """Write ``<prefix>_gray.pgm`` and ``<prefix>_color.ppm``; returns both paths."""
    img = original if isinstance(original, Image) else Image(original)
    if img.channels == 3:
        img = to_grayscale(img)
    if img.pixels.shape != hm.values.shape:
        raise DimMismatch(f"heatmap {hm.values.shape} does not match image {img.pixels.shape}")
    prefix = str(out_prefix)
    gray_path, color_path = Path(prefix + "_gray.pgm"), Path(prefix + "_color.ppm")
    gray_path.parent.mkdir(parents=True, exist_ok=True)
    write_netpbm(gray_path, Image(heatmap_gray(hm.values)))
    write_netpbm(color_path, Image(heatmap_overlay(hm.values, img.pixels)))
    return gray_path, color_path


def mass_fraction(values, mask):
    """Share of total heatmap mass inside ``mask`` (0 for an all-zero map)."""
    total = float(values.sum())
    return float(values[mask].sum()) / total if total > 0 else 0.0
