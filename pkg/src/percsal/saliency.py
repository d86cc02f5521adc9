"""Turn a perturbation into a saliency map.

Pipeline: channel-averaged squared difference per pixel, optional [0, 1]
normalization, optional multiplication by the normalized input gradient of the
class score (the guided variant), then a zero-padded separable Gaussian blur.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from . import tensor_core as tc
from .model import LayerSet, Network, SINGLE_LABEL, forward_full
from .tensor_core import ShapeError, Tensor

# Blur widths at which the benchmark scores stop improving on full-size
# (224 px) inputs; desk-scale runs want proportionally smaller values.
FULL_SCALE_LOCALIZATION_SIGMA = 20.0
FULL_SCALE_INSERTION_SIGMA = 4.0


@dataclass(frozen=True)
class SaliencyMap:
    values: Tensor  # [H, W], non-negative
    sigma: float
    guided: bool
    layer_set: LayerSet | None = None

    def __post_init__(self):
        arr = self.values.array
        if arr.ndim != 2:
            raise ShapeError(f"saliency map must be 2-D, got shape {arr.shape}")
        if np.any(arr < 0):
            raise ValueError("saliency map values must be non-negative")

    @property
    def array(self) -> np.ndarray:
        return self.values.array


def _as2d(m) -> np.ndarray:
    arr = m.array if isinstance(m, (Tensor, SaliencyMap)) else np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {arr.shape}")
    return arr


def raw_map(x, x_prime) -> Tensor:
    """Per-pixel average over channels of the squared perturbation."""
    xa = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    xpa = x_prime.array if isinstance(x_prime, Tensor) else np.asarray(x_prime, dtype=np.float64)
    if xa.shape != xpa.shape:
        raise ShapeError(f"raw_map: shapes {xa.shape} and {xpa.shape} differ")
    if xa.ndim != 3:
        raise ShapeError(f"raw_map: expected [C,H,W] images, got shape {xa.shape}")
    return Tensor._wrap(((xpa - xa) ** 2).mean(axis=0))


def normalize01(m) -> Tensor:
    """Rescale to [0, 1]; a constant map becomes all zeros."""
    arr = _as2d(m)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return Tensor.zeros(arr.shape)
    return Tensor._wrap((arr - lo) / (hi - lo))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian truncated at radius ceil(3*sigma), normalized to sum 1."""
    r = math.ceil(3.0 * sigma)
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    padded = np.pad(arr, pad)
    win = sliding_window_view(padded, len(kernel), axis=axis)
    return np.tensordot(win, kernel, axes=([win.ndim - 1], [0]))


def blur_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable zero-padded Gaussian blur of a 2-D array; sigma 0 is identity."""
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array(arr, dtype=np.float64)
    k = gaussian_kernel(sigma)
    out = _blur_axis(np.asarray(arr, dtype=np.float64), k, axis=0)
    return _blur_axis(out, k, axis=1)


def gaussian_blur(m, sigma: float) -> Tensor:
    return Tensor._wrap(blur_array(_as2d(m), sigma))


def guided_map(raw, x, net: Network, class_index: int) -> Tensor:
    """Multiply a map by the max-normalized, channel-averaged absolute input
    gradient of the class score; an identically zero gradient yields zeros."""
    if net.mode != SINGLE_LABEL:
        raise ValueError("guided maps are defined for single-label networks")
    arr = _as2d(raw)
    fp = forward_full(net, x, wrt="input")
    score = tc.pick(fp.logits, class_index)
    grads = fp.graph.backward(score)
    grad = grads[fp.input.node_id].array
    g = np.abs(grad).mean(axis=0)
    gmax = g.max()
    if gmax == 0:
        return Tensor.zeros(arr.shape)
    return Tensor._wrap(arr * (g / gmax))


def build(x, x_prime, net: Network, class_index: int, sigma: float,
          guided: bool = False, normalize_first: bool = False,
          layer_set: LayerSet | None = None) -> SaliencyMap:
    """Full map construction: raw squared difference, optional normalization,
    optional guiding, then blur.  ``layer_set`` is provenance only."""
    m = raw_map(x, x_prime)
    if normalize_first:
        m = normalize01(m)
    if guided:
        m = guided_map(m, x, net, class_index)
    m = gaussian_blur(m, sigma)
    return SaliencyMap(values=m, sigma=float(sigma), guided=bool(guided),
                       layer_set=layer_set)


# ---------------------------------------------------------------------------
# persistence: 16-bit PGM for viewing plus an exact float64 sidecar

def write_pgm(m, path) -> None:
    arr = _as2d(m)
    h, w = arr.shape
    hi = arr.max()
    scaled = np.zeros((h, w), dtype=np.uint16) if hi <= 0 else \
        np.round(arr / hi * 65535.0).astype(np.uint16)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(scaled.astype(">u2").tobytes())


def save_map(smap: SaliencyMap, path_base) -> None:
    """Write ``<base>.pgm`` (viewable) and ``<base>.tns`` (exact)."""
    path_base = str(path_base)
    write_pgm(smap.array, path_base + ".pgm")
    meta = {
        "sigma": smap.sigma,
        "guided": smap.guided,
        "layer_set": list(smap.layer_set.ordinals) if smap.layer_set is not None else None,
    }
    container.write_tensors(path_base + ".tns", {"values": smap.array}, meta)


def load_map(path_base) -> SaliencyMap:
    meta, tensors = container.read_tensors(str(path_base) + ".tns")
    ls = meta.get("layer_set")
    return SaliencyMap(
        values=Tensor._wrap(tensors["values"]),
        sigma=float(meta["sigma"]),
        guided=bool(meta["guided"]),
        layer_set=None if ls is None else LayerSet(tuple(ls)),
    )
