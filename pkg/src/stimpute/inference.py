"""Whole-slide reconstruction by sliding windows and weighted stitching."""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .network import CDCIN, check_input_size, dc_layer
from .sampling import crop_origins, make_mask
from .st_data import GeneGrid

WEIGHTINGS = ("uniform", "hann")
EPS = 1e-12


def window_weights(size, kind="uniform"):
    """Per-pixel blending weights for one window.

    ``hann`` uses ``sin^2(pi * (i + 0.5) / size)`` along each axis: a Hann
    profile sampled at pixel centers, strictly positive so border pixels of
    the slide keep non-zero weight.
    """
    if kind == "uniform":
        return np.ones((size, size))
    if kind == "hann":
        w = np.sin(np.pi * (np.arange(size) + 0.5) / size) ** 2
        return np.outer(w, w)
    raise ConfigError(f"unknown weighting {kind!r}; expected one of {WEIGHTINGS}")


@dataclass
class SlideCanvas:
    value_sum: np.ndarray
    weight_sum: np.ndarray

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    def add(self, origin, prediction, weights):
        r, c = origin
        h, w = prediction.shape
        self.value_sum[r:r + h, c:c + w] += prediction * weights
        self.weight_sum[r:r + h, c:c + w] += weights


def finalize(canvas):
    """Weighted average per position; returns ``(values, covered)``.

    Uncovered positions get value 0 and ``covered == False``.
    """
    covered = canvas.weight_sum > 0
    values = canvas.value_sum / np.maximum(canvas.weight_sum, EPS)
    return np.where(covered, values, 0.0), covered


def _predict_fn(model):
    if isinstance(model, CDCIN):
        def predict(x, mask):
            with torch.no_grad():
                return model(x, mask)[-1]
        return predict, next(model.parameters()).dtype
    if callable(model):
        return model, torch.float32
    raise ConfigError("model must be a CDCIN or a callable")


def infer_slide(model, sparse, stride, window=64, window_stride=None, weighting="uniform",
                final_dc=None, batch_size=16, return_coverage=False):
    """Reconstruct the full-resolution slide from its sparse (compact) grid.

    Windows of ``window`` pixels (full-resolution units) are enumerated with
    ``window_stride`` (default ``window // 2``) plus a final border-flush
    window, predicted from their compacted inputs, and blended.
    """
    if window % stride:
        raise ConfigError(f"window {window} not divisible by stride {stride}")
    window_stride = window_stride or window // 2
    if window_stride % stride:
        raise ConfigError(f"window stride {window_stride} not divisible by stride {stride}")
    if isinstance(model, CDCIN):
        try:
            check_input_size(model.cfg, window, stride)
        except ShapeError as exc:
            raise ConfigError(f"model cannot run on {window}px windows: {exc}") from exc
        if final_dc is None:
            final_dc = model.cfg.final_dc_at_inference
    final_dc = bool(final_dc)
    predict, dtype = _predict_fn(model)

    h, w = sparse.shape
    H, W = h * stride, w * stride
    if H < window or W < window:
        raise ConfigError(f"slide {H}x{W} smaller than window {window}")
    mask = make_mask(window, window, stride)
    weights = window_weights(window, weighting)
    origins = [(r, c) for r in crop_origins(H, window, window_stride)
               for c in crop_origins(W, window, window_stride)]
    side = window // stride
    canvas = SlideCanvas.empty((H, W))
    values = np.asarray(sparse.values, dtype=np.float64)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        x = np.stack([values[r // stride:r // stride + side, c // stride:c // stride + side]
                      for r, c in chunk])
        preds = predict(torch.from_numpy(x[:, None]).to(dtype), mask)
        preds = preds.detach().cpu().numpy().astype(np.float64)[:, 0]
        for origin, pred in zip(chunk, preds):
            canvas.add(origin, pred, weights)

    out, covered = finalize(canvas)
    if final_dc:
        out = dc_layer(out, values, make_mask(H, W, stride))
    tissue = np.kron(np.asarray(sparse.tissue) > 0, np.ones((stride, stride), dtype=bool))
    grid = GeneGrid.masked(out.astype(np.float32), tissue & covered, sparse.gene)
    return (grid, covered) if return_coverage else grid
