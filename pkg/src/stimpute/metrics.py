"""Region-restricted MAE, Pearson correlation and SSIM for gene grids."""

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, EmptyRegion, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _prepare(a, b, region):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    sel = np.ones(a.shape, dtype=bool) if region is None else np.asarray(region) > 0
    if sel.shape != a.shape:
        raise ShapeError("region shape does not match inputs")
    if not sel.any():
        raise EmptyRegion("metric region is empty")
    return a, b, sel


def mae(a, b, region=None):
    a, b, sel = _prepare(a, b, region)
    return float(np.abs(a - b)[sel].mean())


def pcc(a, b, region=None):
    a, b, sel = _prepare(a, b, region)
    x, y = a[sel], b[sel]
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = (dx * dx).sum(), (dy * dy).sum()
    if sxx == 0 or syy == 0:
        raise DegenerateInput("Pearson correlation of a constant input")
    # sqrt of the product keeps pcc(a, a) == 1 exactly
    return float(np.clip((dx * dy).sum() / np.sqrt(sxx * syy), -1.0, 1.0))


def ssim_map(a, b, data_range, size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Local SSIM at every center whose full window fits in the image.

    Returns an array of shape (H - size + 1, W - size + 1); entry (i, j)
    belongs to image position (i + size // 2, j + size // 2).
    """
    g1 = np.exp(-((np.arange(size) - (size - 1) / 2.0) ** 2) / (2 * sigma ** 2))
    g1 /= g1.sum()

    def filt(x):
        x = ndimage.correlate1d(x, g1, axis=0, mode="constant")
        x = ndimage.correlate1d(x, g1, axis=1, mode="constant")
        p = size // 2
        return x[p:x.shape[0] - p, p:x.shape[1] - p]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, region=None, data_range=None):
    """Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03).

    The dynamic range defaults to the spread of ``a`` over the region, so
    ``a`` plays the reference role. The local map is averaged over region
    positions far enough from the border for the window to fit.
    """
    a, b, sel = _prepare(a, b, region)
    h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} inputs")
    if data_range is None:
        data_range = float(a[sel].max() - a[sel].min())
    if data_range <= 0:
        raise DegenerateInput("SSIM reference has zero dynamic range over the region")
    smap = ssim_map(a, b, data_range)
    p = SSIM_WINDOW // 2
    centers = sel[p:h - p, p:w - p]
    if not centers.any():
        raise EmptyRegion("no region position admits a full SSIM window")
    return float(smap[centers].mean())


@dataclass(frozen=True)
class EvalReport:
    mae: float
    pcc: float
    ssim: float
    region_size: int
    gene: str = ""
    dataset: str = ""
    variant: str = ""

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def csv_row(self, header=False):
        fields = ["dataset", "gene", "variant", "mae", "pcc", "ssim", "region_size"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(fields)
        d = asdict(self)
        writer.writerow([d[f] for f in fields])
        return buf.getvalue()


def evaluate(pred, truth, region=None, exclude_sampled=None, dataset="", variant=""):
    """Bundle MAE, PCC and SSIM of ``pred`` against ``truth`` over a region.

    ``region`` defaults to the truth's tissue mask. ``exclude_sampled`` may
    be a SamplingMask whose observed positions are then left out.
    """
    p = getattr(pred, "values", pred)
    t = getattr(truth, "values", truth)
    if np.shape(p) != np.shape(t):
        raise ShapeError(f"prediction {np.shape(p)} and truth {np.shape(t)} differ")
    if region is None:
        region = truth.tissue if hasattr(truth, "tissue") else np.ones(np.shape(t), dtype=bool)
    region = np.asarray(region) > 0
    if exclude_sampled is not None:
        region = region & (exclude_sampled.bits == 0)
    gene = getattr(truth, "gene", "") or getattr(pred, "gene", "")
    return EvalReport(
        mae=mae(t, p, region),
        pcc=pcc(t, p, region),
        ssim=ssim(t, p, region),
        region_size=int(region.sum()),
        gene=gene,
        dataset=dataset,
        variant=variant,
    )
