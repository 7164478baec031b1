"""Cascade-weighted L1 losses for the ST and natural-image branches."""

import json
import math
from dataclasses import dataclass

import torch

from .errors import EmptyRegion, NumericalError, ShapeError
from .sampling import downsample

DEFAULT_LAMBDA = 10.0


def _as_batch(x):
    t = torch.as_tensor(x) if not isinstance(x, torch.Tensor) else x
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def cascade_l1(outputs, target, region=None, literal_denominator=False):
    """``sum_k (k/K) * mean_region |output_k - target|``, averaged over the batch.

    ``outputs`` holds the K stage predictions, each shaped like ``target``
    ((B, 1, h, w) tensors or plain 2D arrays). With ``region`` the mean runs
    over region positions only; ``literal_denominator`` keeps the region sum
    but divides by the full patch area instead.
    """
    numpy_in = not isinstance(target, torch.Tensor)
    target = _as_batch(target)
    outs = [_as_batch(o) for o in outputs]
    if not outs:
        raise ShapeError("cascade_l1 needs at least one stage output")
    for o in outs:
        if o.shape != target.shape:
            raise ShapeError(f"output {tuple(o.shape)} does not match target {tuple(target.shape)}")
    area = target.shape[-1] * target.shape[-2]
    if region is not None:
        r = _as_batch(region).to(target.dtype)
        if r.shape[-2:] != target.shape[-2:]:
            raise ShapeError("region shape does not match target")
        count = r.sum(dim=(-2, -1))
        if bool((count == 0).any()):
            raise EmptyRegion("region selects no positions")
        denom = torch.full_like(count, float(area)) if literal_denominator else count
    K = len(outs)
    total = target.new_zeros(())
    for k, o in enumerate(outs, start=1):
        err = (o - target).abs()
        if region is None:
            per_patch = err.mean(dim=(-2, -1))
        else:
            per_patch = (err * r).sum(dim=(-2, -1)) / denom
        total = total + (k / K) * per_patch.mean()
    return float(total) if numpy_in else total


def st_losses(out_m, out_h, x_m, m_h, tissue_m=None, exclude_m=True, exclude_h=True,
              literal_denominator=False):
    """Self-supervised ST pair.

    ``out_m``: stage outputs predicted from the sparser level, compared with
    ``x_m``. ``out_h``: stage outputs at full resolution, compacted under
    ``m_h`` before comparison with ``x_m``. ``tissue_m`` restricts both
    comparisons to in-tissue spots.
    """
    region_m = tissue_m if exclude_m else None
    region_h = tissue_m if exclude_h else None
    l_m = cascade_l1(out_m, x_m, region_m, literal_denominator)
    l_h = cascade_l1([downsample(o, m_h) for o in out_h], x_m, region_h, literal_denominator)
    return l_m, l_h


def gni_losses(out_m, out_h, x_m, x_h):
    """Fully supervised natural-image pair; the dense term compares at full resolution."""
    if x_h is None:
        raise ShapeError("natural-image losses need the dense patch x_h")
    return cascade_l1(out_m, x_m), cascade_l1(out_h, x_h)


def weighted_total(st_m, st_h, gni_m=None, gni_h=None, lam=DEFAULT_LAMBDA):
    total = lam * (st_m + st_h)
    if gni_m is not None:
        total = total + gni_m
    if gni_h is not None:
        total = total + gni_h
    return total


@dataclass(frozen=True)
class LossBreakdown:
    st_sparser: float
    st_dense: float
    gni_sparser: float | None
    gni_dense: float | None
    total: float
    lam: float = DEFAULT_LAMBDA

    def to_json(self, step):
        return json.dumps({"step": int(step), "st_m": self.st_sparser, "st_h": self.st_dense,
                           "gni_m": self.gni_sparser, "gni_h": self.gni_dense, "total": self.total})


def total_loss(st_m, st_h, gni_m=None, gni_h=None, lam=DEFAULT_LAMBDA):
    """``lam * (st_m + st_h) + (gni_m + gni_h)`` as a logged breakdown.

    GNI components may be None when co-training is disabled.
    """
    parts = [float(v) for v in (st_m, st_h, gni_m, gni_h) if v is not None]
    if not all(math.isfinite(v) for v in parts) or not math.isfinite(lam):
        raise NumericalError(f"non-finite loss component in {parts}")
    f = lambda v: None if v is None else float(v)  # noqa: E731
    total = weighted_total(float(st_m), float(st_h), f(gni_m), f(gni_h), float(lam))
    return LossBreakdown(float(st_m), float(st_h), f(gni_m), f(gni_h), float(total), float(lam))

