"""Regular-lattice sampling masks and the array plumbing built on them.

``downsample`` and ``scatter`` index only the trailing two axes, so they work
unchanged on numpy arrays and on batched torch tensors of shape (..., H, W).
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import InvalidFactor, ShapeError

ST, GNI = "st", "gni"


@dataclass(frozen=True)
class SamplingMask:
    height: int
    width: int
    stride: int
    offset: tuple = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "offset", tuple(int(o) for o in self.offset))
        s = self.stride
        if s < 1:
            raise ShapeError("stride must be >= 1")
        if not all(0 <= o < s for o in self.offset):
            raise ShapeError(f"offset {self.offset} outside [0, {s})")
        if self.height % s or self.width % s:
            raise ShapeError(f"{self.height}x{self.width} not divisible by stride {s}")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def compact_shape(self):
        return (self.height // self.stride, self.width // self.stride)

    @cached_property
    def bits(self):
        b = np.zeros(self.shape, dtype=np.uint8)
        b[self.offset[0]::self.stride, self.offset[1]::self.stride] = 1
        b.setflags(write=False)
        return b

    @property
    def slices(self):
        r, c = self.offset
        return (Ellipsis, slice(r, None, self.stride), slice(c, None, self.stride))

    def coarser(self):
        """The same-stride, same-offset mask one level down (M_h -> M_m)."""
        h, w = self.compact_shape
        return SamplingMask(h, w, self.stride, self.offset)

    def to_dict(self):
        return {"height": self.height, "width": self.width,
                "stride": self.stride, "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["height"]), int(d["width"]), int(d["stride"]), tuple(d.get("offset", (0, 0))))


def make_mask(height, width, stride, offset=(0, 0)):
    return SamplingMask(height, width, stride, offset)


def _check(x, m):
    if tuple(x.shape[-2:]) != m.shape:
        raise ShapeError(f"array {tuple(x.shape[-2:])} does not match mask {m.shape}")


def downsample(x, m):
    """Compact the masked positions of ``x`` into an (H/S, W/S) array."""
    _check(x, m)
    return x[m.slices]


def scatter(y, m):
    """Embed a compact array at the masked positions of a zero H x W array."""
    if tuple(y.shape[-2:]) != m.compact_shape:
        raise ShapeError(f"array {tuple(y.shape[-2:])} does not match compact shape {m.compact_shape}")
    shape = tuple(y.shape[:-2]) + m.shape
    if isinstance(y, torch.Tensor):
        out = y.new_zeros(shape)
    else:
        out = np.zeros(shape, dtype=np.asarray(y).dtype)
    out[m.slices] = y
    return out


def upsample(x, factor):
    """Bilinear resize by an integer factor, ``align_corners=False`` convention.

    Pixel centers sit at half-integers, so output pixel ``i`` reads the input
    at ``(i + 0.5) / factor - 0.5`` with edge clamping.
    """
    if int(factor) != factor or factor < 1:
        raise InvalidFactor(f"upsampling factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    is_tensor = isinstance(x, torch.Tensor)
    t = x if is_tensor else torch.from_numpy(np.asarray(x, dtype=np.float64))
    if factor == 1:
        return t.clone() if is_tensor else t.numpy().copy()
    lead = t.shape[:-2]
    h, w = t.shape[-2:]
    t4 = t.reshape(-1, 1, h, w)
    out = F.interpolate(t4, size=(h * factor, w * factor), mode="bilinear", align_corners=False)
    out = out.reshape(*lead, h * factor, w * factor)
    return out if is_tensor else out.numpy()


def crop_origins(length, patch, stride):
    """Origins ``0, stride, ...`` along one axis plus a final origin flush to the border."""
    if length < patch:
        raise ShapeError(f"axis of length {length} shorter than patch {patch}")
    if stride < 1:
        raise ShapeError("crop stride must be >= 1")
    origins = list(range(0, length - patch + 1, stride))
    if origins[-1] != length - patch:
        origins.append(length - patch)
    return origins


def crop_patches(array, patch, crop_stride, rng=None, count=None):
    """Enumerate ``(origin, view)`` pairs over a 2D array.

    Without ``rng`` the full deterministic grid of origins is returned (row
    major). With ``rng`` and ``count``, origins are drawn uniformly.
    """
    a = array.values if hasattr(array, "values") else array
    h, w = a.shape[-2:]
    if h < patch or w < patch:
        raise ShapeError(f"grid {h}x{w} smaller than patch {patch}")
    if rng is None:
        rows, cols = crop_origins(h, patch, crop_stride), crop_origins(w, patch, crop_stride)
        origins = [(r, c) for r in rows for c in cols]
    else:
        n = 1 if count is None else count
        origins = [(int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1)))
                   for _ in range(n)]
    return [((r, c), a[..., r:r + patch, c:c + patch]) for r, c in origins]


def dihedral(x, index):
    """Element ``index`` (0..7) of the dihedral group on the trailing 2 axes.

    ``index // 4`` selects a horizontal flip, ``index % 4`` the number of
    counter-clockwise quarter turns applied after it.
    """
    if x.shape[-1] != x.shape[-2]:
        raise ShapeError("dihedral transforms need a square array")
    if index // 4:
        x = x[..., :, ::-1]
    return np.ascontiguousarray(np.rot90(x, index % 4, axes=(-2, -1)))


def augment_st(patch, tissue=None, rng=None, index=None):
    """Exact dihedral augmentation; the tissue mask follows the same transform."""
    if index is None:
        index = int(rng.integers(0, 8))
    out = dihedral(np.asarray(patch), index)
    if tissue is None:
        return out, None, index
    return out, dihedral(np.asarray(tissue), index), index


def augment_gni(image, patch, rng, angle=None, hflip=None, vflip=None, origin=None):
    """Random flips, rotation about the crop center, bilinear resampling.

    The rotated ``patch x patch`` sampling grid is placed so that every source
    coordinate lies inside the image, i.e. no padding is ever read.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if min(h, w) < patch * np.sqrt(2):
        raise ShapeError(f"image {h}x{w} too small for a rotated {patch}x{patch} crop")
    if hflip is None:
        hflip = bool(rng.integers(0, 2))
    if vflip is None:
        vflip = bool(rng.integers(0, 2))
    if angle is None:
        angle = float(rng.uniform(0.0, 360.0))
    if hflip:
        img = img[:, ::-1]
    if vflip:
        img = img[::-1, :]

    theta = np.deg2rad(angle)
    cos, sin = np.cos(theta), np.sin(theta)
    half = (patch - 1) / 2.0
    extent = half * (abs(cos) + abs(sin))
    lo = int(np.ceil(extent - half))
    hi_r = int(np.floor(h - 1 - extent - half))
    hi_c = int(np.floor(w - 1 - extent - half))
    if origin is None:
        origin = (int(rng.integers(lo, hi_r + 1)), int(rng.integers(lo, hi_c + 1)))
    r0, c0 = origin
    if not (lo <= r0 <= hi_r and lo <= c0 <= hi_c):
        raise ShapeError(f"origin {origin} leaves the valid rotated region")

    d = np.arange(patch) - half
    dr, dc = np.meshgrid(d, d, indexing="ij")
    src_r = r0 + half + dr * cos + dc * sin
    src_c = c0 + half - dr * sin + dc * cos
    out = ndimage.map_coordinates(img, [src_r, src_c], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class PatchTriple:
    """Co-registered high/medium/low resolution views of one training patch."""

    x_h: np.ndarray | None
    x_m: np.ndarray
    x_l: np.ndarray
    m_h: SamplingMask
    m_m: SamplingMask
    tissue_h: np.ndarray | None
    domain: str

    @property
    def patch(self):
        return self.m_h.height

    @property
    def tissue_m(self):
        if self.tissue_h is None:
            return None
        return downsample(self.tissue_h, self.m_h) > 0


def make_triple(source, stride, domain=GNI, tissue=None, dense=True, offset=(0, 0)):
    """Build the three resolution levels from one patch.

    ``dense=True``: ``source`` is the P x P high-resolution patch.
    ``dense=False`` (sparse ST): ``source`` already is the compacted
    (P/S) x (P/S) medium level and ``x_h`` stays unknown. ``tissue`` is given
    at the same resolution as ``source``.
    """
    src = np.asarray(source, dtype=np.float32)
    side = src.shape[0] * (1 if dense else stride)
    if src.shape[0] != src.shape[1]:
        raise ShapeError("patches must be square")
    if side % (stride * stride):
        raise ShapeError(f"patch side {side} not divisible by S^2 = {stride * stride}")
    m_h = make_mask(side, side, stride, offset)
    m_m = m_h.coarser()
    if dense:
        x_h = src
        x_m = downsample(x_h, m_h)
        tissue_h = None if tissue is None else np.asarray(tissue) > 0
    else:
        x_h = None
        x_m = src
        if tissue is None:
            tissue_h = None
        else:
            tissue_h = np.kron(np.asarray(tissue) > 0, np.ones((stride, stride), dtype=bool))
    if domain == ST and tissue_h is None:
        tissue_h = np.ones((side, side), dtype=bool)
    x_l = downsample(x_m, m_m)
    return PatchTriple(x_h, np.ascontiguousarray(x_m), np.ascontiguousarray(x_l),
                       m_h, m_m, tissue_h, domain)
