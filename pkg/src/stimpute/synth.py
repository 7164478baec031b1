"""Synthetic gene fields, sparse-observation simulation and classical baselines."""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .sampling import downsample, make_mask, upsample
from .st_data import GeneGrid

TISSUE_SHAPES = ("full", "disk", "blob-union")
BASELINE_METHODS = ("nearest", "bilinear", "bicubic")

# Bundled skimage samples used as a stand-in natural-image corpus.
SAMPLE_IMAGES = ("astronaut", "brick", "camera", "chelsea", "clock", "coffee", "coins",
                 "grass", "gravel", "hubble_deep_field", "moon", "rocket")


@dataclass
class SynthSpec:
    height: int = 128
    width: int = 128
    num_blobs: int = 12
    sigma_range: tuple = (3.0, 10.0)
    amplitude_range: tuple = (0.5, 3.0)
    noise_sigma: float = 0.05
    tissue: str = "disk"
    seed: int = 7
    gene: str = "SYNTH"

    def __post_init__(self):
        self.sigma_range = tuple(float(v) for v in self.sigma_range)
        self.amplitude_range = tuple(float(v) for v in self.amplitude_range)
        if self.height < 1 or self.width < 1:
            raise ConfigError("field dimensions must be positive")
        if self.num_blobs < 0:
            raise ConfigError("num_blobs must be >= 0")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid sigma range {self.sigma_range}")
        if self.amplitude_range[0] > self.amplitude_range[1]:
            raise ConfigError(f"invalid amplitude range {self.amplitude_range}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.tissue not in TISSUE_SHAPES:
            raise ConfigError(f"tissue must be one of {TISSUE_SHAPES}")

    def to_dict(self):
        d = asdict(self)
        d["sigma_range"] = list(self.sigma_range)
        d["amplitude_range"] = list(self.amplitude_range)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
        return cls(**d)


def gen_field(spec):
    """Sum of Gaussian blobs plus white noise, clipped at 0, masked by tissue."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    values = np.zeros((h, w))
    centers, sigmas = [], []
    for _ in range(spec.num_blobs):
        cr, cc = int(rng.integers(0, h)), int(rng.integers(0, w))
        sigma = rng.uniform(*spec.sigma_range)
        amp = rng.uniform(*spec.amplitude_range)
        values += amp * np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2 * sigma ** 2))
        centers.append((cr, cc))
        sigmas.append(sigma)
    if spec.noise_sigma > 0:
        values += rng.normal(0.0, spec.noise_sigma, size=(h, w))
    values = np.clip(values, 0.0, None)

    if spec.tissue == "full":
        tissue = np.ones((h, w), dtype=bool)
    elif spec.tissue == "disk":
        radius = 0.45 * min(h, w)
        tissue = (rows - (h - 1) / 2) ** 2 + (cols - (w - 1) / 2) ** 2 <= radius ** 2
    else:
        tissue = np.zeros((h, w), dtype=bool)
        for (cr, cc), sigma in zip(centers, sigmas):
            tissue |= (rows - cr) ** 2 + (cols - cc) ** 2 <= (2.5 * sigma) ** 2
    return GeneGrid.masked(values.astype(np.float32), tissue, spec.gene)


def simulate_sparse(truth, stride, offset=(0, 0)):
    """Keep every ``stride``-th spot of a dense grid; returns (sparse grid, mask)."""
    h, w = truth.shape
    mask = make_mask(h, w, stride, offset)
    values = downsample(truth.values, mask)
    tissue = downsample(truth.tissue, mask)
    return GeneGrid(values, tissue, truth.gene), mask


def upsample_tissue(tissue, factor):
    return np.kron(np.asarray(tissue) > 0, np.ones((factor, factor), dtype=bool))


def baseline_interpolate(sparse, factor, method="bicubic"):
    """Classical upsampling of a sparse grid; the tissue mask is replicated."""
    if method not in BASELINE_METHODS:
        raise ConfigError(f"unknown interpolation method {method!r}")
    if factor < 1:
        raise ConfigError("factor must be >= 1")
    v = np.asarray(sparse.values, dtype=np.float64)
    if method == "nearest":
        out = np.kron(v, np.ones((factor, factor)))
    elif method == "bilinear":
        out = upsample(v, factor)
    else:
        t = torch.from_numpy(v)[None, None]
        h, w = v.shape
        out = F.interpolate(t, size=(h * factor, w * factor), mode="bicubic",
                            align_corners=False)[0, 0].numpy()
    tissue = upsample_tissue(sparse.tissue, factor)
    return GeneGrid.masked(out.astype(np.float32), tissue, sparse.gene)


def write_sample_corpus(directory, names=SAMPLE_IMAGES):
    """Export skimage's bundled sample photos as PNGs; returns the written paths."""
    from PIL import Image
    from skimage import data

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in names:
        img = np.asarray(getattr(data, name)())
        if img.dtype != np.uint8:
            img = (np.clip(img.astype(np.float64), 0, 1) * 255).astype(np.uint8)
        p = directory / f"{name}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths


@dataclass
class SynthBundle:
    truth: GeneGrid
    sparse: GeneGrid
    mask: object
    spec: SynthSpec = field(repr=False)


def make_dataset(spec, stride):
    truth = gen_field(spec)
    sparse, mask = simulate_sparse(truth, stride)
    return SynthBundle(truth, sparse, mask, spec)
