"""Spot tables, gene grids and natural-image corpora.

Everything here produces immutable numpy-backed values; arrays handed out
are flagged read-only so they can be shared between threads and workers.
"""

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import EmptyCorpus, EmptyInput, GeneNotFound, InvalidCount, ShapeError

log = logging.getLogger(__name__)

GRID_MAGIC = b"S2SGRID1"
LUMA = (0.299, 0.587, 0.114)
DEFAULT_PATCH = 64


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpotTable:
    x: np.ndarray
    y: np.ndarray
    gene: np.ndarray
    count: np.ndarray
    grid_height: int
    grid_width: int
    genes: tuple
    pitch_um: float | None = None

    def __post_init__(self):
        n = len(self.x)
        if not (len(self.y) == len(self.gene) == len(self.count) == n):
            raise ShapeError("spot table columns have unequal lengths")
        object.__setattr__(self, "x", _frozen(self.x, np.float64))
        object.__setattr__(self, "y", _frozen(self.y, np.float64))
        object.__setattr__(self, "count", _frozen(self.count, np.float64))
        object.__setattr__(self, "gene", _frozen(self.gene, object))
        object.__setattr__(self, "genes", tuple(self.genes))

    def __len__(self):
        return len(self.x)


@dataclass(frozen=True)
class GeneGrid:
    """Dense 2D expression field for one gene plus its tissue mask."""

    values: np.ndarray
    tissue: np.ndarray
    gene: str = ""

    def __post_init__(self):
        values = _frozen(self.values, np.float32)
        tissue = _frozen(np.asarray(self.tissue) > 0, np.uint8)
        if values.ndim != 2 or values.shape != tissue.shape:
            raise ShapeError(f"values {values.shape} and tissue {tissue.shape} must be equal 2D shapes")
        if not np.all(np.isfinite(values)):
            raise ValueError("gene grid contains non-finite values")
        if np.any(values[tissue == 0] != 0):
            raise ValueError("gene grid has non-zero values outside the tissue mask")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "tissue", tissue)

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def masked(cls, values, tissue, gene=""):
        """Build a grid after zeroing ``values`` outside ``tissue``."""
        tissue = np.asarray(tissue) > 0
        return cls(np.where(tissue, values, 0.0), tissue, gene)


@dataclass(frozen=True)
class ImageCorpus:
    images: tuple
    paths: tuple = field(default_factory=tuple)
    skipped: int = 0

    def __len__(self):
        return len(self.images)


def read_spot_table(csv_path, meta_path=None):
    """Read a ``x,y,gene,count`` CSV and its JSON sidecar.

    The sidecar defaults to ``<csv stem>.json`` next to the CSV.
    """
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
    meta = json.loads(meta_path.read_text())
    xs, ys, genes, counts = [], [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"x", "y", "gene", "count"} - set(reader.fieldnames or ())
        if missing:
            raise ShapeError(f"spot table missing columns: {sorted(missing)}")
        for row in reader:
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
            genes.append(row["gene"])
            counts.append(float(row["count"]))
    return SpotTable(
        x=np.asarray(xs),
        y=np.asarray(ys),
        gene=np.asarray(genes, dtype=object),
        count=np.asarray(counts),
        grid_height=int(meta["grid_height"]),
        grid_width=int(meta["grid_width"]),
        genes=tuple(meta.get("genes") or sorted(set(genes))),
        pitch_um=meta.get("pitch_um"),
    )


def rasterize(table, gene, pitch=None):
    """Sum raw counts of ``gene`` onto the table's grid.

    Tissue is the union of cells holding at least one spot of any gene.
    With ``pitch`` the raw coordinates are binned by ``floor(coord / pitch)``.
    """
    if len(table) == 0:
        raise EmptyInput("spot table is empty")
    if gene not in table.genes:
        raise GeneNotFound(gene)
    if pitch is None:
        cols, rows = table.x, table.y
    else:
        if pitch <= 0:
            raise ValueError("pitch must be positive")
        cols, rows = np.floor(table.x / pitch), np.floor(table.y / pitch)
    cols = cols.astype(np.int64)
    rows = rows.astype(np.int64)
    h, w = table.grid_height, table.grid_width
    if cols.min() < 0 or rows.min() < 0 or cols.max() >= w or rows.max() >= h:
        raise ShapeError("spot coordinates fall outside the grid")
    if np.any(table.count < 0):
        raise InvalidCount("negative spot count")

    tissue = np.zeros((h, w), dtype=bool)
    tissue[rows, cols] = True
    values = np.zeros((h, w), dtype=np.float64)
    sel = table.gene == gene
    np.add.at(values, (rows[sel], cols[sel]), table.count[sel])
    return GeneGrid(values, tissue, gene)


def log_normalize(grid):
    """``ln(1 + count)`` elementwise; tissue is carried over unchanged."""
    counts = np.asarray(grid.values, dtype=np.float64)
    if np.any(counts < 0):
        raise InvalidCount("log_normalize requires non-negative counts")
    return GeneGrid(np.log1p(counts), grid.tissue, grid.gene)


def to_grayscale(rgb):
    """BT.601 luma of an 8-bit image, scaled to [0, 1]."""
    a = np.asarray(rgb)
    if a.dtype == bool:
        a = a.astype(np.float64) * 255.0
    a = a.astype(np.float64)
    if a.ndim == 3:
        if a.shape[2] == 4:
            a = a[..., :3]
        if a.shape[2] == 1:
            a = a[..., 0]
        else:
            a = a[..., 0] * LUMA[0] + a[..., 1] * LUMA[1] + a[..., 2] * LUMA[2]
    return np.clip(a / 255.0, 0.0, 1.0)


def load_image_corpus(directory, min_side=DEFAULT_PATCH):
    """Load every decodable PNG/JPEG under ``directory`` as grayscale in [0, 1].

    Images with a side shorter than ``min_side`` are skipped and counted.
    """
    directory = Path(directory)
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"}
    ) if directory.is_dir() else []
    images, kept, skipped = [], [], 0
    for p in paths:
        try:
            with Image.open(p) as im:
                im.load()
                if im.mode not in ("L", "RGB", "RGBA"):
                    im = im.convert("RGB")
                arr = np.asarray(im)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable image %s: %s", p, exc)
            skipped += 1
            continue
        gray = to_grayscale(arr)
        if min(gray.shape) < min_side:
            skipped += 1
            continue
        gray.setflags(write=False)
        images.append(gray)
        kept.append(str(p))
    if skipped:
        log.warning("skipped %d images (too small or undecodable)", skipped)
    if not images:
        raise EmptyCorpus(f"no usable images in {directory}")
    return ImageCorpus(tuple(images), tuple(kept), skipped)


def write_grid(path, array, **extra):
    """Write a 2D array in the ``S2SGRID1`` container (little-endian f32)."""
    a = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    if a.ndim != 2:
        raise ShapeError("grid container holds 2D arrays only")
    header = {"height": a.shape[0], "width": a.shape[1], "dtype": "f32", **extra}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(a.tobytes())


def read_grid(path):
    """Read an ``S2SGRID1`` file or a plain CSV matrix. Returns ``(array, header)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != GRID_MAGIC:
        a = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        return a.astype(np.float32), {"height": a.shape[0], "width": a.shape[1], "dtype": "f32"}
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    if header.get("dtype") != "f32":
        raise ValueError(f"unsupported grid dtype {header.get('dtype')!r}")
    h, w = int(header["height"]), int(header["width"])
    payload = raw[12 + n:]
    if len(payload) != 4 * h * w:
        raise ShapeError(f"grid payload has {len(payload)} bytes, expected {4 * h * w}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32), header


def tissue_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".tissue" + path.suffix)


def write_gene_grid(path, grid):
    """Write values to ``path`` and the tissue mask to ``<stem>.tissue<suffix>``."""
    write_grid(path, grid.values, gene=grid.gene)
    write_grid(tissue_path(path), grid.tissue, gene=grid.gene)


def read_gene_grid(path, gene=None):
    values, header = read_grid(path)
    tp = tissue_path(path)
    tissue = read_grid(tp)[0] > 0 if tp.exists() else np.ones(values.shape, dtype=bool)
    return GeneGrid.masked(values, tissue, gene or header.get("gene", ""))
