"""Ablation matrix runner on a shared synthetic dataset.

Every variant is a delta on a shared base RunConfig; all variants see the
same synthetic slide, image corpus and seed, so metric differences come
from the config delta alone.
"""

import csv
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig, desk_config, merge
from .errors import ConfigError
from .inference import infer_slide
from .metrics import evaluate
from .st_data import load_image_corpus, write_gene_grid
from .synth import BASELINE_METHODS, SynthSpec, baseline_interpolate, make_dataset, write_sample_corpus
from .training import run_training

log = logging.getLogger(__name__)

TABLE_FIELDS = ["variant", "kind", "status", "mae", "pcc", "ssim",
                "mae_improvement", "pcc_improvement", "ssim_improvement", "seconds", "error"]


@dataclass
class Variant:
    name: str
    delta: dict = field(default_factory=dict)


@dataclass
class ExperimentMatrix:
    variants: list
    base: dict = field(default_factory=dict)
    dataset: SynthSpec = field(default_factory=SynthSpec)
    baseline: str = "baseline"
    classical: bool = True

    def __post_init__(self):
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names in {names}")
        base = self.base_config()
        for v in self.variants:
            base.with_delta(v.delta)
        if self.baseline and self.baseline not in names:
            raise ConfigError(f"baseline variant {self.baseline!r} not in matrix")

    def base_config(self):
        return RunConfig().with_delta(self.base)

    @classmethod
    def from_dict(cls, d):
        return cls(
            variants=[Variant(v["name"], v.get("delta", {})) for v in d["variants"]],
            base=d.get("base", {}),
            dataset=SynthSpec.from_dict(d.get("dataset", {})),
            baseline=d.get("baseline", "baseline"),
            classical=d.get("classical", True),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {
            "variants": [{"name": v.name, "delta": v.delta} for v in self.variants],
            "base": self.base,
            "dataset": self.dataset.to_dict(),
            "baseline": self.baseline,
            "classical": self.classical,
        }


def default_matrix(epochs=300):
    """baseline / +GNI / +DC / +both, plus the cascade sweep K = 1, 2, 3 with both on."""
    base = desk_config(epochs).to_dict()
    base["train"]["checkpoint_every"] = epochs
    off = {"train.gni_cotraining": False, "model.use_dc": False, "model.final_dc_at_inference": False}
    variants = [
        Variant("baseline", off),
        Variant("gni", {"model.use_dc": False, "model.final_dc_at_inference": False}),
        Variant("dc", {"train.gni_cotraining": False}),
        Variant("both", {}),
        Variant("both_k1", {"model.num_cascades": 1}),
        Variant("both_k3", {"model.num_cascades": 3}),
    ]
    return ExperimentMatrix(variants=variants, base=base)


def improvements(row, base):
    """Relative gains against the baseline row: lower MAE, higher PCC/SSIM are better."""
    return {
        "mae_improvement": (base["mae"] - row["mae"]) / base["mae"],
        "pcc_improvement": (row["pcc"] - base["pcc"]) / base["pcc"],
        "ssim_improvement": (row["ssim"] - base["ssim"]) / base["ssim"],
    }


def run_variant(name, cfg, data, corpus, out_dir):
    t0 = time.time()
    run_dir = Path(out_dir) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "resolved-config.json")
    state = run_training(cfg.train, cfg.model, data.sparse,
                         corpus if cfg.train.gni_cotraining else None, run_dir)
    pred = infer_slide(state.model, data.sparse, cfg.train.stride, window=cfg.infer.window,
                       window_stride=cfg.infer.window_stride, weighting=cfg.infer.weighting,
                       batch_size=cfg.infer.batch_size)
    write_gene_grid(run_dir / "recon.s2sgrid", pred)
    rep = evaluate(pred, data.truth, variant=name, dataset="synthetic")
    (run_dir / "report.json").write_text(rep.to_json())
    return {"variant": name, "kind": "model", "status": "ok", "mae": rep.mae, "pcc": rep.pcc,
            "ssim": rep.ssim, "seconds": round(time.time() - t0, 1), "error": ""}


def run_matrix(matrix, out_dir, images_dir=None, only=None):
    """Train and evaluate every variant; write ``table.csv`` and ``summary.json``.

    A failing variant is recorded with status ``failed`` and the matrix
    continues. Returns the list of table rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_cfg = matrix.base_config()
    data = make_dataset(matrix.dataset, base_cfg.train.stride)
    write_gene_grid(out_dir / "truth.s2sgrid", data.truth)
    write_gene_grid(out_dir / "sparse.s2sgrid", data.sparse)

    corpus = None
    if any(base_cfg.with_delta(v.delta).train.gni_cotraining for v in matrix.variants):
        if images_dir is None:
            images_dir = out_dir / "images"
            write_sample_corpus(images_dir)
        corpus = load_image_corpus(images_dir, min_side=base_cfg.train.patch)

    rows = []
    for v in matrix.variants:
        if only and v.name not in only:
            continue
        log.info("running variant %s", v.name)
        try:
            cfg = base_cfg.with_delta(v.delta)
            rows.append(run_variant(v.name, cfg, data, corpus, out_dir))
        except Exception as exc:  # recorded, matrix continues
            log.error("variant %s failed: %s", v.name, exc)
            rows.append({"variant": v.name, "kind": "model", "status": "failed",
                         "mae": None, "pcc": None, "ssim": None, "seconds": None,
                         "error": f"{type(exc).__name__}: {exc}",
                         "traceback": traceback.format_exc()})

    if matrix.classical:
        for method in BASELINE_METHODS:
            pred = baseline_interpolate(data.sparse, base_cfg.train.stride, method)
            rep = evaluate(pred, data.truth, variant=method, dataset="synthetic")
            rows.append({"variant": method, "kind": "classical", "status": "ok", "mae": rep.mae,
                         "pcc": rep.pcc, "ssim": rep.ssim, "seconds": 0.0, "error": ""})

    base_row = next((r for r in rows if r["variant"] == matrix.baseline and r["status"] == "ok"), None)
    for r in rows:
        if base_row is not None and r["status"] == "ok":
            r.update(improvements(r, base_row))
        else:
            r.update({"mae_improvement": None, "pcc_improvement": None, "ssim_improvement": None})

    with open(out_dir / "table.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in TABLE_FIELDS})
    summary = {
        "matrix": matrix.to_dict(),
        "baseline": matrix.baseline,
        "rows": rows,
        "checks": directional_checks(rows),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    return rows


def directional_checks(rows):
    """Does the combined variant beat each single addition on MAE?"""
    by = {r["variant"]: r for r in rows if r["status"] == "ok"}
    if not {"both", "gni", "dc"} <= set(by):
        return {}
    return {
        "both_le_gni": by["both"]["mae"] <= by["gni"]["mae"],
        "both_le_dc": by["both"]["mae"] <= by["dc"]["mae"],
    }


def matrix_from_args(path=None, epochs=None):
    if path:
        m = ExperimentMatrix.load(path)
    else:
        m = default_matrix()
    if epochs is not None:
        m.base = merge(m.base, {"train.epochs": epochs, "train.checkpoint_every": epochs})
    return m
