"""Command line entry point: ``stimpute {synth,train,infer,eval,harness}``.

Exit codes: 0 success, 2 usage or config error, 3 numerical failure,
4 I/O or checkpoint incompatibility.
"""

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .config import ABLATIONS, RunConfig, merge
from .errors import ConfigError, NumericalError, ShapeError, StImputeError, VersionError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("stimpute")


def _common(p, out_required=False):
    p.add_argument("--config", type=Path, help="RunConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, required=out_required)


def build_parser():
    parser = argparse.ArgumentParser(prog="stimpute", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dense field and its sparse observation")
    _common(p, out_required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--blobs", type=int, default=12)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--tissue", choices=["full", "disk", "blob-union"], default="disk")
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--gene", default="SYNTH")
    p.add_argument("--images", type=Path, help="also export the bundled sample images here")

    p = sub.add_parser("train", help="train one model per gene")
    _common(p)
    p.add_argument("--sparse", type=Path, help="sparse grid (S2SGRID1 or CSV)")
    p.add_argument("--images", type=Path, help="natural image directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[])
    p.add_argument("--cascades", help="K or a range like 1..5 (one checkpoint per K)")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("infer", help="reconstruct a full-resolution slide")
    _common(p, out_required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sparse", type=Path, required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--window-stride", type=int)
    p.add_argument("--weighting", choices=["uniform", "hann"])
    p.add_argument("--no-final-dc", action="store_true")

    p = sub.add_parser("eval", help="score a prediction against dense truth")
    _common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--dataset", default="")
    p.add_argument("--variant", default="")
    p.add_argument("--csv", type=Path, help="append a CSV row to this file")
    p.add_argument("--exclude-sampled", action="store_true")
    p.add_argument("--stride", type=int, default=2)

    p = sub.add_parser("harness", help="ablation matrix runner")
    hsub = p.add_subparsers(dest="harness_command", required=True)
    r = hsub.add_parser("run")
    _common(r, out_required=True)
    r.add_argument("--matrix", type=Path, help="matrix JSON (default: built-in desk matrix)")
    r.add_argument("--images", type=Path)
    r.add_argument("--epochs", type=int)
    r.add_argument("--only", action="append")
    return parser


def parse_cascades(text):
    m = re.fullmatch(r"(\d+)(?:\.\.(\d+))?", text.strip())
    if not m:
        raise ConfigError(f"--cascades expects K or A..B, got {text!r}")
    lo = int(m.group(1))
    hi = int(m.group(2) or lo)
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid cascade range {text!r}")
    return list(range(lo, hi + 1))


def load_run_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_delta({"train.seed": args.seed})
    return cfg


def write_preview(path, values):
    from PIL import Image

    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    Image.fromarray((scaled * 255).round().astype(np.uint8)).save(path)


def cmd_synth(args):
    from .st_data import write_gene_grid
    from .synth import SynthSpec, make_dataset, write_sample_corpus

    seed = 7 if args.seed is None else args.seed
    spec = SynthSpec(height=args.size, width=args.size, num_blobs=args.blobs,
                     noise_sigma=args.noise, tissue=args.tissue, seed=seed, gene=args.gene)
    data = make_dataset(spec, args.stride)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_gene_grid(out / "truth.s2sgrid", data.truth)
    write_gene_grid(out / "sparse.s2sgrid", data.sparse)
    spec_d = dict(spec.to_dict(), stride=args.stride, mask=data.mask.to_dict())
    (out / "spec.json").write_text(json.dumps(spec_d, indent=2, sort_keys=True))
    if args.images:
        write_sample_corpus(args.images)
    print(json.dumps({"truth": str(out / "truth.s2sgrid"), "sparse": str(out / "sparse.s2sgrid")}))
    return EXIT_OK


def _train_one(cfg, sparse, corpus, out_dir, resume=None):
    from .training import load_state, run_training

    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "resolved-config.json")
    state = load_state(resume, cfg.train) if resume else None
    if state is not None and state.model.cfg != cfg.model:
        raise VersionError("checkpoint model config differs from the requested config")
    state = run_training(cfg.train, cfg.model, sparse, corpus, out_dir, state=state)
    return out_dir / "final.s2sckpt", state


def cmd_train(args):
    from .st_data import load_image_corpus, read_gene_grid

    cascades = parse_cascades(args.cascades) if args.cascades else None
    cfg = load_run_config(args)
    delta = {}
    if args.epochs is not None:
        delta["train.epochs"] = args.epochs
    for name in args.ablate:
        delta = merge(delta, ABLATIONS[name])
    cfg = cfg.with_delta(delta)
    sparse_path = args.sparse or cfg.paths.get("sparse")
    if not sparse_path:
        raise ConfigError("no sparse grid given (--sparse or paths.sparse)")
    out_dir = args.out_dir or Path(cfg.paths.get("out_dir", "run"))
    images = args.images or cfg.paths.get("images")
    cfg.paths.update({"sparse": str(sparse_path), "out_dir": str(out_dir)})
    if images:
        cfg.paths["images"] = str(images)

    sparse = read_gene_grid(sparse_path, cfg.train.gene or None)
    corpus = None
    if cfg.train.gni_cotraining:
        if not images:
            raise ConfigError("GNI co-training needs --images (or --ablate no-gni)")
        corpus = load_image_corpus(images, min_side=cfg.train.patch)

    if cascades:
        results = {}
        for k in cascades:
            sub_cfg = cfg.with_delta({"model.num_cascades": k})
            path, _ = _train_one(sub_cfg, sparse, corpus, out_dir / f"k{k}")
            results[k] = str(path)
        print(json.dumps({"checkpoints": results}))
    else:
        path, state = _train_one(cfg, sparse, corpus, out_dir, args.resume)
        print(json.dumps({"checkpoint": str(path), "steps": state.step}))
    return EXIT_OK


def cmd_infer(args):
    from .checkpoint import read_checkpoint
    from .inference import infer_slide
    from .network import CdcinConfig
    from .st_data import read_gene_grid, write_gene_grid
    from .training import load_model

    _, meta = read_checkpoint(args.checkpoint)
    cfg = load_run_config(args)
    if args.config and CdcinConfig.from_dict(meta["model_config"]) != cfg.model:
        raise VersionError("model config in --config does not match the checkpoint")
    train_cfg = meta.get("train_config") or {}
    stride = args.stride or train_cfg.get("stride") or cfg.train.stride
    model = load_model(args.checkpoint)
    sparse = read_gene_grid(args.sparse)
    final_dc = False if args.no_final_dc else None
    window = args.window or cfg.infer.window
    pred = infer_slide(model, sparse, stride, window=window,
                       window_stride=args.window_stride or min(cfg.infer.window_stride, window),
                       weighting=args.weighting or cfg.infer.weighting,
                       final_dc=final_dc, batch_size=cfg.infer.batch_size)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_gene_grid(out / "recon.s2sgrid", pred)
    write_preview(out / "recon.png", pred.values)
    stub = {"checkpoint": str(args.checkpoint), "sparse": str(args.sparse), "stride": stride,
            "shape": list(pred.shape), "gene": pred.gene, "metrics": None}
    (out / "metrics.json").write_text(json.dumps(stub, indent=2))
    cfg.paths.update({"checkpoint": str(args.checkpoint), "sparse": str(args.sparse)})
    cfg.save(out / "resolved-config.json")
    print(json.dumps({"recon": str(out / "recon.s2sgrid")}))
    return EXIT_OK


def cmd_eval(args):
    from .metrics import evaluate
    from .sampling import make_mask
    from .st_data import read_gene_grid

    pred = read_gene_grid(args.pred)
    truth = read_gene_grid(args.truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    exclude = None
    if args.exclude_sampled:
        exclude = make_mask(*truth.shape, args.stride)
    rep = evaluate(pred, truth, exclude_sampled=exclude, dataset=args.dataset, variant=args.variant)
    if args.out_dir:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "report.json").write_text(rep.to_json())
    if args.csv:
        new = not args.csv.exists()
        with open(args.csv, "a") as fh:
            fh.write(rep.csv_row(header=new))
    print(rep.to_json())
    return EXIT_OK


def cmd_harness(args):
    from .harness import matrix_from_args, run_matrix

    matrix = matrix_from_args(args.matrix, args.epochs)
    if args.seed is not None:
        matrix.base = merge(matrix.base, {"train.seed": args.seed})
    rows = run_matrix(matrix, args.out_dir, args.images, only=args.only)
    print(json.dumps({"table": str(args.out_dir / "table.csv"),
                      "failed": [r["variant"] for r in rows if r["status"] != "ok"]}))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "harness": cmd_harness}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc} (last checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return EXIT_NUMERICAL
    except VersionError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, StImputeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
