"""Per-gene co-training on one sparse ST slide and a natural-image corpus.

An epoch is one pass over the deterministic ST patch enumeration, shuffled
by a generator seeded from ``(seed, epoch)``. Every random draw for an item
(dihedral index, image choice, flips, angle, crop) comes from a generator
seeded by ``(seed, epoch, step, item, domain)``, so results do not depend on
how data preparation is scheduled.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .errors import ConfigError, EmptyInput, NumericalError, ShapeError
from .losses import DEFAULT_LAMBDA, gni_losses, st_losses, total_loss, weighted_total
from .network import CDCIN, CdcinConfig, check_input_size
from .sampling import GNI, ST, augment_gni, augment_st, crop_origins, make_triple

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 3000
    batch_size: int = 16
    learning_rate: float = 1e-4
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    gene: str = ""
    gni_cotraining: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 100
    crop_stride: int = 32
    patch: int = 64
    stride: int = 2
    tissue_exclusion_m: bool = True
    tissue_exclusion_h: bool = True
    literal_denominator: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        errors = []
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if not self.learning_rate > 0:
            errors.append("learning_rate must be > 0")
        if self.stride < 1:
            errors.append("stride must be >= 1")
        elif self.patch % (self.stride * self.stride):
            errors.append(f"patch {self.patch} not divisible by stride^2 = {self.stride ** 2}")
        elif self.crop_stride < 1 or self.crop_stride % self.stride:
            errors.append(f"crop_stride {self.crop_stride} must be a positive multiple of stride")
        if self.checkpoint_every < 1:
            errors.append("checkpoint_every must be >= 1")
        if errors:
            raise ConfigError("; ".join(errors))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    model: CDCIN
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    last_checkpoint: str | None = None
    history: list = field(default_factory=list)


def new_state(config, model_config, dtype=torch.float32):
    model = CDCIN(model_config, seed=config.seed).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(config.beta1, config.beta2), eps=config.eps)
    return TrainState(model, opt, config)


def item_rng(seed, *keys):
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def st_patch_origins(slide, config):
    """Compact-resolution origins of ST patches that touch tissue."""
    s = config.stride
    side = config.patch // s
    h, w = slide.shape
    if h < side or w < side:
        raise ShapeError(f"sparse slide {h}x{w} smaller than compact patch {side}")
    step = config.crop_stride // s
    origins = [(r, c) for r in crop_origins(h, side, step) for c in crop_origins(w, side, step)]
    return [(r, c) for r, c in origins if slide.tissue[r:r + side, c:c + side].any()]


def st_triple(slide, origin, config, rng):
    side = config.patch // config.stride
    r, c = origin
    patch = slide.values[r:r + side, c:c + side]
    tissue = slide.tissue[r:r + side, c:c + side]
    patch, tissue, _ = augment_st(patch, tissue, rng)
    return make_triple(patch, config.stride, ST, tissue=tissue, dense=False)


def gni_triple(corpus, config, rng):
    img = corpus.images[int(rng.integers(0, len(corpus.images)))]
    patch = augment_gni(img, config.patch, rng)
    return make_triple(patch, config.stride, GNI)


def _stack(arrays, dtype):
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float64) for a in arrays])[:, None]).to(dtype)


def training_step(state, st_batch, gni_batch=()):
    """One Adam update on the combined loss of an ST batch and a GNI batch."""
    cfg = state.config
    if not st_batch:
        raise EmptyInput("ST batch is empty")
    if cfg.gni_cotraining and not gni_batch:
        raise EmptyInput("GNI batch is empty while co-training is enabled")
    model, opt = state.model, state.optimizer
    dtype = next(model.parameters()).dtype
    m_h, m_m = st_batch[0].m_h, st_batch[0].m_m

    x_m = _stack([t.x_m for t in st_batch], dtype)
    x_l = _stack([t.x_l for t in st_batch], dtype)
    tissue_m = _stack([t.tissue_m for t in st_batch], dtype)
    st_m, st_h = st_losses(model(x_l, m_m), model(x_m, m_h), x_m, m_h, tissue_m,
                           exclude_m=cfg.tissue_exclusion_m, exclude_h=cfg.tissue_exclusion_h,
                           literal_denominator=cfg.literal_denominator)
    gni_m = gni_h = None
    if cfg.gni_cotraining:
        g_m = _stack([t.x_m for t in gni_batch], dtype)
        g_l = _stack([t.x_l for t in gni_batch], dtype)
        g_h = _stack([t.x_h for t in gni_batch], dtype)
        gni_m, gni_h = gni_losses(model(g_l, m_m), model(g_m, m_h), g_m, g_h)

    loss = weighted_total(st_m, st_h, gni_m, gni_h, cfg.lam)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {state.step}", state.last_checkpoint)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    state.step += 1
    return state, total_loss(st_m.item(), st_h.item(),
                             None if gni_m is None else gni_m.item(),
                             None if gni_h is None else gni_h.item(), cfg.lam)


def num_workers():
    try:
        return max(1, int(os.environ.get("S2S_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def epoch_batches(slide, corpus, config, origins, epoch):
    """Yield ``(st_batch, gni_batch)`` pairs for one epoch.

    Items are prepared on up to ``S2S_NUM_WORKERS`` threads; each item owns
    its generator, so the batches are identical for any worker count.
    """
    order = item_rng(config.seed, epoch).permutation(len(origins))
    bs = config.batch_size
    workers = num_workers()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    run = pool.map if pool else map
    try:
        for b, start in enumerate(range(0, len(order), bs)):
            idx = order[start:start + bs]
            st_batch = list(run(
                lambda ji: st_triple(slide, origins[ji[1]], config,
                                     item_rng(config.seed, epoch, b, ji[0], 0)),
                enumerate(idx)))
            gni_batch = []
            if config.gni_cotraining:
                gni_batch = list(run(
                    lambda j: gni_triple(corpus, config, item_rng(config.seed, epoch, b, j, 1)),
                    range(len(idx))))
            yield st_batch, gni_batch
    finally:
        if pool:
            pool.shutdown()


def save_state(state, path):
    arrays = ckpt.model_arrays(state.model)
    opt_arrays, steps = ckpt.optimizer_arrays(state.model, state.optimizer)
    arrays.update(opt_arrays)
    meta = {
        "model_config": state.model.cfg.to_dict(),
        "train_config": state.config.to_dict(),
        "seed": state.config.seed,
        "step": state.step,
        "epoch": state.epoch,
        "adam_steps": steps,
    }
    ckpt.write_checkpoint(path, arrays, meta)
    state.last_checkpoint = str(path)
    return path


def load_state(path, config=None):
    """Rebuild a TrainState from a checkpoint; ``config`` overrides the stored one."""
    arrays, meta = ckpt.read_checkpoint(path)
    model_config = CdcinConfig.from_dict(meta["model_config"])
    stored = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    config = config or stored or TrainConfig()
    state = new_state(config, model_config)
    ckpt.load_model_arrays(state.model, arrays)
    ckpt.load_optimizer_arrays(state.model, state.optimizer, arrays, meta.get("adam_steps", {}))
    state.step, state.epoch = int(meta["step"]), int(meta["epoch"])
    state.last_checkpoint = str(path)
    return state


def load_model(path):
    arrays, meta = ckpt.read_checkpoint(path)
    model = CDCIN(CdcinConfig.from_dict(meta["model_config"]))
    ckpt.load_model_arrays(model, arrays)
    return model.eval()


def run_training(config, model_config, slide, corpus=None, out_dir=None, state=None,
                 on_step=None):
    """Train until ``config.epochs``; resumes when ``state`` is given.

    ``slide`` is the sparse ST grid at observed (compact) resolution.
    Writes ``loss.jsonl`` and checkpoints under ``out_dir`` when set.
    """
    if config.gni_cotraining and (corpus is None or len(corpus) == 0):
        raise ConfigError("GNI co-training enabled but no image corpus given")
    check_input_size(model_config, config.patch, config.stride)
    check_input_size(model_config, config.patch // config.stride, config.stride)
    origins = st_patch_origins(slide, config)
    if not origins:
        raise ConfigError("no ST patch overlaps the tissue mask")
    if state is None:
        state = new_state(config, model_config)
    else:
        state.config = config

    out = Path(out_dir) if out_dir else None
    log_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss.jsonl", "a" if state.step else "w", buffering=1)
    try:
        while state.epoch < config.epochs:
            for st_batch, gni_batch in epoch_batches(slide, corpus, config, origins, state.epoch):
                try:
                    _, parts = training_step(state, st_batch, gni_batch)
                except NumericalError as exc:
                    exc.last_checkpoint = state.last_checkpoint
                    raise
                state.history.append(parts)
                if log_fh:
                    log_fh.write(parts.to_json(state.step) + "\n")
                if on_step:
                    on_step(state, parts)
            state.epoch += 1
            if out and (state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs):
                save_state(state, out / f"ckpt_epoch{state.epoch:05d}.s2sckpt")
        if out:
            save_state(state, out / "final.s2sckpt")
    finally:
        if log_fh:
            log_fh.close()
    return state


def read_loss_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def steps_per_epoch(num_patches, batch_size):
    return math.ceil(num_patches / batch_size)
