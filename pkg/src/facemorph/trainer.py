"""Alternating generator/discriminator optimization with a two-phase schedule.

Phase 1 ("pretrain") morphs every face with itself at alpha = 0.5; phase 2
("finetune") pairs faces of different identities.  The generator is updated
on every batch, the discriminator only on every ``disc_update_period``-th.
Both learning rates are halved every ``decay_interval`` epochs.
"""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from facemorph import seeding
from facemorph.adversary import init_discriminator, save_discriminator
from facemorph.data import ImageStore
from facemorph.encoder import FaceFeatures, encode, encoder_state_bytes
from facemorph.errors import ConfigError, NumericAbort
from facemorph.losses import (
    LossWeights,
    loss_adv_discriminator,
    loss_adv_generator,
    loss_identity,
    loss_perceptual,
    loss_style,
    loss_total,
)
from facemorph.morphnet import GeneratorConfig, init_generator, save_generator

log = logging.getLogger(__name__)

ALPHA_MODES = ("fixed_half", "truncated_gaussian")
PHASES = ("pretrain", "finetune")
LOG_COLUMNS = (
    "step", "epoch", "phase", "adv_g", "adv_d", "id", "per", "style", "total", "alpha",
    "gen_lr", "disc_lr", "disc_updated", "n_pairs", "n_faces", "n_identities",
    "n_self_pairs", "n_cross_identity_pairs",
)


@dataclass
class TrainConfig:
    pretrain_epochs: int = 5
    finetune_epochs: int = 10
    batch_faces: int = 32
    identities_per_batch: int = 16
    gen_lr: float = 1e-4
    disc_lr: float = 1e-5
    lr_decay: float = 0.5
    decay_interval: int = 3
    disc_update_period: int = 4
    alpha_mode: str = "fixed_half"
    alpha_mean: float = 0.5
    alpha_std: float = 0.2
    alpha_per_pair: bool = False
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    adam_betas: tuple = (0.5, 0.999)
    channel_scale: int = 1
    disc_widths: tuple = (64, 128, 256, 512)
    batches_per_epoch: int = 0  # 0: number of images // batch_faces
    checkpoint_every: int = 1
    desk_scale: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise ConfigError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")
        self.disc_widths = tuple(self.disc_widths)
        if self.batch_faces != 2 * self.identities_per_batch:
            raise ConfigError(f"batch_faces ({self.batch_faces}) must be 2 x identities_per_batch "
                              f"({self.identities_per_batch})")
        if self.identities_per_batch < 2:
            raise ConfigError("identities_per_batch must be at least 2")
        for name in ("gen_lr", "disc_lr", "lr_decay", "decay_interval", "disc_update_period",
                     "alpha_std", "checkpoint_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if min(self.pretrain_epochs, self.finetune_epochs, self.batches_per_epoch) < 0:
            raise ConfigError("epoch and batch counts must be non-negative")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"alpha_mode must be one of {ALPHA_MODES}, got {self.alpha_mode!r}")
        if not 0.0 <= self.alpha_mean <= 1.0:
            raise ConfigError("alpha_mean must lie in [0, 1]")

    @classmethod
    def desk(cls, **overrides):
        """Minutes-scale settings for one CPU; every override is explicit here."""
        base = dict(pretrain_epochs=1, finetune_epochs=2, batch_faces=8, identities_per_batch=4,
                    gen_lr=1e-3, disc_lr=1e-4, channel_scale=8, disc_widths=(8, 16, 32, 64),
                    batches_per_epoch=60, alpha_mode="truncated_gaussian",
                    weights=LossWeights(0.1, 2.0, 0.5, 0.1),
                    desk_scale=True)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def total_epochs(self):
        return self.pretrain_epochs + self.finetune_epochs

    def phase(self, epoch):
        return "pretrain" if epoch < self.pretrain_epochs else "finetune"

    def lr_at(self, epoch):
        factor = self.lr_decay ** (epoch // self.decay_interval)
        return self.gen_lr * factor, self.disc_lr * factor


def sample_alpha(mode, rng, mean=0.5, std=0.2):
    """Fixed 0.5, or a draw from N(mean, std^2) rejected until it falls in [0, 1]."""
    if mode == "fixed_half":
        return 0.5
    if mode == "truncated_gaussian":
        while True:
            a = float(rng.normal(mean, std))
            if 0.0 <= a <= 1.0:
                return a
    raise ConfigError(f"unknown alpha mode {mode!r}")


def _derangement(k, rng):
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            return perm


def make_batch(index, phase, rng, identities_per_batch=16):
    """Pairs ``(path1, path2)`` covering ``identities_per_batch`` identities in ``2 * k`` face slots.

    pretrain: one image per identity, paired with itself.
    finetune: two images per identity, cross-paired by a random derangement so
    that no pair shares an identity and each identity fills exactly two slots.
    """
    k = identities_per_batch
    idents = index.identities
    if len(idents) < k:
        raise ConfigError(f"batch needs {k} identities, dataset has {len(idents)}")
    chosen = [idents[i] for i in rng.choice(len(idents), size=k, replace=False)]
    if phase == "pretrain":
        pairs = []
        for ident in chosen:
            imgs = index.by_identity[ident]
            p = imgs[rng.integers(len(imgs))]
            pairs.append((p, p))
        return pairs
    if phase != "finetune":
        raise ConfigError(f"unknown phase {phase!r}")
    firsts, seconds = [], []
    for ident in chosen:
        imgs = index.by_identity[ident]
        if len(imgs) >= 2:
            a, b = rng.choice(len(imgs), size=2, replace=False)
        else:
            a = b = 0
        firsts.append(imgs[a])
        seconds.append(imgs[b])
    perm = _derangement(k, rng)
    return [(firsts[i], seconds[perm[i]]) for i in range(k)]


class FeatureBank:
    """Frozen-encoder features for every indexed image, computed once."""

    def __init__(self, enc, index, store=None, chunk=64):
        self.store = store or ImageStore(index)
        self.rows = {}
        parts = []
        paths = [p for _, p in index.entries]
        with torch.no_grad():
            for start in range(0, len(paths), chunk):
                part = paths[start:start + chunk]
                parts.append(encode(enc, self.store.batch(part)).detach())
                for j, p in enumerate(part):
                    self.rows[p] = start + j
        self.feats = FaceFeatures.cat(parts)

    def get(self, paths):
        return self.feats.select(torch.tensor([self.rows[p] for p in paths]))


@dataclass
class TrainRunState:
    config: TrainConfig
    gen: torch.nn.Module
    disc: torch.nn.Module
    enc: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    bank: FeatureBank
    index: object
    batch_rng: np.random.Generator
    alpha_rng: np.random.Generator
    epoch: int = 0
    global_step: int = 0
    history: list = field(default_factory=list)

    @property
    def gen_lr(self):
        return self.opt_g.param_groups[0]["lr"]

    @property
    def disc_lr(self):
        return self.opt_d.param_groups[0]["lr"]

    def set_epoch(self, epoch):
        self.epoch = epoch
        g_lr, d_lr = self.config.lr_at(epoch)
        for grp in self.opt_g.param_groups:
            grp["lr"] = g_lr
        for grp in self.opt_d.param_groups:
            grp["lr"] = d_lr


def generator_config_for(config, enc):
    return GeneratorConfig(f_dim=enc.config.feature_dim, f4_channels=enc.config.widths[3],
                           channel_scale=config.channel_scale)


def init_run_state(config, index, enc, store=None):
    gen_seq, disc_seq, batch_seq, alpha_seq = seeding.spawn(config.seed, 4)
    enc.freeze()
    gen = init_generator(generator_config_for(config, enc), seed=seeding.child_int(gen_seq))
    disc = init_discriminator(config.disc_widths, seed=seeding.child_int(disc_seq))
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.gen_lr, betas=config.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.disc_lr, betas=config.adam_betas)
    state = TrainRunState(config=config, gen=gen, disc=disc, enc=enc, opt_g=opt_g, opt_d=opt_d,
                          bank=FeatureBank(enc, index, store), index=index,
                          batch_rng=seeding.numpy_rng(batch_seq), alpha_rng=seeding.numpy_rng(alpha_seq))
    state.set_epoch(0)
    return state


def _snapshot(state, breakdown, alpha):
    return {"epoch": state.epoch, "global_step": state.global_step, "alpha": alpha,
            "losses": breakdown.as_floats() if breakdown else None, "gen_lr": state.gen_lr, "disc_lr": state.disc_lr}


def train_step(state, batch, alpha):
    """One generator update, plus a discriminator update on every ``disc_update_period``-th step.

    Returns the loss breakdown; ``adv_d`` is the discriminator loss before its
    update (computed on every step for logging).
    """
    cfg = state.config
    paths1 = [a for a, _ in batch]
    paths2 = [b for _, b in batch]
    feats1, feats2 = state.bank.get(paths1), state.bank.get(paths2)
    x1, x2 = state.bank.store.batch(paths1), state.bank.store.batch(paths2)

    state.gen.train()
    xm = state.gen(feats1, feats2, alpha)
    if not torch.isfinite(xm).all():
        raise NumericAbort(f"non-finite generator output at step {state.global_step}",
                           _snapshot(state, None, float(np.mean(alpha))))
    fm = encode(state.enc, xm)
    adv_g = loss_adv_generator(state.disc(xm))
    l_id = loss_identity(fm.f, feats1.f, feats2.f, alpha)
    taps = lambda ff: (ff.F4, ff.F5)
    l_per = loss_perceptual(taps(feats1), taps(feats2), taps(fm), alpha)
    l_style = loss_style(taps(feats1), taps(feats2), taps(fm), alpha)
    out = loss_total(adv_g, l_id, l_per, l_style, cfg.weights)

    update_d = state.global_step % cfg.disc_update_period == 0
    with torch.set_grad_enabled(update_d):
        out.adv_d = loss_adv_discriminator(state.disc(xm.detach()), state.disc(x1), state.disc(x2))

    a_log = float(np.mean(alpha))
    if not all(math.isfinite(v) for v in out.as_floats().values()):
        raise NumericAbort(f"non-finite loss at step {state.global_step}", _snapshot(state, out, a_log))

    state.opt_g.zero_grad(set_to_none=False)
    out.total.backward()
    state.opt_g.step()
    if update_d:
        state.opt_d.zero_grad(set_to_none=True)
        out.adv_d.backward()
        state.opt_d.step()

    row = {"step": state.global_step, "epoch": state.epoch, "phase": cfg.phase(state.epoch)}
    row.update(out.as_floats())
    ids1 = [state.index.identity_of(p) for p in paths1]
    ids2 = [state.index.identity_of(p) for p in paths2]
    row.update({
        "alpha": a_log, "gen_lr": state.gen_lr, "disc_lr": state.disc_lr, "disc_updated": int(update_d),
        "n_pairs": len(batch), "n_faces": 2 * len(batch), "n_identities": len(set(ids1) | set(ids2)),
        "n_self_pairs": sum(a == b for a, b in batch),
        "n_cross_identity_pairs": sum(a != b for a, b in zip(ids1, ids2)),
    })
    state.history.append(row)
    state.global_step += 1
    return out


def _sample_batch_alpha(config, rng, n_pairs):
    if config.alpha_per_pair:
        return [sample_alpha(config.alpha_mode, rng, config.alpha_mean, config.alpha_std)
                for _ in range(n_pairs)]
    return sample_alpha(config.alpha_mode, rng, config.alpha_mean, config.alpha_std)


def _batches_per_epoch(config, index):
    if config.batches_per_epoch:
        return config.batches_per_epoch
    return max(1, len(index) // config.batch_faces)


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


_INT_COLUMNS = {"step", "epoch", "disc_updated", "n_pairs", "n_faces", "n_identities",
                "n_self_pairs", "n_cross_identity_pairs"}


def read_loss_log(path):
    """Parse a loss CSV back into typed rows."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k in _INT_COLUMNS:
                    row[k] = int(v)
                elif k == "phase":
                    row[k] = v
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows


@dataclass
class TrainResult:
    state: TrainRunState
    out_dir: str
    log_path: str
    generator_path: str
    discriminator_path: str
    summary: dict


def run_training(config, index, enc, out_dir, store=None):
    """Run both phases; writes config, seed record, loss CSV and checkpoints to ``out_dir``."""
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    with open(os.path.join(out_dir, "train_config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "seed.json"), "w") as fh:
        json.dump({"seed": config.seed}, fh)

    enc_before = encoder_state_bytes(enc)
    state = init_run_state(config, index, enc, store)
    n_batches = _batches_per_epoch(config, index)
    log_path = os.path.join(out_dir, "loss_log.csv")
    epoch_totals = []
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for epoch in range(config.total_epochs):
            state.set_epoch(epoch)
            phase = config.phase(epoch)
            totals = []
            for _ in range(n_batches):
                batch = make_batch(index, phase, state.batch_rng, config.identities_per_batch)
                if phase == "pretrain":
                    alpha = 0.5
                else:
                    alpha = _sample_batch_alpha(config, state.alpha_rng, len(batch))
                try:
                    out = train_step(state, batch, alpha)
                except NumericAbort as exc:
                    with open(os.path.join(out_dir, "abort_snapshot.json"), "w") as sf:
                        json.dump(exc.snapshot, sf, indent=2, sort_keys=True)
                    raise
                row = state.history[-1]
                writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
                totals.append(float(out.total.detach()))
            fh.flush()
            epoch_totals.append(float(np.mean(totals)))
            log.info("epoch %d (%s) mean total loss %.4f", epoch, phase, epoch_totals[-1])
            if (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.total_epochs:
                ck = os.path.join(out_dir, "checkpoints", f"epoch_{epoch:03d}")
                save_generator(state.gen, ck + "_generator.pt")
                save_discriminator(state.disc, ck + "_discriminator.pt")

    if encoder_state_bytes(enc) != enc_before:
        raise RuntimeError("encoder weights changed during generator training")
    state.gen.eval()
    state.disc.eval()
    gen_path = os.path.join(out_dir, "generator.pt")
    disc_path = os.path.join(out_dir, "discriminator.pt")
    meta = save_generator(state.gen, gen_path)
    save_discriminator(state.disc, disc_path)
    summary = {"epoch_mean_total": epoch_totals, "steps": state.global_step,
               "batches_per_epoch": n_batches, "generator_hash": meta["state_hash"],
               "discriminator_hash": seeding.module_hash(state.disc)}
    with open(os.path.join(out_dir, "train_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return TrainResult(state, out_dir, log_path, gen_path, disc_path, summary)
