"""Morphing generator built from adaptive attentional denormalization (AAD) blocks.

A trainable 7x7 latent is pushed through five AAD residual blocks.  Every AAD
layer de-normalizes its batch-normalized input twice, once per face, with the
same projection weights, blends the two results by ``alpha`` and gates the
blend with a learned sigmoid mask.  Shared projections plus the canonical
mixing in :mod:`facemorph.mixing` make ``G(A, B, a) == G(B, A, 1 - a)`` hold
bitwise.
"""

import json
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from facemorph import seeding
from facemorph.errors import ConfigError, DataError, ShapeError, ValidationError
from facemorph.mixing import check_alpha, mix

CHECKPOINT_FORMAT = "facemorph.generator"
CHECKPOINT_VERSION = 1
BASE_SCHEDULE = (512, 512, 256, 128, 64, 32)
LATENT_SIZE = 7


@dataclass
class GeneratorConfig:
    f_dim: int = 256
    f4_channels: int = 1024
    channel_scale: int = 1  # divides every entry of BASE_SCHEDULE
    z_std: float = 0.02
    bn_momentum: float = 0.1
    mask_kernel: int = 1

    def __post_init__(self):
        if self.channel_scale < 1 or any(c % self.channel_scale for c in BASE_SCHEDULE):
            raise ConfigError(f"channel_scale {self.channel_scale} must divide {BASE_SCHEDULE}")
        if self.f_dim < 1 or self.f4_channels < 1:
            raise ConfigError("feature sizes must be positive")
        if self.mask_kernel % 2 != 1:
            raise ConfigError("mask_kernel must be odd")

    @property
    def schedule(self):
        return tuple(c // self.channel_scale for c in BASE_SCHEDULE)

    @property
    def f4_dim(self):
        return self.f4_channels * LATENT_SIZE * LATENT_SIZE


def aad_denormalize(h_bar, cond, proj):
    """``A = gamma * h_bar + beta`` with ``(gamma, beta) = proj(flatten(cond))`` broadcast spatially."""
    c = h_bar.shape[1]
    if proj.out_features != 2 * c:
        raise ShapeError(f"projection emits {proj.out_features} values, need 2 x {c} channels")
    cond = cond.reshape(cond.shape[0], -1)
    if cond.shape[1] != proj.in_features:
        raise ShapeError(f"condition has {cond.shape[1]} features, projection expects {proj.in_features}")
    gamma, beta = proj(cond).chunk(2, dim=1)
    return gamma[:, :, None, None] * h_bar + beta[:, :, None, None]


class AADLayer(nn.Module):
    def __init__(self, channels, cond_dim, mask_kernel=1, bn_momentum=0.1):
        super().__init__()
        self.channels = channels
        self.norm = nn.BatchNorm2d(channels, affine=False, momentum=bn_momentum)
        self.mask = nn.Conv2d(channels, 1, mask_kernel, 1, mask_kernel // 2)
        # one projection for both condition slots
        self.proj = nn.Linear(cond_dim, 2 * channels)

    def components(self, h, cond1, cond2):
        """Return ``(h_bar, mask, A1, A2)`` for inspection."""
        h_bar = self.norm(h)
        m = torch.sigmoid(self.mask(h_bar))
        return h_bar, m, aad_denormalize(h_bar, cond1, self.proj), aad_denormalize(h_bar, cond2, self.proj)

    def forward(self, h, cond1, cond2, alpha):
        _, m, a1, a2 = self.components(h, cond1, cond2)
        return m * mix(a1, a2, alpha)


def aad_blend(layer, h, cond1, cond2, alpha):
    """``M * (alpha * A1 + (1 - alpha) * A2)``."""
    check_alpha(alpha)
    return layer(h, cond1, cond2, alpha)


class AADResBlock(nn.Module):
    def __init__(self, cin, cout, cond_dim, mask_kernel=1, bn_momentum=0.1):
        super().__init__()
        self.cin, self.cout = cin, cout
        kw = {"mask_kernel": mask_kernel, "bn_momentum": bn_momentum}
        self.aad1 = AADLayer(cin, cond_dim, **kw)
        self.conv1 = nn.Conv2d(cin, cin, 3, 1, 1, bias=False)
        self.aad2 = AADLayer(cin, cond_dim, **kw)
        self.conv2 = nn.Conv2d(cin, cout, 3, 1, 1, bias=False)
        if cin != cout:
            self.aad_short = AADLayer(cin, cond_dim, **kw)
            self.conv_short = nn.Conv2d(cin, cout, 3, 1, 1, bias=False)
        else:
            self.aad_short = self.conv_short = None

    def forward(self, h, cond1, cond2, alpha):
        if h.shape[1] != self.cin:
            raise ConfigError(f"block expects {self.cin} input channels, got {h.shape[1]}")
        out = self.conv1(F.relu(self.aad1(h, cond1, cond2, alpha)))
        out = self.conv2(F.relu(self.aad2(out, cond1, cond2, alpha)))
        if self.conv_short is None:
            short = h
        else:
            short = self.conv_short(F.relu(self.aad_short(h, cond1, cond2, alpha)))
        return out + short


def aad_residual_block(h, cond1, cond2, alpha, block):
    check_alpha(alpha)
    return block(h, cond1, cond2, alpha)


class MorphGenerator(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        sched = config.schedule
        self.z = nn.Parameter(torch.zeros(1, sched[0], LATENT_SIZE, LATENT_SIZE))
        kw = {"mask_kernel": config.mask_kernel, "bn_momentum": config.bn_momentum}
        self.blocks = nn.ModuleList(
            AADResBlock(sched[k], sched[k + 1], config.f4_dim if k == 0 else config.f_dim, **kw)
            for k in range(5)
        )
        self.head3 = nn.Conv2d(sched[-1], sched[-1], 3, 1, 1)
        self.head1 = nn.Conv2d(sched[-1], 3, 1)

    def forward(self, feats1, feats2, alpha):
        for feats in (feats1, feats2):
            if getattr(feats, "F4", None) is None:
                raise ValidationError("generator needs the F4 tap of both faces")
            if feats.F4.reshape(feats.F4.shape[0], -1).shape[1] != self.config.f4_dim:
                raise ShapeError(f"F4 has shape {tuple(feats.F4.shape[1:])}, expected "
                                 f"({self.config.f4_channels}, {LATENT_SIZE}, {LATENT_SIZE})")
        n = feats1.f.shape[0]
        if feats2.f.shape[0] != n:
            raise ShapeError("feature batches differ in size")
        alpha = check_alpha(alpha)
        if alpha.dim() == 1 and alpha.shape[0] != n:
            raise ShapeError(f"got {alpha.shape[0]} alphas for a batch of {n}")

        h = self.z.expand(n, -1, -1, -1)
        h = self.blocks[0](h, feats1.F4, feats2.F4, alpha)
        for block in self.blocks[1:]:
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = block(h, feats1.f, feats2.f, alpha)
        h = self.head1(F.relu(self.head3(h)))
        return h.clamp(-1.0, 1.0)


def init_generator(config=None, seed=0):
    """Deterministically initialized generator; the global torch RNG is left untouched."""
    config = config or GeneratorConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeding.child_int(seeding.spawn(seed, 1)[0]))
        gen = MorphGenerator(config)
        with torch.no_grad():
            gen.z.normal_(0.0, config.z_std)
    return gen


def generate_morph(gen, feats1, feats2, alpha):
    """Morph of two faces' features; ``alpha`` weights the first face."""
    return gen(feats1, feats2, alpha)


def save_generator(gen, path, extra=None):
    cfg = asdict(gen.config)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg,
        "channel_schedule": list(gen.config.schedule),
        "tap_shapes": {"f": [gen.config.f_dim], "F4": [gen.config.f4_channels, LATENT_SIZE, LATENT_SIZE]},
        "normalization": "batchnorm: batch statistics in training, running averages at inference",
        "state_hash": seeding.module_hash(gen),
    }
    if extra:
        meta.update(extra)
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": cfg, "state_dict": gen.state_dict()}, path)
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta


def load_generator(path):
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise DataError(f"cannot load generator checkpoint {path}: {exc}") from exc
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a generator checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported generator checkpoint version {blob.get('version')}")
    gen = MorphGenerator(GeneratorConfig(**blob["config"]))
    gen.load_state_dict(blob["state_dict"])
    return gen.eval()
