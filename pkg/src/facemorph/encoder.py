"""Face feature extractor: identity embedding plus tapped intermediate maps."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from facemorph import seeding
from facemorph.data import IMAGE_SIZE, ImageStore, check_face
from facemorph.errors import ConfigError, DataError, DomainError, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "facemorph.encoder"
CHECKPOINT_VERSION = 1
PIXEL_NORMALIZATION = "v/127.5-1"


@dataclass
class EncoderConfig:
    """Stage widths: stem (56x56), stage1 (28x28), F3 (14x14), F4 (7x7), F5 (7x7)."""

    widths: tuple = (64, 256, 512, 1024, 2048)
    feature_dim: int = 256
    n_classes: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 5 or min(self.widths) < 1:
            raise ConfigError(f"encoder widths must be 5 positive ints, got {self.widths}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")

    @classmethod
    def desk(cls, n_classes=0):
        return cls(widths=(16, 24, 32, 64, 64), feature_dim=256, n_classes=n_classes)

    @property
    def tap_shapes(self):
        c3, c4, c5 = self.widths[2:]
        return {"F3": (c3, 14, 14), "F4": (c4, 7, 7), "F5": (c5, 7, 7)}


@dataclass
class FaceFeatures:
    """Batched encoder outputs from a single forward pass."""

    f: torch.Tensor
    F3: torch.Tensor
    F4: torch.Tensor
    F5: torch.Tensor

    def __len__(self):
        return self.f.shape[0]

    def select(self, idx):
        return FaceFeatures(self.f[idx], self.F3[idx], self.F4[idx], self.F5[idx])

    def detach(self):
        return FaceFeatures(self.f.detach(), self.F3.detach(), self.F4.detach(), self.F5.detach())

    @classmethod
    def cat(cls, items):
        items = list(items)
        return cls(*(torch.cat([getattr(it, k) for it in items]) for k in ("f", "F3", "F4", "F5")))


class _Block(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class FaceEncoder(nn.Module):
    """Small residual CNN with the tap layout of a face-recognition ResNet."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        w0, w1, c3, c4, c5 = config.widths
        self.stem = nn.Sequential(nn.Conv2d(3, w0, 3, 2, 1, bias=False), nn.BatchNorm2d(w0), nn.ReLU())
        self.stage1 = _Block(w0, w1, 2)  # 28x28
        self.stage2 = _Block(w1, c3, 2)  # 14x14 -> F3
        self.stage3 = _Block(c3, c4, 2)  # 7x7 -> F4
        self.stage4 = _Block(c4, c5, 1)  # 7x7 -> F5
        self.embed = nn.Sequential(nn.Flatten(), nn.Linear(c5 * 49, config.feature_dim),
                                   nn.BatchNorm1d(config.feature_dim))
        self.classifier = nn.Linear(config.feature_dim, config.n_classes) if config.n_classes else None

    def forward(self, x):
        h = self.stage1(self.stem(x))
        f3 = self.stage2(h)
        f4 = self.stage3(f3)
        f5 = self.stage4(f4)
        return FaceFeatures(self.embed(f5), f3, f4, f5)

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def encode(enc, x):
    """Run the frozen encoder on one image or a batch.

    Gradients w.r.t. ``x`` flow when autograd is enabled; encoder weights are
    never touched and batch norm always uses its running statistics.
    """
    check_face(x)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if enc.training:
        enc.eval()
    feats = enc(x)
    norms = feats.f.detach().norm(dim=1)
    if not torch.isfinite(feats.f).all() or (norms == 0).any():
        raise ValidationError("encoder produced a non-finite or zero identity vector")
    return feats


def cosine_distance(a, b):
    """``1 - <a, b> / (|a| |b|)`` along the last axis, clamped to [0, 2]."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DomainError(f"dimension mismatch {a.shape[-1]} vs {b.shape[-1]}")
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise DomainError("cosine distance is undefined for zero vectors")
    sim = (a * b).sum(-1) / (na * nb)
    return (1.0 - sim).clamp(0.0, 2.0)


@dataclass
class EncoderTrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 5e-4
    holdout_per_identity: int = 4
    widths: tuple = field(default_factory=lambda: EncoderConfig.desk().widths)
    feature_dim: int = 256


def _split(index, holdout, rng):
    train, held = [], []
    for label, ident in enumerate(index.identities):
        paths = list(index.by_identity[ident])
        order = rng.permutation(len(paths))
        k = min(holdout, len(paths) - 1)
        for j, pos in enumerate(order):
            (held if j < k else train).append((paths[pos], label))
    return train, held


def train_desk_encoder(index, config=None, seed=0):
    """Train the desk-scale identity classifier and return ``(frozen encoder, report)``."""
    config = config or EncoderTrainConfig()
    n_ids = len(index.identities)
    if n_ids < 2:
        raise ConfigError(f"need at least 2 identities to train an encoder, got {n_ids}")
    split_seq, init_seq, order_seq = seeding.spawn(seed, 3)
    train, held = _split(index, config.holdout_per_identity, seeding.numpy_rng(split_seq))
    if not train:
        raise DataError("no training images left after the hold-out split")

    store = ImageStore(index)
    x_train = store.batch([p for p, _ in train])
    y_train = torch.tensor([y for _, y in train])

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeding.child_int(init_seq))
        enc = FaceEncoder(EncoderConfig(widths=config.widths, feature_dim=config.feature_dim, n_classes=n_ids))
    opt = torch.optim.Adam(enc.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    gen = seeding.torch_generator(order_seq)
    enc.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(len(train), generator=gen)
        total = 0.0
        for start in range(0, len(train), config.batch_size):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:  # batch norm needs >1 sample
                continue
            logits = enc.classifier(enc(x_train[idx]).f)
            loss = F.cross_entropy(logits, y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("encoder epoch %d loss %.4f", epoch, total / len(train))
    enc.freeze()

    report = {"n_identities": n_ids, "n_train": len(train), "n_heldout": len(held),
              "chance": 1.0 / n_ids, "heldout_accuracy": None}
    if held:
        with torch.no_grad():
            x_held = store.batch([p for p, _ in held])
            pred = enc.classifier(encode(enc, x_held).f).argmax(1)
        y_held = torch.tensor([y for _, y in held])
        report["heldout_accuracy"] = float((pred == y_held).double().mean())
    report["identities"] = index.identities
    return enc, report


def save_encoder(enc, path, extra=None):
    cfg = enc.config
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {"widths": list(cfg.widths), "feature_dim": cfg.feature_dim, "n_classes": cfg.n_classes},
        "tap_shapes": {k: list(v) for k, v in cfg.tap_shapes.items()},
        "feature_dim": cfg.feature_dim,
        "image_size": IMAGE_SIZE,
        "pixel_normalization": PIXEL_NORMALIZATION,
        "state_hash": seeding.module_hash(enc),
    }
    if extra:
        meta.update(extra)
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": meta["config"], "state_dict": enc.state_dict()}, path)
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta


def load_encoder(path):
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise DataError(f"cannot load encoder checkpoint {path}: {exc}") from exc
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not an encoder checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported encoder checkpoint version {blob.get('version')}")
    enc = FaceEncoder(EncoderConfig(**blob["config"]))
    enc.load_state_dict(blob["state_dict"])
    return enc.freeze()


def encoder_state_bytes(enc):
    """Raw parameter bytes, used to check the encoder is never mutated."""
    return b"".join(np.ascontiguousarray(t.detach().numpy()).tobytes()
                    for _, t in sorted(enc.state_dict().items()))
