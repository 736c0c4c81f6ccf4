"""Global discriminator: four convolutions, a linear layer and a sigmoid."""

import json

import torch
import torch.nn as nn

from facemorph import seeding
from facemorph.data import IMAGE_SIZE, check_face
from facemorph.errors import ConfigError, DataError

EPS = 1e-7
CHECKPOINT_FORMAT = "facemorph.discriminator"
CHECKPOINT_VERSION = 1


def _out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


class Discriminator(nn.Module):
    def __init__(self, widths=(64, 128, 256, 512)):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) != 4 or min(widths) < 1:
            raise ConfigError(f"discriminator needs 4 positive widths, got {widths}")
        self.widths = widths
        layers, cin, size = [], 3, IMAGE_SIZE
        for i, cout in enumerate(widths):
            stride = 2 if i < 2 else 1
            layers += [nn.Conv2d(cin, cout, 4, stride, 1), nn.LeakyReLU(0.2)]
            cin, size = cout, _out(size, 4, stride, 1)
        self.features = nn.Sequential(*layers)
        self.out_size = size
        self.fc = nn.Linear(cin * size * size, 1)

    def forward(self, x):
        logits = self.fc(self.features(x).flatten(1)).squeeze(1)
        return torch.sigmoid(logits).clamp(EPS, 1.0 - EPS)


def init_discriminator(widths=(64, 128, 256, 512), seed=0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeding.child_int(seeding.spawn(seed, 1)[0]))
        return Discriminator(widths)


def discriminate(d, x):
    """Probability that each image in ``x`` is real, strictly inside (0, 1)."""
    check_face(x)
    if x.dim() == 3:
        return d(x.unsqueeze(0))[0]
    return d(x)


def save_discriminator(d, path):
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "widths": list(d.widths), "state_dict": d.state_dict()}, path)
    with open(str(path) + ".json", "w") as fh:
        json.dump({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "widths": list(d.widths),
                   "state_hash": seeding.module_hash(d)}, fh, indent=2, sort_keys=True)


def load_discriminator(path):
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise DataError(f"cannot load discriminator checkpoint {path}: {exc}") from exc
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path} is not a supported discriminator checkpoint")
    d = Discriminator(blob["widths"])
    d.load_state_dict(blob["state_dict"])
    return d.eval()
