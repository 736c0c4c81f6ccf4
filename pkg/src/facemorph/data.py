"""Face image I/O, dataset indexing and the procedural desk-scale face set."""

import csv
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image, ImageDraw

from facemorph import seeding
from facemorph.errors import ConfigError, DataError, ShapeError, ValidationError

log = logging.getLogger(__name__)

IMAGE_SIZE = 112
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
INDEX_HEADER = ("identity_id", "image_path", "image_count")


def check_face(x):
    """Validate a FaceImage tensor, ``(3, 112, 112)`` or ``(N, 3, 112, 112)``."""
    if not isinstance(x, torch.Tensor):
        raise ValidationError(f"expected a torch.Tensor, got {type(x).__name__}")
    if x.dim() not in (3, 4) or tuple(x.shape[-3:]) != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"face images must be 3x{IMAGE_SIZE}x{IMAGE_SIZE}, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValidationError("face image contains non-finite pixels")
    if x.numel() and (x.min() < -1 or x.max() > 1):
        raise ValidationError("face image values must lie in [-1, 1]")
    return x


def from_uint8(arr):
    """HxWx3 uint8 array -> 3xHxW float tensor in [-1, 1] via v/127.5 - 1."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValidationError(f"expected uint8 pixels, got {arr.dtype}")
    t = torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)
    return t.permute(2, 0, 1).contiguous()


def to_uint8(x):
    x = x.detach().cpu().float().clamp(-1, 1)
    arr = ((x.permute(1, 2, 0).numpy() + 1.0) * 127.5).round()
    return arr.astype(np.uint8)


def load_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {arr.shape[1]}x{arr.shape[0]}")
    return from_uint8(arr)


def save_image(x, path):
    check_face(x)
    if x.dim() == 4:
        x = x[0]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    # fixed PNG parameters keep output bytes reproducible
    Image.fromarray(to_uint8(x)).save(path, format="PNG", optimize=False, compress_level=6)


@dataclass
class DatasetIndex:
    """Images grouped by identity; paths are relative to ``root``."""

    root: str
    entries: list = field(default_factory=list)  # (identity_id, relpath)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.by_identity = OrderedDict()
        for ident, rel in self.entries:
            self.by_identity.setdefault(ident, []).append(rel)

    @property
    def identities(self):
        return list(self.by_identity)

    def __len__(self):
        return len(self.entries)

    def identity_of(self, relpath):
        return self._reverse()[relpath]

    def _reverse(self):
        if not hasattr(self, "_rev"):
            self._rev = {rel: ident for ident, rel in self.entries}
        return self._rev

    def abspath(self, relpath):
        return os.path.join(self.root, relpath)

    def write_csv(self, path):
        """Write the index with image paths relative to the CSV's own directory."""
        base = os.path.dirname(os.path.abspath(path))
        prefix = os.path.relpath(os.path.abspath(self.root), base).replace(os.sep, "/")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(INDEX_HEADER)
            for ident, rel in self.entries:
                shown = rel if prefix == "." else f"{prefix}/{rel}"
                w.writerow((ident, shown, len(self.by_identity[ident])))

    @classmethod
    def read_csv(cls, path, root=None):
        if root is None:
            root = os.path.dirname(os.path.abspath(path))
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != INDEX_HEADER:
                raise DataError(f"{path}: unexpected index header {reader.fieldnames}")
            entries = [(row["identity_id"], row["image_path"]) for row in reader]
        return cls(root=root, entries=entries)


def index_dataset(root):
    """Scan a directory-per-identity tree; images that are not 112x112 are skipped with a warning."""
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root} does not exist")
    entries, warnings = [], []
    for ident in sorted(os.listdir(root)):
        sub = os.path.join(root, ident)
        if not os.path.isdir(sub):
            continue
        for name in sorted(os.listdir(sub)):
            if not name.lower().endswith(IMAGE_EXTENSIONS):
                continue
            rel = f"{ident}/{name}"
            try:
                with Image.open(os.path.join(sub, name)) as im:
                    size = im.size
            except OSError as exc:
                warnings.append(f"{rel}: unreadable ({exc})")
                continue
            if size != (IMAGE_SIZE, IMAGE_SIZE):
                warnings.append(f"{rel}: size {size[0]}x{size[1]} != {IMAGE_SIZE}x{IMAGE_SIZE}")
                continue
            entries.append((ident, rel))
    if not entries:
        raise DataError(f"no usable images under {root}")
    for msg in warnings:
        log.warning("skipping %s", msg)
    return DatasetIndex(root=root, entries=entries, warnings=warnings)


class ImageStore:
    """Loads face tensors by index-relative path, caching decoded pixels."""

    def __init__(self, index):
        self.index = index
        self._cache = {}

    def get(self, relpath):
        if relpath not in self._cache:
            self._cache[relpath] = load_image(self.index.abspath(relpath))
        return self._cache[relpath]

    def batch(self, relpaths):
        return torch.stack([self.get(p) for p in relpaths])


# -- procedural faces -------------------------------------------------------


def _identity_params(rng):
    return {
        "background": rng.integers(0, 256, 3),
        "skin": rng.integers(60, 240, 3),
        "rx": rng.uniform(28, 42),
        "ry": rng.uniform(36, 50),
        "eye_dx": rng.uniform(10, 22),
        "eye_y": rng.uniform(-16, -4),
        "eye_r": rng.uniform(3, 8),
        "eye_color": rng.integers(0, 256, 3),
        "mouth_w": rng.uniform(10, 30),
        "mouth_y": rng.uniform(14, 28),
        "mouth_h": rng.uniform(2, 8),
        "mouth_color": rng.integers(0, 256, 3),
        "hair_h": rng.uniform(4, 26),
        "hair_color": rng.integers(0, 256, 3),
        "mark_angle": rng.uniform(0, np.pi),
        "mark_color": rng.integers(0, 256, 3),
    }


def _render_face(p, rng):
    dx, dy = rng.uniform(-4, 4, 2)
    cx, cy = IMAGE_SIZE / 2 + dx, IMAGE_SIZE / 2 + dy
    im = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), tuple(int(v) for v in p["background"]))
    d = ImageDraw.Draw(im)
    rx, ry = p["rx"], p["ry"]
    d.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=tuple(int(v) for v in p["skin"]))
    d.chord([cx - rx, cy - ry, cx + rx, cy - ry + 2 * p["hair_h"]], 180, 360,
            fill=tuple(int(v) for v in p["hair_color"]))
    for side in (-1, 1):
        ex, ey, r = cx + side * p["eye_dx"], cy + p["eye_y"], p["eye_r"]
        d.ellipse([ex - r, ey - r, ex + r, ey + r], fill=tuple(int(v) for v in p["eye_color"]))
    mw, my, mh = p["mouth_w"], cy + p["mouth_y"], p["mouth_h"]
    d.rectangle([cx - mw / 2, my - mh / 2, cx + mw / 2, my + mh / 2],
                fill=tuple(int(v) for v in p["mouth_color"]))
    # cheek mark: a short oriented stroke
    ux, uy = 9 * np.cos(p["mark_angle"]), 9 * np.sin(p["mark_angle"])
    mx, my2 = cx + 0.55 * rx, cy + 4
    d.line([mx - ux, my2 - uy, mx + ux, my2 + uy], fill=tuple(int(v) for v in p["mark_color"]), width=3)

    arr = np.asarray(im).astype(np.float64)
    arr = arr * rng.uniform(0.85, 1.15) + rng.normal(0.0, 6.0, arr.shape)
    return np.clip(arr.round(), 0, 255).astype(np.uint8)


def generate_synthetic_faces(out_dir, n_identities, images_per_identity, seed):
    """Write ``n_identities`` directories of procedural 112x112 faces; returns the index."""
    if n_identities < 2:
        raise ConfigError("need at least 2 identities")
    if images_per_identity < 1:
        raise ConfigError("need at least 1 image per identity")
    width = max(3, len(str(n_identities - 1)))
    for k, seq in enumerate(seeding.spawn(seed, n_identities)):
        id_seq, img_seq = seq.spawn(2)
        params = _identity_params(seeding.numpy_rng(id_seq))
        rng = seeding.numpy_rng(img_seq)
        ident = f"id{k:0{width}d}"
        os.makedirs(os.path.join(out_dir, ident), exist_ok=True)
        for j in range(images_per_identity):
            arr = _render_face(params, rng)
            Image.fromarray(arr).save(os.path.join(out_dir, ident, f"{j:04d}.png"),
                                      format="PNG", optimize=False, compress_level=6)
    return index_dataset(out_dir)
