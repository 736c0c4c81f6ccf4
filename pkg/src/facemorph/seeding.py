"""Root-seed splitting and content hashing helpers."""

import hashlib
import json

import numpy as np
import torch


def spawn(seed, n):
    """Split one root seed into ``n`` independent child seed sequences."""
    return np.random.SeedSequence(int(seed)).spawn(n)


def child_int(seq):
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def torch_generator(seq):
    g = torch.Generator()
    g.manual_seed(child_int(seq))
    return g


def numpy_rng(seq):
    return np.random.default_rng(seq)


def module_hash(module):
    """SHA-256 over parameters and buffers, stable across processes."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def json_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
