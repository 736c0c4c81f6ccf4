"""Quintuple morph-attack benchmarks and the Acc_morph metric.

A verification triplet ``(x1, x2, y)`` is extended with a second image of each
identity, ``x1p`` and ``x2p``.  The morph is generated from ``x1`` and ``x2``;
its embedding is compared against ``x1p`` and ``x2p``, and the decision
threshold comes from the ``(x1p, x2p)`` distances of the training folds.  An
attack on an imposter pair succeeds only when the morph is accepted as both
identities.
"""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from facemorph import seeding
from facemorph.encoder import FaceFeatures, cosine_distance, encode
from facemorph.errors import DataError, DomainError, ProtocolError

log = logging.getLogger(__name__)

N_FOLDS = 10
DEFAULT_FAR = 0.001
TRIPLET_HEADER = ("fold", "y", "id1", "img1", "id2", "img2")
QUINTUPLE_HEADER = TRIPLET_HEADER + ("img1p", "img2p")
DISTANCE_HEADER = ("row", "fold", "y", "id1", "img1", "id2", "img2", "ref1", "ref2",
                   "d1", "d2", "d_ref", "threshold")


@dataclass(frozen=True)
class Triplet:
    id1: str
    img1: str
    id2: str
    img2: str
    y: int
    fold: int = None


@dataclass(frozen=True)
class Quintuple:
    id1: str
    img1: str
    id2: str
    img2: str
    img1p: str
    img2p: str
    y: int
    fold: int = 0


def contiguous_folds(n, n_folds=N_FOLDS):
    return [i * n_folds // n for i in range(n)]


# -- protocol files --------------------------------------------------------


def write_protocol(path, records):
    quint = bool(records) and isinstance(records[0], Quintuple)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUINTUPLE_HEADER if quint else TRIPLET_HEADER)
        for r in records:
            row = [r.fold if r.fold is not None else "", r.y, r.id1, r.img1, r.id2, r.img2]
            if quint:
                row += [r.img1p, r.img2p]
            w.writerow(row)


def read_protocol(path):
    """Load a triplet or quintuple CSV; the header decides which."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = tuple(reader.fieldnames or ())
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read protocol {path}: {exc}") from exc
    if header not in (TRIPLET_HEADER, QUINTUPLE_HEADER):
        raise ProtocolError(f"{path}: header must be {','.join(QUINTUPLE_HEADER)} or the first six columns")
    out = []
    for r in rows:
        fold = int(r["fold"]) if r["fold"] not in ("", None) else None
        y = int(r["y"])
        if y not in (0, 1):
            raise ProtocolError(f"{path}: label must be 0 or 1, got {y}")
        if header == QUINTUPLE_HEADER:
            out.append(Quintuple(r["id1"], r["img1"], r["id2"], r["img2"], r["img1p"], r["img2p"], y,
                                 0 if fold is None else fold))
        else:
            out.append(Triplet(r["id1"], r["img1"], r["id2"], r["img2"], y, fold))
    if header == QUINTUPLE_HEADER and any(r["fold"] in ("", None) for r in rows):
        folds = contiguous_folds(len(out))
        out = [Quintuple(**{**asdict(q), "fold": f}) for q, f in zip(out, folds)]
    return out


def protocol_hash(records):
    return seeding.json_hash([asdict(r) for r in records])


# -- construction ----------------------------------------------------------


def make_triplets(index, n_genuine, n_imposter, seed, n_folds=N_FOLDS):
    """Random verification pairs from a dataset index, balanced over folds."""
    rng = seeding.numpy_rng(seeding.spawn(seed, 1)[0])
    multi = [i for i in index.identities if len(index.by_identity[i]) >= 2]
    if n_genuine and not multi:
        raise ProtocolError("genuine pairs need an identity with at least two images")
    if n_imposter and len(index.identities) < 2:
        raise ProtocolError("imposter pairs need at least two identities")
    genuine, imposter = [], []
    for _ in range(n_genuine):
        ident = multi[rng.integers(len(multi))]
        a, b = rng.choice(len(index.by_identity[ident]), 2, replace=False)
        imgs = index.by_identity[ident]
        genuine.append((ident, imgs[a], ident, imgs[b], 1))
    ids = index.identities
    for _ in range(n_imposter):
        i, j = rng.choice(len(ids), 2, replace=False)
        im1, im2 = index.by_identity[ids[i]], index.by_identity[ids[j]]
        imposter.append((ids[i], im1[rng.integers(len(im1))], ids[j], im2[rng.integers(len(im2))], 0))
    out = []
    for group in (genuine, imposter):
        for k, fold in enumerate(contiguous_folds(len(group), n_folds)):
            out.append((fold, group[k]))
    out.sort(key=lambda t: t[0])  # stable: genuine before imposter within a fold
    return [Triplet(*rec, fold=fold) for fold, rec in out]


def _other_image(index, ident, exclude, rng):
    pool = [p for p in index.by_identity[ident] if p != exclude]
    return pool[rng.integers(len(pool))]


def build_quintuples(triplets, index, seed, stats=None):
    """Extend triplets with a second image per identity.

    A pair whose identities lack a second image is replaced by a freshly
    sampled pair with the same label drawn from identities that have at
    least two images.  ``stats`` (a dict), if given, receives replacement counts.
    """
    rng = seeding.numpy_rng(seeding.spawn(seed, 1)[0])
    eligible = [i for i in index.identities if len(index.by_identity[i]) >= 2]
    if not eligible:
        raise ProtocolError("no identity has two or more images; quintuples are impossible")
    folds = contiguous_folds(len(triplets)) if any(t.fold is None for t in triplets) else [t.fold for t in triplets]
    counts = {"replaced_genuine": 0, "replaced_imposter": 0}
    out = []
    for t, fold in zip(triplets, folds):
        for ident, img in ((t.id1, t.img1), (t.id2, t.img2)):
            if ident not in index.by_identity or img not in index.by_identity[ident]:
                raise DataError(f"protocol image {img} of identity {ident} is not in the dataset index")
        if (t.y == 1) != (t.id1 == t.id2):
            raise ProtocolError(f"label {t.y} contradicts identities {t.id1}, {t.id2}")
        id1, img1, id2, img2 = t.id1, t.img1, t.id2, t.img2
        if id1 not in eligible or id2 not in eligible:
            if t.y == 1:
                id1 = id2 = eligible[rng.integers(len(eligible))]
                a, b = rng.choice(len(index.by_identity[id1]), 2, replace=False)
                img1, img2 = index.by_identity[id1][a], index.by_identity[id1][b]
                counts["replaced_genuine"] += 1
            else:
                if len(eligible) < 2:
                    raise ProtocolError("imposter replacement needs two identities with two or more images")
                i, j = rng.choice(len(eligible), 2, replace=False)
                id1, id2 = eligible[i], eligible[j]
                img1 = index.by_identity[id1][rng.integers(len(index.by_identity[id1]))]
                img2 = index.by_identity[id2][rng.integers(len(index.by_identity[id2]))]
                counts["replaced_imposter"] += 1
        out.append(Quintuple(id1, img1, id2, img2, _other_image(index, id1, img1, rng),
                             _other_image(index, id2, img2, rng), t.y, fold))
    if stats is not None:
        stats.update(counts)
    if counts["replaced_genuine"] or counts["replaced_imposter"]:
        log.info("replaced %(replaced_genuine)d genuine and %(replaced_imposter)d imposter pairs", counts)
    return out


# -- thresholds and metrics ------------------------------------------------


def _above(x):
    return float(np.nextafter(x, np.inf))


def verification_accuracy(distances, labels, t):
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    return float(np.mean((d < t) == y))


def compute_threshold(distances, labels):
    """Threshold maximizing ``#[d < t, y = 1] + #[d >= t, y = 0]``.

    Candidates are the smallest distance (rejects everything), the midpoints
    between consecutive distinct distances, and the float just above the
    largest distance (accepts everything).  Ties go to the smallest candidate.
    """
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if d.size == 0 or d.shape != y.shape:
        raise DomainError("threshold search needs equally many (non-zero) distances and labels")
    u = np.unique(d)
    cands = np.concatenate([[u[0]], (u[:-1] + u[1:]) / 2.0, [_above(u[-1])]])
    gen = np.sort(d[y])
    imp = np.sort(d[~y])
    correct = np.searchsorted(gen, cands, "left") + (imp.size - np.searchsorted(imp, cands, "left"))
    return float(cands[int(np.argmax(correct))])


def compute_far_threshold(imposter_distances, far=DEFAULT_FAR):
    """Largest t with ``#[d < t] / n <= far`` over imposter distances."""
    d = np.sort(np.asarray(imposter_distances, dtype=np.float64))
    if d.size == 0:
        raise DomainError("FAR threshold needs at least one imposter distance")
    if not 0.0 <= far <= 1.0:
        raise DomainError(f"far must lie in [0, 1], got {far}")
    k = math.floor(far * d.size + 1e-9)
    return _above(d[-1]) if k >= d.size else float(d[k])


def _subset(labels, y):
    mask = np.asarray(labels).astype(int) == y
    if not mask.any():
        raise DomainError(f"no pairs with label y={y}")
    return mask


def count_morph_matches(d1, d2, labels, t, y=0):
    """Number of pairs with label ``y`` whose morph is accepted as both identities."""
    mask = _subset(labels, y)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), mask.shape)
    hit = (np.asarray(d1) < t) & (np.asarray(d2) < t)
    return int(np.count_nonzero(hit & mask)), int(np.count_nonzero(mask))


def acc_morph(d1, d2, labels, t, y=0):
    """Percentage of label-``y`` morphs NOT accepted as both identities; ``t`` may be per pair."""
    hits, n = count_morph_matches(d1, d2, labels, t, y)
    return 100.0 * (1.0 - hits / n)


def acc_per_side(d_side, labels, t, y=0):
    """Percentage of label-``y`` morphs rejected as the identity behind ``d_side``."""
    mask = _subset(labels, y)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), mask.shape)
    hits = np.count_nonzero((np.asarray(d_side) < t) & mask)
    return 100.0 * (1.0 - hits / np.count_nonzero(mask))


# -- evaluation ------------------------------------------------------------


def _encode_paths(enc, store, paths, batch_size=64):
    paths = sorted(set(paths))
    feats = {}
    with torch.no_grad():
        for s in range(0, len(paths), batch_size):
            part = paths[s:s + batch_size]
            out = encode(enc, store.batch(part))
            for j, p in enumerate(part):
                feats[p] = out.select(slice(j, j + 1))
    return feats


class FeatureCache:
    """Per-encoder embeddings of protocol images, shared across alphas."""

    def __init__(self, store):
        self.store = store
        self._by_enc = {}

    def get(self, enc, paths):
        key = id(enc)
        have = self._by_enc.setdefault(key, {})
        missing = [p for p in set(paths) if p not in have]
        if missing:
            have.update(_encode_paths(enc, self.store, missing))
        return have


@dataclass
class MorphDistances:
    d1: np.ndarray  # d(f_m, f(ref1))
    d2: np.ndarray  # d(f_m, f(ref2))
    d_ref: np.ndarray  # d(f(ref1), f(ref2)), basis of the thresholds


def morph_distances(gen, enc_gen, enc_test, quintuples, alpha, store, mode="quintuple",
                    features=None, batch_size=64):
    """Morph every pair from (img1, img2) and measure it against the evaluation references."""
    if mode not in ("quintuple", "triplet"):
        raise DomainError(f"mode must be 'quintuple' or 'triplet', got {mode!r}")
    features = features or FeatureCache(store)
    refs = [(q.img1p, q.img2p) if mode == "quintuple" else (q.img1, q.img2) for q in quintuples]
    fg = features.get(enc_gen, [p for q in quintuples for p in (q.img1, q.img2)])
    ft = features.get(enc_test, [p for r in refs for p in r])
    was_training = gen.training
    gen.eval()
    d1, d2, dr = [], [], []
    with torch.no_grad():
        for s in range(0, len(quintuples), batch_size):
            part = quintuples[s:s + batch_size]
            pref = refs[s:s + batch_size]
            f1 = FaceFeatures.cat(fg[q.img1] for q in part)
            f2 = FaceFeatures.cat(fg[q.img2] for q in part)
            fm = encode(enc_test, gen(f1, f2, alpha)).f
            r1 = torch.cat([ft[a].f for a, _ in pref])
            r2 = torch.cat([ft[b].f for _, b in pref])
            d1.append(cosine_distance(fm, r1))
            d2.append(cosine_distance(fm, r2))
            dr.append(cosine_distance(r1, r2))
    gen.train(was_training)
    as_np = lambda xs: torch.cat(xs).double().numpy()
    return MorphDistances(as_np(d1), as_np(d2), as_np(dr))


def fold_thresholds(d_ref, labels, folds, threshold_mode="max_accuracy", far=DEFAULT_FAR):
    """Per-fold thresholds fitted on the other folds (all data if only one fold exists)."""
    d_ref = np.asarray(d_ref, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    folds = np.asarray(folds)
    out = {}
    uniq = sorted(set(folds.tolist()))
    for k in uniq:
        train = folds != k if len(uniq) > 1 else np.ones_like(folds, dtype=bool)
        if threshold_mode == "max_accuracy":
            out[k] = compute_threshold(d_ref[train], labels[train])
        elif threshold_mode == "far":
            out[k] = compute_far_threshold(d_ref[train & (labels == 0)], far)
        else:
            raise DomainError(f"unknown threshold mode {threshold_mode!r}")
    return out


@dataclass
class MorphReport:
    alpha: float
    mode: str
    threshold_mode: str
    far: float
    n_same: int
    n_diff: int
    thresholds: dict
    acc_morph_same: float
    acc_morph_diff: float
    matches_same: int
    matches_diff: int
    acc_side1_diff: float
    acc_side2_diff: float
    acc_side1_same: float
    acc_side2_same: float
    verification_accuracy: float
    global_thresholds: dict
    far_operating_point: dict
    rows: list = field(default_factory=list, repr=False)

    def metrics(self):
        d = asdict(self)
        d.pop("rows")
        d["thresholds"] = {str(k): v for k, v in self.thresholds.items()}
        d["table"] = {k: _pct(getattr(self, k)) for k in
                      ("acc_morph_same", "acc_morph_diff", "acc_side1_diff", "acc_side2_diff")}
        return d

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            json.dump(self.metrics(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if csv_path:
            write_distances(csv_path, self.rows)


def _pct(x):
    return None if x is None else f"{x:.1f}"


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except DomainError:
        return None


def write_distances(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DISTANCE_HEADER)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in DISTANCE_HEADER])


def read_distances(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DISTANCE_HEADER:
            raise DataError(f"{path}: unexpected distance CSV header")
        rows = []
        for r in reader:
            for c in ("row", "fold", "y"):
                r[c] = int(r[c])
            for c in ("d1", "d2", "d_ref", "threshold"):
                r[c] = float(r[c])
            rows.append(r)
    return rows


def summarize(quintuples, dist, alpha, mode="quintuple", threshold_mode="max_accuracy", far=DEFAULT_FAR):
    """Cross-validated Acc_morph report from precomputed distances."""
    labels = np.array([q.y for q in quintuples])
    folds = np.array([q.fold for q in quintuples])
    th = fold_thresholds(dist.d_ref, labels, folds, threshold_mode, far)
    t = np.array([th[f] for f in folds.tolist()])
    m_same = _safe(count_morph_matches, dist.d1, dist.d2, labels, t, 1)
    m_diff = _safe(count_morph_matches, dist.d1, dist.d2, labels, t, 0)

    g_acc = compute_threshold(dist.d_ref, labels)
    imp = dist.d_ref[labels == 0]
    g_far = compute_far_threshold(imp, far) if imp.size else None
    far_point = {}
    if g_far is not None:
        far_point = {"threshold": g_far, "acc_morph_diff": acc_morph(dist.d1, dist.d2, labels, g_far, 0),
                     "attack_success_diff": 100.0 - acc_morph(dist.d1, dist.d2, labels, g_far, 0)}

    rows = []
    for i, q in enumerate(quintuples):
        r1, r2 = (q.img1p, q.img2p) if mode == "quintuple" else (q.img1, q.img2)
        rows.append({"row": i, "fold": q.fold, "y": q.y, "id1": q.id1, "img1": q.img1, "id2": q.id2,
                     "img2": q.img2, "ref1": r1, "ref2": r2, "d1": float(dist.d1[i]),
                     "d2": float(dist.d2[i]), "d_ref": float(dist.d_ref[i]), "threshold": float(t[i])})
    n_same = int(np.count_nonzero(labels == 1))
    n_diff = int(np.count_nonzero(labels == 0))
    return MorphReport(
        alpha=float(alpha), mode=mode, threshold_mode=threshold_mode, far=far,
        n_same=n_same, n_diff=n_diff, thresholds=th,
        acc_morph_same=None if m_same is None else 100.0 * (1 - m_same[0] / m_same[1]),
        acc_morph_diff=None if m_diff is None else 100.0 * (1 - m_diff[0] / m_diff[1]),
        matches_same=None if m_same is None else m_same[0],
        matches_diff=None if m_diff is None else m_diff[0],
        acc_side1_diff=_safe(acc_per_side, dist.d1, labels, t, 0),
        acc_side2_diff=_safe(acc_per_side, dist.d2, labels, t, 0),
        acc_side1_same=_safe(acc_per_side, dist.d1, labels, t, 1),
        acc_side2_same=_safe(acc_per_side, dist.d2, labels, t, 1),
        verification_accuracy=100.0 * float(np.mean((dist.d_ref < t) == (labels == 1))),
        global_thresholds={"max_accuracy": g_acc, "far": g_far},
        far_operating_point=far_point,
        rows=rows,
    )


class DistanceCache:
    """On-disk morph distances keyed by generator, encoders, alpha, protocol and mode."""

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    @staticmethod
    def key(gen, enc_gen, enc_test, quintuples, alpha, mode):
        return seeding.json_hash({
            "generator": seeding.module_hash(gen), "enc_gen": seeding.module_hash(enc_gen),
            "enc_test": seeding.module_hash(enc_test), "alpha": repr(float(alpha)),
            "protocol": protocol_hash(quintuples), "mode": mode,
        })

    def load(self, key):
        path = os.path.join(self.directory, key + ".npz")
        if not os.path.exists(path):
            return None
        with np.load(path) as z:
            return MorphDistances(z["d1"], z["d2"], z["d_ref"])

    def save(self, key, dist):
        np.savez(os.path.join(self.directory, key + ".npz"), d1=dist.d1, d2=dist.d2, d_ref=dist.d_ref)


def evaluate(gen, enc_gen, enc_test, quintuples, alpha, store, mode="quintuple",
             threshold_mode="max_accuracy", far=DEFAULT_FAR, features=None, cache=None):
    """Morph every protocol pair at ``alpha`` and report Acc_morph under ``enc_test``."""
    if not quintuples:
        raise ProtocolError("empty protocol")
    dist = None
    if cache is not None:
        key = cache.key(gen, enc_gen, enc_test, quintuples, alpha, mode)
        dist = cache.load(key)
    if dist is None:
        dist = morph_distances(gen, enc_gen, enc_test, quintuples, alpha, store, mode, features)
        if cache is not None:
            cache.save(key, dist)
    return summarize(quintuples, dist, alpha, mode, threshold_mode, far)


SWEEP_HEADER = ("alpha", "acc_morph", "acc_side1", "acc_side2")


def sweep_alpha(gen, enc_gen, enc_test, quintuples, alphas, store, mode="quintuple",
                threshold_mode="max_accuracy", far=DEFAULT_FAR, cache=None):
    """Imposter-pair Acc_morph and per-side accuracies for each alpha."""
    alphas = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise DomainError("alphas must lie in [0, 1]")
    features = FeatureCache(store)
    rows = []
    for a in alphas:
        rep = evaluate(gen, enc_gen, enc_test, quintuples, a, store, mode, threshold_mode, far,
                       features=features, cache=cache)
        rows.append({"alpha": a, "acc_morph": rep.acc_morph_diff,
                     "acc_side1": rep.acc_side1_diff, "acc_side2": rep.acc_side2_diff})
    return rows


def write_sweep(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([repr(float(r[c])) for c in SWEEP_HEADER])
