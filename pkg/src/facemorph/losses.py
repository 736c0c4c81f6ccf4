"""Alpha-weighted generator losses and the discriminator loss.

Every loss takes batched tensors and returns the batch mean.  The identity,
perceptual and style terms are mixed with :func:`facemorph.mixing.mix`, so
swapping the two faces together with ``alpha -> 1 - alpha`` leaves each loss
bitwise unchanged.
"""

from dataclasses import dataclass, fields

import torch

from facemorph.encoder import cosine_distance
from facemorph.errors import ConfigError, DomainError, ShapeError
from facemorph.mixing import mix

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_id: float = 2.0
    lambda_per: float = 0.5
    lambda_style: float = 120.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ConfigError(f"{f.name} must be >= 0, got {v}")


@dataclass
class LossBreakdown:
    adv_g: torch.Tensor
    id: torch.Tensor
    per: torch.Tensor
    style: torch.Tensor
    total: torch.Tensor
    adv_d: torch.Tensor = None

    def as_floats(self):
        out = {}
        for name in ("adv_g", "adv_d", "id", "per", "style", "total"):
            v = getattr(self, name)
            out[name] = float("nan") if v is None else float(torch.as_tensor(v).detach())
        return out


def _prob(p):
    p = torch.as_tensor(p)
    if not torch.is_floating_point(p):
        p = p.double()
    if torch.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise DomainError("probabilities must lie in [0, 1]")
    return p.clamp(EPS, 1.0 - EPS)


def loss_adv_generator(p_m):
    """``-log D(X_m)``."""
    return -torch.log(_prob(p_m)).mean()


def loss_adv_discriminator(p_m, p_1, p_2):
    """``-log(1 - D(X_m)) - (log D(X_1) + log D(X_2)) / 2``."""
    p_m, p_1, p_2 = _prob(p_m), _prob(p_1), _prob(p_2)
    return (-torch.log1p(-p_m) - 0.5 * (torch.log(p_1) + torch.log(p_2))).mean()


def loss_identity(f_m, f_1, f_2, alpha):
    return mix(cosine_distance(f_m, f_1), cosine_distance(f_m, f_2), alpha).mean()


def _check_maps(maps_1, maps_2, maps_m):
    maps_1, maps_2, maps_m = list(maps_1), list(maps_2), list(maps_m)
    if not (len(maps_1) == len(maps_2) == len(maps_m)) or not maps_m:
        raise ShapeError("all three map lists need the same, nonzero number of taps")
    for a, b, m in zip(maps_1, maps_2, maps_m):
        if not (a.shape == b.shape == m.shape):
            raise ShapeError(f"tap shapes differ: {tuple(a.shape)}, {tuple(b.shape)}, {tuple(m.shape)}")
        if m.dim() < 2:
            raise ShapeError("maps must be batched")
    return zip(maps_1, maps_2, maps_m)


def loss_perceptual(maps_1, maps_2, maps_m, alpha):
    """Per tap: alpha/N |F1 - Fm|_1 + (1 - alpha)/N |F2 - Fm|_1, summed over taps."""
    total = 0.0
    for f1, f2, fm in _check_maps(maps_1, maps_2, maps_m):
        n = fm[0].numel()
        d1 = (f1 - fm).abs().flatten(1).sum(1) / n
        d2 = (f2 - fm).abs().flatten(1).sum(1) / n
        total = total + mix(d1, d2, alpha)
    return total.mean()


def gram(fmap):
    """Channel Gram matrix ``M^T M / (C * S)`` of a ``(N, C, H, W)`` or ``(C, H, W)`` map."""
    single = fmap.dim() == 3
    if single:
        fmap = fmap.unsqueeze(0)
    if fmap.dim() != 4 or fmap.numel() == 0:
        raise ShapeError(f"gram needs a non-empty (N, C, H, W) map, got {tuple(fmap.shape)}")
    n, c, h, w = fmap.shape
    m = fmap.reshape(n, c, h * w)
    g = torch.bmm(m, m.transpose(1, 2)) / (c * h * w)
    return g[0] if single else g


def loss_style(maps_1, maps_2, maps_m, alpha):
    total = 0.0
    for f1, f2, fm in _check_maps(maps_1, maps_2, maps_m):
        gm = gram(fm)
        d1 = (gram(f1) - gm).pow(2).sum((1, 2))
        d2 = (gram(f2) - gm).pow(2).sum((1, 2))
        total = total + mix(d1, d2, alpha)
    return total.mean()


def loss_total(adv_g, id_, per, style, weights=None, adv_d=None):
    w = weights or LossWeights()
    total = w.lambda_adv * adv_g + w.lambda_id * id_ + w.lambda_per * per + w.lambda_style * style
    return LossBreakdown(adv_g=adv_g, id=id_, per=per, style=style, total=total, adv_d=adv_d)
