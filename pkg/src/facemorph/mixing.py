"""Alpha-weighted two-term mixing with exact swap symmetry.

``mix(x1, x2, a)`` and ``mix(x2, x1, 1 - a)`` must agree bitwise, but
``1 - (1 - a) == a`` does not hold in floating point for ``a < 0.5``.  Both
calls are therefore reduced to one canonical form: the larger weight is
resolved in float64 (where ``1 - a`` is exact for ``a >= 0.5``) and always
applied to the first addend.
"""

import torch

from facemorph.errors import DomainError


def check_alpha(alpha):
    a = torch.as_tensor(alpha, dtype=torch.float64).detach()
    if a.dim() > 1:
        raise DomainError(f"alpha must be a scalar or a per-sample vector, got shape {tuple(a.shape)}")
    if torch.isnan(a).any() or (a < 0).any() or (a > 1).any():
        raise DomainError(f"alpha must lie in [0, 1], got {alpha!r}")
    return a


def _expand(t, like):
    if t.dim() == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.dim() - 1))


def mix(x1, x2, alpha):
    """``alpha * x1 + (1 - alpha) * x2`` with ``mix(x1, x2, a) == mix(x2, x1, 1 - a)`` exactly."""
    a = check_alpha(alpha)
    first = a >= 0.5
    w_hi = torch.where(first, a, 1.0 - a)
    w_lo = 1.0 - w_hi
    first = _expand(first, x1)
    hi = torch.where(first, x1, x2)
    lo = torch.where(first, x2, x1)
    dtype = x1.dtype
    return _expand(w_hi, x1).to(dtype) * hi + _expand(w_lo, x1).to(dtype) * lo
