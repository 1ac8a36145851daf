"""Percentile conventions shared by dose normalization, constraints and metrics.

Doses are sorted in descending order; ``D_x`` is read at the fractional index
``x/100 * (n - 1)`` with linear interpolation between neighbouring order
statistics, so ``D_0`` is the maximum and ``D_100`` the minimum. Both numpy
arrays and torch tensors are accepted; the torch path keeps the autograd graph
(``torch.sort`` values carry a subgradient).
"""
import math

import numpy as np
import torch


def dose_at_volume(values, percent):
    """Dose received by the hottest ``percent`` % of ``values`` (1-D)."""
    if not 0.0 <= percent <= 100.0:
        raise ValueError(f"volume percent must lie in [0, 100], got {percent}")
    n = values.shape[0]
    if n == 0:
        raise ValueError("empty structure")
    pos = percent / 100.0 * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    if isinstance(values, torch.Tensor):
        ordered = torch.sort(values, descending=True).values
    else:
        ordered = np.sort(np.asarray(values, dtype=np.float64))[::-1]
    return ordered[lo] + frac * (ordered[hi] - ordered[lo])


def volume_at_dose(values, dose):
    """Fraction of ``values`` receiving at least ``dose``."""
    n = values.shape[0]
    if n == 0:
        raise ValueError("empty structure")
    if isinstance(values, torch.Tensor):
        return (values >= dose).to(values.dtype).mean()
    return float(np.count_nonzero(np.asarray(values) >= dose)) / n
