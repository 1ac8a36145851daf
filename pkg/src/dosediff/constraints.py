"""Clinical constraint table, differentiable penalty terms and compliance reports.

All penalties take a dose in Gy (numpy array or torch tensor) and a binary
mask on the same grid. ``hard`` mode uses exact max / indicator counts;
``soft`` mode swaps them for a temperature log-sum-exp and a sigmoid so
gradients reach every voxel. A penalty of ``None`` means the constraint is
inactive (structure absent or empty).
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .dvhmath import dose_at_volume

KINDS = ("Dmax", "Dmean", "Vx", "Dx", "D95")
DMAX_TAU = 1.0  # Gy
VX_TAU = 0.5  # Gy
COVERAGE_FACTOR = 0.95


class ConstraintTableError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSpec:
    structure: str
    kind: str
    dose_gy: float | None = None
    fraction: float | None = None
    weight: float = 1.0
    note: str = ""
    relative: bool = False  # dose_gy is a fraction of the case prescription

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind in ("Dmax", "Dmean", "Vx", "Dx") and (self.dose_gy is None or self.dose_gy <= 0):
            raise ValueError(f"{self.kind} on {self.structure!r} needs a positive dose threshold")
        if self.kind in ("Vx", "Dx", "D95") and (self.fraction is None or not 0 < self.fraction <= 1):
            raise ValueError(f"{self.kind} on {self.structure!r} needs a volume fraction in (0, 1]")
        if self.weight < 0:
            raise ValueError("constraint weight must be >= 0")

    def threshold(self, prescription=None):
        if self.relative:
            if prescription is None:
                raise ValueError(f"relative threshold on {self.structure!r} needs a prescription")
            return self.dose_gy * prescription
        return self.dose_gy

    @property
    def label(self):
        if self.kind == "Vx":
            return f"{self.structure} V{self.dose_gy:g}<={self.fraction:.0%}"
        if self.kind == "Dx":
            return f"{self.structure} D{100 * self.fraction:g}%<={self.dose_gy:g}Gy"
        if self.kind == "D95":
            return f"{self.structure} D95>={COVERAGE_FACTOR:.0%}Rx"
        unit = "Rx" if self.relative else "Gy"
        value = 100 * self.dose_gy if self.relative else self.dose_gy
        return f"{self.structure} {self.kind}<={value:g}{'%' if self.relative else ''}{unit}"


def _parse_float(text, lineno, column):
    try:
        return float(text)
    except ValueError:
        raise ConstraintTableError(f"line {lineno}: bad {column} value {text!r}") from None


def parse_constraint_table(text):
    specs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = [c.strip() for c in line.split("|")]
        if cols[0].lower() == "structure":
            continue
        if len(cols) < 5:
            raise ConstraintTableError(f"line {lineno}: expected at least 5 columns, got {len(cols)}")
        structure, kind, dose_txt, frac_txt, weight_txt = cols[:5]
        note = cols[5] if len(cols) > 5 else ""
        if kind not in KINDS:
            raise ConstraintTableError(f"line {lineno}: unknown kind {kind!r}")
        relative = False
        dose = None
        if dose_txt not in ("-", ""):
            if dose_txt.endswith("%Rx"):
                relative = True
                dose = _parse_float(dose_txt[:-3], lineno, "dose_gy") / 100.0
            else:
                dose = _parse_float(dose_txt, lineno, "dose_gy")
        frac = None if frac_txt in ("-", "") else _parse_float(frac_txt, lineno, "fraction")
        weight = _parse_float(weight_txt, lineno, "weight")
        try:
            specs.append(ConstraintSpec(structure, kind, dose, frac, weight, note, relative))
        except ValueError as exc:
            raise ConstraintTableError(f"line {lineno}: {exc}") from None
    return specs


def load_constraint_table(path=None):
    """Parse a table file; ``None`` loads the built-in default catalog."""
    if path is None:
        text = resources.files("dosediff").joinpath("data/default_constraints.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_constraint_table(text)


def default_constraints():
    return load_constraint_table(None)


def known_structures(specs):
    return {s.structure for s in specs}


# ------------------------------------------------------------------ penalties

def _as_tensor(dose):
    if isinstance(dose, torch.Tensor):
        return dose
    return torch.as_tensor(np.asarray(dose, dtype=np.float64))


def _masked(dose, mask):
    dose = _as_tensor(dose)
    if isinstance(mask, torch.Tensor):
        m = mask.to(torch.bool)
    else:
        m = torch.as_tensor(np.asarray(mask).astype(bool))
    if m.shape != dose.shape:
        raise ValueError(f"mask shape {tuple(m.shape)} != dose shape {tuple(dose.shape)}")
    if not bool(m.any()):
        return None
    return dose[m]


def _check_mode(mode):
    if mode not in ("hard", "soft"):
        raise ValueError(f"mode must be 'hard' or 'soft', got {mode!r}")


def soft_max(values, tau=DMAX_TAU):
    return tau * torch.logsumexp(values / tau, dim=0)


def soft_fraction_above(values, x, tau=VX_TAU):
    return torch.sigmoid((values - x) / tau).mean()


def _excess_sq(achieved, threshold):
    return torch.clamp(achieved / threshold - 1.0, min=0.0) ** 2


def dmax_penalty(dose, mask, threshold, mode="hard", tau=DMAX_TAU):
    _check_mode(mode)
    d = _masked(dose, mask)
    if d is None:
        return None
    achieved = d.max() if mode == "hard" else soft_max(d, tau)
    return _excess_sq(achieved, threshold)


def dmean_penalty(dose, mask, threshold, mode="hard"):
    _check_mode(mode)
    d = _masked(dose, mask)
    if d is None:
        return None
    return _excess_sq(d.mean(), threshold)


def dx_penalty(dose, mask, threshold, fraction, mode="hard"):
    _check_mode(mode)
    d = _masked(dose, mask)
    if d is None:
        return None
    return _excess_sq(dose_at_volume(d, 100.0 * fraction), threshold)


def vx_fraction(dose, mask, x, mode="hard", tau=VX_TAU):
    _check_mode(mode)
    d = _masked(dose, mask)
    if d is None:
        return None
    if mode == "hard":
        return (d >= x).to(d.dtype).mean()
    return soft_fraction_above(d, x, tau)


def vx_penalty(dose, mask, x, limit, mode="hard", tau=VX_TAU):
    frac = vx_fraction(dose, mask, x, mode, tau)
    if frac is None:
        return None
    return torch.clamp(frac - limit, min=0.0) ** 2


def d95_penalty(dose, ptv_mask, prescription, mode="hard"):
    """Coverage deficit against 95% of prescription; the interpolated order
    statistic gives the same value in both modes and a subgradient in soft."""
    _check_mode(mode)
    d = _masked(dose, ptv_mask)
    if d is None:
        raise ValueError("PTV mask is empty")
    d95 = dose_at_volume(d, 95.0)
    return torch.clamp(1.0 - d95 / (prescription * COVERAGE_FACTOR), min=0.0) ** 2


def _structure_prescription(structures, name, default):
    s = structures[name]
    return s.prescription if s.prescription is not None else default


def _case_prescription(structures, prescription):
    if prescription is not None:
        return prescription
    return structures.primary_ptv().prescription


def _is_active(structures, spec):
    return spec.structure in structures and bool(np.asarray(structures[spec.structure].mask).any())


def constraint_penalty(dose, structures, spec, mode="hard", prescription=None):
    """Penalty of one spec against a structure set, or ``None`` if inactive."""
    if not _is_active(structures, spec):
        return None
    rx = _case_prescription(structures, prescription)
    mask = structures[spec.structure].mask
    if spec.kind == "Dmax":
        return dmax_penalty(dose, mask, spec.threshold(rx), mode)
    if spec.kind == "Dmean":
        return dmean_penalty(dose, mask, spec.threshold(rx), mode)
    if spec.kind == "Dx":
        return dx_penalty(dose, mask, spec.threshold(rx), spec.fraction, mode)
    if spec.kind == "Vx":
        return vx_penalty(dose, mask, spec.threshold(rx), spec.fraction, mode)
    return d95_penalty(dose, mask, _structure_prescription(structures, spec.structure, rx), mode)


def cond_loss(dose, structures, specs, mode="soft", prescription=None):
    """Weighted sum of active penalties and the per-term breakdown."""
    dose = _as_tensor(dose)
    total = torch.zeros((), dtype=dose.dtype)
    breakdown = []
    for spec in specs:
        p = constraint_penalty(dose, structures, spec, mode, prescription)
        if p is None:
            continue
        total = total + spec.weight * p
        breakdown.append((spec, p))
    return total, breakdown


# ----------------------------------------------------------------- reporting

@dataclass(frozen=True)
class ConstraintResult:
    spec: ConstraintSpec
    achieved: float
    limit: float
    passed: bool
    margin: float  # >= 0 on the satisfied side


@dataclass(frozen=True)
class ComplianceReport:
    results: tuple
    rate: float
    note: str = ""

    @property
    def evaluated(self):
        return len(self.results)

    @property
    def passed(self):
        return sum(r.passed for r in self.results)

    def failures(self):
        return [r for r in self.results if not r.passed]


def achieved_value(dose, structures, spec, prescription=None):
    """Hard-mode achieved value and limit for an active spec."""
    rx = _case_prescription(structures, prescription)
    d = np.asarray(_masked(dose, structures[spec.structure].mask).detach().cpu().numpy(), dtype=np.float64)
    if spec.kind == "Dmax":
        return float(d.max()), spec.threshold(rx)
    if spec.kind == "Dmean":
        return float(d.mean()), spec.threshold(rx)
    if spec.kind == "Dx":
        return float(dose_at_volume(d, 100.0 * spec.fraction)), spec.threshold(rx)
    if spec.kind == "Vx":
        return float(np.count_nonzero(d >= spec.threshold(rx))) / d.size, spec.fraction
    target_rx = _structure_prescription(structures, spec.structure, rx)
    return float(dose_at_volume(d, 95.0)), COVERAGE_FACTOR * target_rx


def compliance_report(dose, structures, specs, prescription=None):
    results = []
    for spec in specs:
        if not _is_active(structures, spec):
            continue
        achieved, limit = achieved_value(dose, structures, spec, prescription)
        margin = achieved - limit if spec.kind == "D95" else limit - achieved
        results.append(ConstraintResult(spec, achieved, limit, margin >= 0, margin))
    if not results:
        return ComplianceReport((), 1.0, "no active constraints")
    return ComplianceReport(tuple(results), sum(r.passed for r in results) / len(results))
