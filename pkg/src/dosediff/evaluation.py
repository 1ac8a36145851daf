"""Dose-prediction metrics: MAE, isodose Dice, HD95, DVHs, DVH points, HI/CI, case reports.

Non-canonical choices, fixed here once:

* Dice of two dose fields is the mean of isodose-region Dice at 10/30/50/70/90 %
  of prescription (a level empty in both fields scores 1).
* HD95 is measured between the 50 %-prescription isodose surfaces.
* HI = (D2 - D98) / D50 and CI is the Paddick index.
* Isodose thresholds tolerate a relative 1e-6 so float32 round trips of a dose
  that sits exactly on prescription still count as covered.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .constraints import achieved_value, compliance_report
from .dvhmath import dose_at_volume, volume_at_dose

DICE_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)
HD_LEVEL = 0.5
ISODOSE_RTOL = 1e-6
BODY_THRESHOLD = -1.6  # normalized CT, i.e. -800 HU

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _values(dose, mask):
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise ValueError("empty mask")
    return np.asarray(dose, dtype=np.float64)[m]


def body_mask(ct_values, threshold=BODY_THRESHOLD):
    return np.asarray(ct_values) > threshold


def mae(pred, ref, body):
    body = np.asarray(body).astype(bool)
    if not body.any():
        raise ValueError("empty body mask")
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(ref, dtype=np.float64)
    return float(np.abs(diff[body]).mean())


def isodose_region(dose, threshold):
    return np.asarray(dose, dtype=np.float64) >= threshold * (1.0 - ISODOSE_RTOL)


def dice(a, b):
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / total


def dice_isodose(pred, ref, prescription, levels=DICE_LEVELS):
    per_level = {lvl: dice(isodose_region(pred, lvl * prescription), isodose_region(ref, lvl * prescription))
                 for lvl in levels}
    return per_level, float(np.mean(list(per_level.values())))


def surface(mask):
    """Region voxels with at least one 6-neighbour outside (the grid edge counts as outside)."""
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)


def _directed(src, dst, spacing):
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def surface_hd95(a, b, spacing):
    sa, sb = surface(a), surface(b)
    if not sa.any() or not sb.any():
        return math.nan
    d_ab = _directed(sa, sb, spacing)
    d_ba = _directed(sb, sa, spacing)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def hd95(pred, ref, prescription, level=HD_LEVEL, spacing=(1.0, 1.0, 1.0)):
    """95th-percentile symmetric surface distance in mm; NaN if a surface is empty."""
    return surface_hd95(isodose_region(pred, level * prescription), isodose_region(ref, level * prescription), spacing)


@dataclass(frozen=True)
class DVHCurve:
    structure: str
    edges: np.ndarray  # Gy
    fractions: np.ndarray

    def volume_at(self, dose_gy):
        i = int(np.searchsorted(self.edges, dose_gy, side="left"))
        return float(self.fractions[min(i, len(self.fractions) - 1)])


def dvh(dose, mask, bin_width=0.1, structure=""):
    """Cumulative DVH: fraction of the structure receiving >= each bin edge."""
    d = np.sort(_values(dose, mask))
    n_bins = int(math.floor(d[-1] / bin_width)) + 2
    edges = np.arange(n_bins) * bin_width
    fractions = (d.size - np.searchsorted(d, edges, side="left")) / d.size
    return DVHCurve(structure, edges, fractions)


_DX = re.compile(r"^D(\d+(?:\.\d+)?)$")
_VX = re.compile(r"^V(\d+(?:\.\d+)?)$")


def dvh_metric(dose, mask, metric):
    """'Dmax', 'Dmean', 'D<x>' (Gy to hottest x %) or 'V<x>' (fraction >= x Gy)."""
    d = _values(dose, mask)
    if metric == "Dmax":
        return float(d.max())
    if metric == "Dmean":
        return float(d.mean())
    m = _DX.match(metric)
    if m:
        return float(dose_at_volume(d, float(m.group(1))))
    m = _VX.match(metric)
    if m:
        return volume_at_dose(d, float(m.group(1)))
    raise ValueError(f"unknown DVH metric {metric!r}")


def hi(dose, ptv):
    d = _values(dose, ptv)
    d50 = dose_at_volume(d, 50.0)
    if d50 == 0:
        return math.nan
    return float((dose_at_volume(d, 2.0) - dose_at_volume(d, 98.0)) / d50)


def ci(dose, ptv, prescription):
    """Paddick conformity index TV_PIV^2 / (TV * PIV)."""
    tv = np.asarray(ptv).astype(bool)
    if not tv.any():
        raise ValueError("empty PTV")
    piv = isodose_region(dose, prescription)
    if not piv.any():
        return math.nan
    tv_piv = np.logical_and(tv, piv).sum()
    return float(tv_piv**2 / (tv.sum() * piv.sum()))


# ------------------------------------------------------------------ reports

# Table-style delta columns: key -> (structure, metric, scale); "PTV" means the primary target.
SITE_COLUMNS = {
    "lung": (
        ("dHI", "PTV", "HI", 1.0),
        ("dD98_gy", "PTV", "D98", 1.0),
        ("dD2_gy", "PTV", "D2", 1.0),
        ("dDmax_gy", "PTV", "Dmax", 1.0),
        ("dV20_lung_pct", "Total Lung-GTV", "V20", 100.0),
        ("dV30_heart_pct", "Heart", "V30", 100.0),
        ("dDmax_cord_gy", "SpinalCord", "Dmax", 1.0),
        ("dV30_esophagus_pct", "Esophagus", "V30", 100.0),
    ),
    "head-neck": (
        ("dHI", "PTV", "HI", 1.0),
        ("dD98_gy", "PTV", "D98", 1.0),
        ("dD2_gy", "PTV", "D2", 1.0),
        ("dDmax_gy", "PTV", "Dmax", 1.0),
        ("dDmax_brainstem_gy", "BrainStem", "Dmax", 1.0),
        ("dDmax_cord_gy", "SpinalCord", "Dmax", 1.0),
    ),
}

PTV_METRICS = ("D98", "D2", "D95", "Dmax", "Dmean", "HI", "CI")


def ptv_metrics(dose, mask, prescription):
    out = {m: dvh_metric(dose, mask, m) for m in ("D98", "D2", "D95", "Dmax", "Dmean")}
    out["HI"] = hi(dose, mask)
    out["CI"] = ci(dose, mask, prescription)
    return out


@dataclass
class CaseReport:
    case_id: str
    site: str
    mae: float
    dice: float
    dice_levels: dict
    hd95: float
    ptv: dict = field(default_factory=dict)  # name -> {metric: (pred, ref)}
    oar: list = field(default_factory=list)  # (label, pred, ref)
    deltas: dict = field(default_factory=dict)
    compliance: object = None
    reference_compliance: object = None

    def rows(self):
        rows = [("mae", self.mae), ("dice", self.dice)]
        rows += [(f"dice@{lvl:g}", v) for lvl, v in self.dice_levels.items()]
        rows.append(("hd95_mm", self.hd95))
        for name, metrics in self.ptv.items():
            for m, (p, r) in metrics.items():
                rows += [(f"{name}:{m}:pred", p), (f"{name}:{m}:ref", r)]
        for label, p, r in self.oar:
            rows += [(f"{label}:pred", p), (f"{label}:ref", r)]
        rows += list(self.deltas.items())
        rows += [("compliance_rate", self.compliance.rate), ("reference_compliance_rate", self.reference_compliance.rate)]
        return rows


def _delta(pred_dose, ref_dose, pred_case, ref_case, structure, metric, scale):
    structures = ref_case.structures
    if structure == "PTV":
        mask = structures.primary_ptv().mask
    elif structure in structures and structures[structure].mask.any():
        mask = structures[structure].mask
    else:
        return math.nan
    if metric == "HI":
        p, r = hi(pred_dose, mask), hi(ref_dose, mask)
    else:
        p, r = dvh_metric(pred_dose, mask, metric), dvh_metric(ref_dose, mask, metric)
    return abs(p - r) * scale


def evaluate_case(pred_case, ref_case, specs):
    """Compare a predicted case against its reference; both need a dose."""
    if pred_case.grid.shape != ref_case.grid.shape:
        raise ValueError(f"grid mismatch: predicted {pred_case.grid.shape} vs reference {ref_case.grid.shape}")
    if pred_case.dose is None or ref_case.dose is None:
        raise ValueError("both cases need a dose volume")
    pred_gy = pred_case.dose.to_gy()
    ref_gy = ref_case.dose.to_gy()
    rx = ref_case.prescription
    unit = ref_case.dose.scale.gy_per_unit
    body = body_mask(ref_case.ct.values)
    levels, mean_dice = dice_isodose(pred_gy, ref_gy, rx)
    report = CaseReport(
        case_id=ref_case.id,
        site=ref_case.site,
        mae=mae(pred_gy / unit, ref_gy / unit, body),
        dice=mean_dice,
        dice_levels=levels,
        hd95=hd95(pred_gy, ref_gy, rx, spacing=ref_case.grid.spacing),
    )
    for s in ref_case.structures.ptvs():
        p = ptv_metrics(pred_gy, s.mask, s.prescription)
        r = ptv_metrics(ref_gy, s.mask, s.prescription)
        report.ptv[s.name] = {m: (p[m], r[m]) for m in PTV_METRICS}
    report.compliance = compliance_report(pred_gy, ref_case.structures, specs)
    report.reference_compliance = compliance_report(ref_gy, ref_case.structures, specs)
    for res in report.reference_compliance.results:
        if res.spec.kind == "D95":
            continue
        p, _ = achieved_value(pred_gy, ref_case.structures, res.spec)
        report.oar.append((res.spec.label, p, res.achieved))
    for key, structure, metric, scale in SITE_COLUMNS[ref_case.site]:
        report.deltas[key] = _delta(pred_gy, ref_gy, pred_case, ref_case, structure, metric, scale)
    return report


def _fmt(v):
    if isinstance(v, float) and math.isnan(v):
        return "undefined"
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def write_report(report, out_dir, pred_case=None, bin_width=0.1):
    """Write ``<id>_report.tsv`` and, given the predicted case, one DVH CSV per structure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{report.case_id}_report.tsv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["metric", "value"])
        for k, v in report.rows():
            w.writerow([k, _fmt(v)])
    if pred_case is not None:
        dose = pred_case.dose.to_gy()
        for s in pred_case.structures:
            if s.mask.any():
                write_dvh_csv(dvh(dose, s.mask, bin_width, s.name), out_dir / f"{report.case_id}_dvh_{_safe(s.name)}.csv")
    return path


def _safe(name):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def write_dvh_csv(curve, path):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dose_gy", "volume_fraction"])
        for e, f in zip(curve.edges, curve.fractions):
            w.writerow([f"{e:.4f}", f"{f:.6f}"])


def summarize(reports):
    """Mean of every numeric row across reports (NaNs skipped)."""
    keys = [k for k, _ in reports[0].rows()]
    out = {}
    for k in keys:
        vals = [v for r in reports for kk, v in r.rows() if kk == k and isinstance(v, (int, float))]
        vals = [v for v in vals if not math.isnan(v)]
        out[k] = float(np.mean(vals)) if vals else math.nan
    return out
