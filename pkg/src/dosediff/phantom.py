"""Deterministic synthetic cases: geometric anatomy plus an analytic dose.

Organ positions are given as fractions of the field-of-view half extent so a
layout works on any grid; radii, gaps and the dose fall-off are in mm. For
the lung site the PTV is placed near the spinal cord so that the rasterized
cord maximum sits between 45% and 67% of prescription: compliant with the
45 Gy cord limit, and failing it once the dose is doubled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volumes import (
    Case,
    CTVolume,
    DoseVolume,
    Grid,
    Structure,
    StructureSet,
    normalize_ct,
    normalize_dose,
)

RNG_NAME = "numpy.Philox"

HU_AIR = -1000.0
HU_TISSUE = 0.0
HU_LUNG = -700.0
HU_CORD = 400.0
HU_HEART = 40.0
HU_ESOPHAGUS = 20.0
HU_TUMOR = 30.0
HU_BRAINSTEM = 30.0
HU_PAROTID = -50.0

LUNG_STRUCTURES = ("PTV", "SpinalCord", "Total Lung-GTV", "Heart", "Esophagus")
HEAD_NECK_STRUCTURES = ("PTV", "BrainStem", "SpinalCord", "ParotidIps-PTV", "ParotidCon-PTV")


@dataclass(frozen=True)
class PhantomSpec:
    grid: Grid = field(default_factory=Grid)
    site: str = "lung"
    prescription: float = 60.0
    ptv_radius: float = 15.0
    cord_radius: float = 6.0
    cord_gap_sigmas: float = 0.85  # PTV surface to cord surface, in fall-off sigmas
    ptv_angle_deg: float = 45.0  # direction from cord to PTV in the axial plane
    lung_semi_axes: tuple = (0.8, 0.5, 0.32)
    heart_center: tuple = (-0.45, -0.3, 0.15)
    heart_semi_axes: tuple = (0.35, 0.35, 0.35)
    esophagus_axis: tuple = (0.38, 0.12)
    esophagus_radius: float = 5.0
    dose_falloff_sigma: float = 10.0
    jitter: float = 1.0  # scales every seeded perturbation; 0 gives the nominal layout
    technique: str = "IMRT"
    seed: int = 0

    def __post_init__(self):
        if self.site not in ("lung", "head-neck"):
            raise ValueError(f"unknown site {self.site!r}")
        if self.ptv_radius <= 0 or self.cord_radius <= 0:
            raise ValueError("radii must be positive")
        if self.dose_falloff_sigma <= 0:
            raise ValueError("dose fall-off sigma must be positive")


def desk_spec(site="lung", seed=0, **overrides):
    """32^3 grid at 5 mm, the scale used by the desk training runs."""
    params = dict(grid=Grid((32, 32, 32), (5.0, 5.0, 5.0)), site=site, seed=seed)
    params.update(overrides)
    return PhantomSpec(**params)


def _coords(grid):
    """Voxel-center coordinates in mm relative to the grid center."""
    axes = []
    for axis, (n, s) in enumerate(zip(grid.shape, grid.spacing)):
        c = (np.arange(n) + 0.5 - n / 2.0) * s
        shape = [1, 1, 1]
        shape[axis] = n
        axes.append(c.reshape(shape))
    return axes


def _ellipsoid(z, y, x, center, semi):
    return ((z - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2 + ((x - center[2]) / semi[2]) ** 2 <= 1.0


def _cylinder(z, y, x, axis_yx, radius):
    inside = (y - axis_yx[0]) ** 2 + (x - axis_yx[1]) ** 2 <= radius**2
    return np.broadcast_to(inside, np.broadcast_shapes(z.shape, y.shape, x.shape))


def distance_to_mask(mask, spacing):
    """Euclidean distance in mm from every voxel center to the nearest mask voxel."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("distance to an empty mask is undefined")
    return ndimage.distance_transform_edt(~mask, sampling=spacing)


def analytic_dose(ptv, prescription, sigma, grid):
    """Gaussian fall-off from the PTV: Rx * exp(-dist^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ptv = np.asarray(ptv).astype(bool)
    if not ptv.any():
        raise ValueError("PTV empty")
    dist = distance_to_mask(ptv, grid.spacing)
    dose_gy = prescription * np.exp(-(dist**2) / (2.0 * sigma**2))
    values, scale = normalize_dose(dose_gy, ptv)
    return DoseVolume(grid, values.astype(np.float32), scale)


CORD_DOSE_BAND = (0.45, 0.67)  # cord Dmax as a fraction of Rx for the lung layout


def _place_lung_ptv(spec, grid, zyx, body, cord, cord_yx, cord_r, angle, center_z):
    """Slide the PTV along its approach direction until the rasterized cord
    maximum lands inside CORD_DOSE_BAND; the first gap tried is the nominal one."""
    z, y, x = zyx
    sigma = spec.dose_falloff_sigma
    offsets = [0.0]
    for k in range(1, 9):
        offsets += [-0.1 * k, 0.1 * k]
    fallback = None
    for off in offsets:
        gap = spec.ptv_radius + cord_r + (spec.cord_gap_sigmas + off) * sigma
        center = (center_z, cord_yx[0] - gap * math.cos(angle), cord_yx[1] - gap * math.sin(angle))
        ptv = _ellipsoid(z, y, x, center, (spec.ptv_radius,) * 3) & body
        if not ptv.any() or not cord.any():
            continue
        fallback = ptv if fallback is None else fallback
        dmin = distance_to_mask(ptv, grid.spacing)[cord].min()
        if CORD_DOSE_BAND[0] <= math.exp(-dmin**2 / (2 * sigma**2)) <= CORD_DOSE_BAND[1]:
            return ptv
    return fallback if fallback is not None else np.zeros(grid.shape, bool)


def generate_phantom(spec):
    rng = np.random.Generator(np.random.Philox(spec.seed))
    grid = spec.grid
    z, y, x = _coords(grid)
    half = [n * s / 2.0 for n, s in zip(grid.shape, grid.spacing)]
    j = spec.jitter

    # whole-anatomy shift (fraction of half extent) and organ size scale
    shift = rng.uniform(-0.03, 0.03, size=3) * j
    size = 1.0 + rng.uniform(-0.05, 0.05) * j
    angle = math.radians(spec.ptv_angle_deg + rng.uniform(-10.0, 10.0) * j)
    ptv_z = rng.uniform(-0.05, 0.05) * j

    def pos(frac_zyx):
        return tuple((f + d) * h for f, d, h in zip(frac_zyx, shift, half))

    body_semi = (0.78, 0.92) if spec.site == "lung" else (0.7, 0.6)
    cy, cx = shift[1] * half[1], shift[2] * half[2]
    body = ((y - cy) / (body_semi[0] * half[1])) ** 2 + ((x - cx) / (body_semi[1] * half[2])) ** 2 <= 1.0
    body = np.broadcast_to(body, grid.shape)

    hu = np.full(grid.shape, HU_AIR)
    hu[body] = HU_TISSUE
    masks = {}

    cord_yx = pos((0.0, 0.6 if spec.site == "lung" else 0.3, 0.0))[1:]
    cord_r = spec.cord_radius * size
    if spec.site == "lung":
        cord = _cylinder(z, y, x, cord_yx, cord_r) & body
        ptv = _place_lung_ptv(spec, grid, (z, y, x), body, cord, cord_yx, cord_r, angle,
                              (0.2 + ptv_z + shift[0]) * half[0])
    else:
        # anterior target, well clear of cord and brainstem
        ptv_center = ((-0.1 + ptv_z + shift[0]) * half[0], pos((0.0, -0.35, 0.0))[1],
                      cx - 0.12 * half[2] * math.cos(angle))
        ptv = _ellipsoid(z, y, x, ptv_center, (spec.ptv_radius,) * 3) & body

    if spec.site == "lung":
        lungs = np.zeros(grid.shape, bool)
        for side in (-1.0, 1.0):
            semi = tuple(a * h * size for a, h in zip(spec.lung_semi_axes, half))
            lungs |= _ellipsoid(z, y, x, pos((0.05, -0.05, 0.47 * side)), semi)
        lungs &= body
        hu[lungs] = HU_LUNG
        heart = _ellipsoid(z, y, x, pos(spec.heart_center),
                           tuple(a * h * size for a, h in zip(spec.heart_semi_axes, half))) & body & ~lungs
        hu[heart] = HU_HEART
        eso = _cylinder(z, y, x, pos((0.0,) + tuple(spec.esophagus_axis))[1:], spec.esophagus_radius * size) & body
        hu[eso] = HU_ESOPHAGUS
        hu[cord] = HU_CORD
        hu[ptv] = HU_TUMOR
        masks["SpinalCord"] = cord
        masks["Total Lung-GTV"] = lungs & ~ptv
        masks["Heart"] = heart & ~ptv
        masks["Esophagus"] = eso & ~ptv
    else:
        stem_center = pos((0.55, 0.25, 0.0))
        stem = _ellipsoid(z, y, x, stem_center, tuple(a * h * size for a, h in zip((0.25, 0.12, 0.12), half))) & body
        cord = _cylinder(z, y, x, cord_yx, cord_r) & body & (z < stem_center[0] - 0.2 * half[0])
        ipsi_side = -1.0 if ptv_center[2] < cx else 1.0
        r_par = 0.15 * half[2] * size
        ipsi = _ellipsoid(z, y, x, pos((0.2, 0.0, 0.45 * ipsi_side)), (r_par,) * 3) & body
        contra = _ellipsoid(z, y, x, pos((0.2, 0.0, -0.45 * ipsi_side)), (r_par,) * 3) & body
        hu[ipsi | contra] = HU_PAROTID
        hu[stem] = HU_BRAINSTEM
        hu[cord] = HU_CORD
        hu[ptv] = HU_TUMOR
        masks["BrainStem"] = stem & ~ptv
        masks["SpinalCord"] = cord & ~ptv
        masks["ParotidIps-PTV"] = ipsi & ~ptv
        masks["ParotidCon-PTV"] = contra & ~ptv

    if not ptv.any():
        raise ValueError("PTV empty after rasterization")

    structures = StructureSet([Structure("PTV", ptv.astype(np.uint8), spec.prescription)])
    for name, m in masks.items():
        structures.add(Structure(name, np.ascontiguousarray(m, dtype=np.uint8)))

    ct = CTVolume(grid, normalize_ct(hu))
    dose = analytic_dose(ptv, spec.prescription, spec.dose_falloff_sigma, grid)
    return Case(
        id=f"{spec.site}-{spec.seed:04d}",
        ct=ct,
        structures=structures,
        dose=dose,
        technique=spec.technique,
        site=spec.site,
        prescription=spec.prescription,
        extra={"rng": RNG_NAME, "seed": spec.seed},
    )


def phantom_cohort(count, site="lung", seed=0, **overrides):
    """``count`` desk-scale phantoms with seeds seed, seed+1, ..."""
    return [generate_phantom(desk_spec(site, seed + i, **overrides)) for i in range(count)]
