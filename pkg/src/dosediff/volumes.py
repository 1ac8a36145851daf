"""Grid-aligned volume types, normalization conventions and the case container."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dvhmath import dose_at_volume

CONTAINER_VERSION = 1
CT_CLIP_HU = 1000.0
CT_SCALE = 500.0
CT_AIR = -2.0
DOSE_DIVISOR = 10.0
DOSE_REFERENCE_PERCENT = 3.0

STANDARD_SHAPE = (96, 128, 144)
TECHNIQUES = ("IMRT", "VMAT")
SITES = ("lung", "head-neck")


class ContainerError(ValueError):
    """Malformed or incompatible case container."""


@dataclass(frozen=True)
class Grid:
    shape: tuple = STANDARD_SHAPE
    spacing: tuple = (2.5, 2.5, 2.5)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        if len(shape) != 3 or len(spacing) != 3:
            raise ValueError("grid needs three axes (z, y, x)")
        if min(shape) < 1:
            raise ValueError(f"voxel counts must be >= 1, got {shape}")
        if min(spacing) <= 0:
            raise ValueError(f"spacings must be > 0, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)

    @property
    def size(self):
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class DoseScale:
    d3_reference: float
    fixed_divisor: float = DOSE_DIVISOR

    @property
    def gy_per_unit(self):
        return self.d3_reference * self.fixed_divisor


@dataclass
class CTVolume:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        _check_shape(self.values, self.grid, "ct")


@dataclass
class DoseVolume:
    grid: Grid
    values: np.ndarray
    scale: DoseScale

    def __post_init__(self):
        _check_shape(self.values, self.grid, "dose")

    def to_gy(self):
        return denormalize_dose(self.values, self.scale)


@dataclass
class Structure:
    name: str
    mask: np.ndarray
    prescription: float | None = None  # Gy; set only for targets

    @property
    def is_ptv(self):
        return self.prescription is not None


class StructureSet:
    """Named binary masks; targets carry a prescription in Gy."""

    def __init__(self, structures=()):
        self._items = {}
        for s in structures:
            self.add(s)

    def add(self, structure):
        mask = np.asarray(structure.mask)
        if mask.size and not np.isin(mask, (0, 1)).all():
            raise ValueError(f"mask {structure.name!r} is not binary")
        self._items[structure.name] = Structure(structure.name, mask.astype(np.uint8), structure.prescription)

    def __getitem__(self, name):
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def __iter__(self):
        return iter(self._items.values())

    def __len__(self):
        return len(self._items)

    @property
    def names(self):
        return list(self._items)

    def ptvs(self):
        """Targets ordered by descending prescription."""
        return sorted((s for s in self if s.is_ptv), key=lambda s: -s.prescription)

    def oars(self):
        return [s for s in self if not s.is_ptv]

    def primary_ptv(self):
        ptvs = self.ptvs()
        if not ptvs:
            raise ValueError("structure set has no PTV")
        return ptvs[0]


@dataclass
class Case:
    id: str
    ct: CTVolume
    structures: StructureSet
    dose: DoseVolume | None = None
    technique: str = "IMRT"
    site: str = "lung"
    prescription: float = 60.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = self.ct.grid
        if self.dose is not None and self.dose.grid.shape != grid.shape:
            raise ValueError(f"dose grid {self.dose.grid.shape} != ct grid {grid.shape}")
        for s in self.structures:
            if s.mask.shape != grid.shape:
                raise ValueError(f"mask {s.name!r} shape {s.mask.shape} != ct grid {grid.shape}")
        if self.technique not in TECHNIQUES:
            raise ValueError(f"unknown technique {self.technique!r}")
        if self.site not in SITES:
            raise ValueError(f"unknown site {self.site!r}")
        if not self.structures.ptvs():
            raise ValueError(f"case {self.id!r} has no PTV")

    @property
    def grid(self):
        return self.ct.grid


def _check_shape(values, grid, what):
    if tuple(values.shape) != grid.shape:
        raise ValueError(f"{what} array shape {tuple(values.shape)} != grid {grid.shape}")


def normalize_ct(raw_hu):
    """Clamp HU to [-1000, 1000] and divide by 500."""
    raw = np.asarray(raw_hu, dtype=np.float64)
    bad = ~np.isfinite(raw)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite CT value at voxel {idx}")
    return (np.clip(raw, -CT_CLIP_HU, CT_CLIP_HU) / CT_SCALE).astype(np.float32)


def reference_dose(dose_gy, ptv):
    """D3 of the PTV: the dose exceeded by 3% of target voxels."""
    ptv = np.asarray(ptv).astype(bool)
    if not ptv.any():
        raise ValueError("PTV mask is empty")
    return float(dose_at_volume(np.asarray(dose_gy, dtype=np.float64)[ptv], DOSE_REFERENCE_PERCENT))


def normalize_dose(dose_gy, ptv):
    d3 = reference_dose(dose_gy, ptv)
    if d3 <= 0:
        raise ValueError("degenerate dose: PTV reference dose is 0")
    scale = DoseScale(d3, DOSE_DIVISOR)
    return np.asarray(dose_gy, dtype=np.float64) / scale.gy_per_unit, scale


def denormalize_dose(values, scale):
    return np.asarray(values, dtype=np.float64) * scale.gy_per_unit


def fit_array(arr, shape, pad_value=0.0):
    """Center-crop, then symmetric pad, each axis to ``shape``."""
    arr = np.asarray(arr)
    slices = []
    for n, m in zip(arr.shape, shape):
        start = max(n - m, 0) // 2
        slices.append(slice(start, start + min(n, m)))
    out = arr[tuple(slices)]
    pads = []
    for n, m in zip(out.shape, shape):
        deficit = m - n
        pads.append((deficit // 2, deficit - deficit // 2))
    if any(p != (0, 0) for p in pads):
        out = np.pad(out, pads, mode="constant", constant_values=pad_value)
    return np.ascontiguousarray(out)


def fit_to_grid(volume, target):
    """Crop/pad a CT, dose, mask array or whole case onto ``target``."""
    if isinstance(volume, CTVolume):
        return CTVolume(target, fit_array(volume.values, target.shape, CT_AIR))
    if isinstance(volume, DoseVolume):
        return DoseVolume(target, fit_array(volume.values, target.shape, 0.0), volume.scale)
    if isinstance(volume, Case):
        structures = StructureSet(
            Structure(s.name, fit_array(s.mask, target.shape, 0), s.prescription) for s in volume.structures
        )
        dose = fit_to_grid(volume.dose, target) if volume.dose is not None else None
        return replace(volume, ct=fit_to_grid(volume.ct, target), structures=structures, dose=dose)
    return fit_array(volume, target.shape, 0)


# ---------------------------------------------------------------- container

def _mask_filename(name):
    return "mask_" + name.replace("/", "_").replace("\\", "_") + ".u8"


def _write_raw(path, arr, dtype):
    np.ascontiguousarray(arr, dtype=dtype).tofile(path)


def _read_raw(path, dtype, shape):
    if not path.exists():
        raise ContainerError(f"missing array file {path.name}")
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if data.size < expected:
        raise ContainerError(f"truncated array {path.name}: {data.size} of {expected} values")
    if data.size > expected:
        raise ContainerError(f"shape mismatch in {path.name}: {data.size} values for manifest shape {shape}")
    return data.reshape(shape)


def save_case(case, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    structures = []
    for s in case.structures:
        fname = _mask_filename(s.name)
        _write_raw(path / fname, s.mask, "u1")
        structures.append({"name": s.name, "file": fname, "prescription_gy": s.prescription})
    _write_raw(path / "ct.f32", case.ct.values, "<f4")
    dose_scale = None
    if case.dose is not None:
        _write_raw(path / "dose.f32", case.dose.values, "<f4")
        dose_scale = [case.dose.scale.d3_reference, case.dose.scale.fixed_divisor]
    manifest = {
        "version": CONTAINER_VERSION,
        "id": case.id,
        "shape": list(case.grid.shape),
        "spacing": list(case.grid.spacing),
        "structures": structures,
        "dose_scale": dose_scale,
        "technique": case.technique,
        "site": case.site,
        "prescription_gy": case.prescription,
        "extra": case.extra,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


_MANIFEST_KEYS = ("id", "shape", "spacing", "structures", "technique", "site", "prescription_gy")


def load_case(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ContainerError(f"no manifest.json in {path}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != CONTAINER_VERSION:
        raise ContainerError(
            f"unsupported container version {manifest.get('version')!r} (expected {CONTAINER_VERSION})"
        )
    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    if missing:
        raise ContainerError(f"{mpath} is not a case manifest (missing {', '.join(missing)})")
    grid = Grid(tuple(manifest["shape"]), tuple(manifest["spacing"]))
    ct = CTVolume(grid, _read_raw(path / "ct.f32", "<f4", grid.shape).astype(np.float32))
    structures = StructureSet()
    for entry in manifest["structures"]:
        mask = _read_raw(path / entry["file"], "u1", grid.shape).astype(np.uint8)
        structures.add(Structure(entry["name"], mask, entry["prescription_gy"]))
    dose = None
    if manifest.get("dose_scale") is not None:
        values = _read_raw(path / "dose.f32", "<f4", grid.shape).astype(np.float32)
        dose = DoseVolume(grid, values, DoseScale(*manifest["dose_scale"]))
    return Case(
        id=manifest["id"],
        ct=ct,
        structures=structures,
        dose=dose,
        technique=manifest["technique"],
        site=manifest["site"],
        prescription=manifest["prescription_gy"],
        extra=manifest.get("extra", {}),
    )
