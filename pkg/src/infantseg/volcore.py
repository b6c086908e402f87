"""Geometry-aware volume and label-map containers.

Arrays are indexed ``(x, y, z)`` in voxel space; orientation lives in the
affine. Intensities are stored as float32 and labels as uint8.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np
from scipy import ndimage

INTENSITY_DTYPE = np.float32
LABEL_DTYPE = np.uint8
NUM_CLASSES = 9


class Tissue(enum.IntEnum):
    BACKGROUND = 0
    CSF = 1
    GM = 2
    WM = 3
    VENTRICLE = 4
    CEREBELLUM = 5
    BASAL_GANGLIA = 6
    BRAINSTEM = 7
    HIPPOCAMPUS_AMYGDALA = 8

    @property
    def display_name(self) -> str:
        return TISSUE_NAMES[self]


# Display names in report row order.
TISSUE_NAMES = {
    Tissue.BACKGROUND: "Background",
    Tissue.CSF: "CSF",
    Tissue.GM: "GM",
    Tissue.WM: "WM",
    Tissue.VENTRICLE: "Ventricle",
    Tissue.CEREBELLUM: "Cerebellum",
    Tissue.BASAL_GANGLIA: "Basal Ganglia",
    Tissue.BRAINSTEM: "Brainstem",
    Tissue.HIPPOCAMPUS_AMYGDALA: "Hippocampus/Amygdala",
}

TISSUES = tuple(t for t in Tissue if t != Tissue.BACKGROUND)
CORTICAL_TISSUES = (Tissue.CSF, Tissue.GM, Tissue.WM)
DEEP_TISSUES = (
    Tissue.VENTRICLE,
    Tissue.CEREBELLUM,
    Tissue.BASAL_GANGLIA,
    Tissue.BRAINSTEM,
    Tissue.HIPPOCAMPUS_AMYGDALA,
)


class Modality(str, enum.Enum):
    T1W = "T1w"
    T2W = "T2w"
    SYNTHETIC = "synthetic"


class VolumeError(ValueError):
    pass


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _spacing_from_affine(affine: np.ndarray) -> tuple[float, float, float]:
    return tuple(float(s) for s in np.sqrt((affine[:3, :3] ** 2).sum(axis=0)))


def _check_geometry(spacing, affine):
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise VolumeError(f"spacing must be three positive values, got {spacing}")
    if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
        raise VolumeError("affine must be a finite 4x4 matrix")
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise VolumeError("affine is not invertible")


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None)
    modality: Modality = Modality.T2W

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"expected a 3D array, got shape {data.shape}")
        data = data.astype(INTENSITY_DTYPE, copy=False)
        if not np.all(np.isfinite(data)):
            raise VolumeError("non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing)
        affine = np.diag([*spacing, 1.0]) if self.affine is None else np.asarray(self.affine, float)
        _check_geometry(spacing, affine)
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _freeze(affine.copy()))
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, modality: Modality | None = None) -> "Volume":
        return Volume(data, self.spacing, self.affine, modality or self.modality)

    def same_grid(self, other, tol: float = 1e-4) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.affine, other.affine, atol=tol)
        )


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"expected a 3D array, got shape {data.shape}")
        if data.dtype.kind == "f":
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise VolumeError("label maps must hold integer codes")
        if data.size and (data.min() < 0 or data.max() >= NUM_CLASSES):
            raise VolumeError(f"label codes must lie in 0..{NUM_CLASSES - 1}")
        spacing = tuple(float(s) for s in self.spacing)
        affine = np.diag([*spacing, 1.0]) if self.affine is None else np.asarray(self.affine, float)
        _check_geometry(spacing, affine)
        object.__setattr__(self, "data", _freeze(data.astype(LABEL_DTYPE)))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _freeze(affine.copy()))

    @classmethod
    def like(cls, data: np.ndarray, ref) -> "LabelMap":
        return cls(data, ref.spacing, ref.affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def mask(self, code: int | None = None) -> np.ndarray:
        """Binary mask of ``code``, or of all foreground when ``code`` is None."""
        return self.data != 0 if code is None else self.data == code

    same_grid = Volume.same_grid


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _read_nifti(path, reorient: bool):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    img = nib.load(str(path))
    if reorient:
        img = nib.as_closest_canonical(img)
    if len(img.shape) != 3:
        raise VolumeError(f"{path.name}: expected a single-channel 3D image, got shape {img.shape}")
    affine = np.asarray(img.affine, dtype=float)
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise VolumeError(f"{path.name}: affine is not invertible")
    return img, affine


def load_volume(path, modality: Modality | str = Modality.T2W, reorient: bool = False) -> Volume:
    img, affine = _read_nifti(path, reorient)
    data = np.asarray(img.dataobj, dtype=INTENSITY_DTYPE)
    if not np.all(np.isfinite(data)):
        raise VolumeError(f"{Path(path).name}: non-finite intensities")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return Volume(data, spacing, affine, Modality(modality))


def load_labels(path, reorient: bool = False) -> LabelMap:
    img, affine = _read_nifti(path, reorient)
    data = np.asarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return LabelMap(data, spacing, affine)


def save_volume(v: Volume, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(np.asarray(v.data, dtype=INTENSITY_DTYPE), v.affine)
    img.header.set_zooms(v.spacing)
    img.header.set_data_dtype(INTENSITY_DTYPE)
    nib.save(img, str(path))
    return path


def save_labels(lm: LabelMap, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(np.asarray(lm.data, dtype=LABEL_DTYPE), lm.affine)
    img.header.set_zooms(lm.spacing)
    img.header.set_data_dtype(LABEL_DTYPE)
    nib.save(img, str(path))
    return path


def label_legend() -> dict[str, str]:
    return {str(int(t)): t.display_name for t in Tissue}


def write_label_legend(directory) -> Path:
    path = Path(directory) / "labels.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(label_legend(), indent=2))
    return path


# ---------------------------------------------------------------------------
# Array operations
# ---------------------------------------------------------------------------


def resample(v: Volume | LabelMap, target_spacing: Sequence[float], interp: str = "trilinear"):
    """Resample onto a grid with ``target_spacing`` covering the same extent.

    The outer voxel corners stay fixed, so the new grid spans the old
    world extent to within one target voxel. Samples beyond the outermost
    source voxel centres are clamped to the edge value.
    """
    target = np.asarray(target_spacing, dtype=float)
    if target.shape != (3,) or np.any(target <= 0):
        raise VolumeError(f"target spacing must be three positive values, got {target_spacing}")
    if interp not in ("trilinear", "nearest"):
        raise VolumeError(f"unknown interpolation {interp!r}")
    old = np.asarray(v.spacing)
    shape = np.asarray(v.shape)
    if np.allclose(old, target):
        return v
    new_shape = np.maximum(1, np.round(shape * old / target)).astype(int)
    # Exact per-axis scale so the corners coincide.
    scale = shape / new_shape
    offset = 0.5 * scale - 0.5
    order = 1 if interp == "trilinear" else 0
    src = np.asarray(v.data, dtype=np.float64 if order else v.data.dtype)
    out = ndimage.affine_transform(
        src, np.diag(scale), offset=offset, output_shape=tuple(new_shape), order=order, mode="nearest"
    )
    affine = np.array(v.affine, dtype=float)
    rot = affine[:3, :3] / old
    new_spacing = old * scale
    affine[:3, 3] = affine[:3, :3] @ offset + affine[:3, 3]
    affine[:3, :3] = rot * new_spacing
    if isinstance(v, LabelMap):
        return LabelMap(out, tuple(new_spacing), affine)
    return Volume(out, tuple(new_spacing), affine, v.modality)


def normalize_intensity(v: Volume, mask) -> Volume:
    """Z-score intensities inside ``mask``; voxels outside are set to 0."""
    m = np.asarray(mask.data if isinstance(mask, LabelMap) else mask).astype(bool)
    if m.shape != v.shape:
        raise VolumeError("mask and volume shapes differ")
    if not m.any():
        raise VolumeError("empty mask")
    vals = v.data[m].astype(np.float64)
    std = vals.std()
    if std < 1e-8:
        raise VolumeError("zero variance inside mask")
    out = np.zeros(v.shape, dtype=np.float64)
    out[m] = (vals - vals.mean()) / std
    return v.with_data(out)


def rescale_unit(v: Volume, mask, upper_percentile: float = 99.0) -> Volume:
    """Map ``[0, p_upper]`` of masked intensities onto ``[-1, 1]`` (clipped).

    This is the network input convention shared by generators and segmenters.
    """
    m = np.asarray(mask.data if isinstance(mask, LabelMap) else mask).astype(bool)
    if not m.any():
        raise VolumeError("empty mask")
    hi = float(np.percentile(v.data[m], upper_percentile))
    if hi <= 0:
        raise VolumeError("non-positive intensity range inside mask")
    return v.with_data(np.clip(v.data / hi, 0.0, 1.0) * 2.0 - 1.0)


def one_hot(lm: LabelMap | np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Indicator stack of shape ``(num_classes, x, y, z)``."""
    data = np.asarray(lm.data if isinstance(lm, LabelMap) else lm)
    if data.size and (data.min() < 0 or data.max() >= num_classes):
        raise VolumeError(f"label {int(data.max())} out of range for {num_classes} classes")
    return (np.arange(num_classes).reshape(-1, 1, 1, 1) == data[None]).astype(np.float32)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background or out-of-grid neighbour."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return m.copy()
    interior = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return m & ~interior


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """Boundary voxel coordinates as an ``(n, 3)`` integer array."""
    return np.argwhere(boundary_mask(mask))
