"""Preprocessing for 6-month scans: bias correction, skull stripping,
within-subject rigid alignment, cropping and resampling."""

from __future__ import annotations

import json
import logging
import shlex
import shutil
import subprocess
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize
from skimage.filters import threshold_otsu

from .volcore import LabelMap, Volume, load_volume, resample, save_labels, save_volume

log = logging.getLogger(__name__)


class PreprocessError(RuntimeError):
    pass


@dataclass
class RigidParams:
    # Fixed-grid point p samples the moving image at R (p - c) + c + t.
    translation: tuple = (0.0, 0.0, 0.0)  # voxels
    rotation_deg: tuple = (0.0, 0.0, 0.0)  # about x, y, z
    converged: bool = True
    ncc: float = float("nan")


@dataclass
class PreprocessReport:
    steps: dict = field(default_factory=dict)
    bias_field: Volume | None = None
    brain_mask: LabelMap | None = None
    bbox: tuple | None = None
    rigid: RigidParams | None = None

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "bbox": [list(b) for b in self.bbox] if self.bbox else None,
            "rigid": asdict(self.rigid) if self.rigid else None,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def _mask_array(mask) -> np.ndarray:
    return np.asarray(mask.data if isinstance(mask, (LabelMap, Volume)) else mask).astype(bool)


# ---------------------------------------------------------------------------
# Bias correction
# ---------------------------------------------------------------------------


def _poly_terms(shape, order: int) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    terms = []
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                terms.append((x**i) * (y**j) * (z**k))
    return np.stack(terms, axis=-1)


def correct_bias(v: Volume, mask, order: int = 3, external_cmd: str | None = None) -> tuple[Volume, Volume]:
    """Divide out a smooth multiplicative field; returns (corrected, field).

    The native estimator is a least-squares polynomial fit of log-intensity
    inside ``mask``, exponentiated and scaled to mean 1 inside the mask.
    ``external_cmd`` is a command template with ``{in}``, ``{mask}`` and
    ``{out}`` placeholders whose output file is taken as the corrected image.
    """
    m = _mask_array(mask)
    if m.shape != v.shape:
        raise PreprocessError("mask and volume shapes differ")
    if not m.any():
        raise PreprocessError("empty mask")
    if external_cmd:
        return _correct_bias_external(v, m, external_cmd)
    data = v.data.astype(np.float64)
    vals = data[m]
    if vals.min() <= 0:
        shift = -vals.min() + 1e-3 * max(float(np.ptp(vals)), 1e-6)
        warnings.warn(f"non-positive intensities inside mask; shifted by {shift:.4g} before log fit")
        data = data + shift
        vals = data[m]
    basis = _poly_terms(v.shape, order)
    coef, *_ = np.linalg.lstsq(basis[m], np.log(vals), rcond=None)
    log_field = basis @ coef
    bias = np.exp(log_field - log_field[m].mean())
    bias /= bias[m].mean()
    corrected = v.data / bias
    return v.with_data(corrected), v.with_data(bias)


def _correct_bias_external(v: Volume, m: np.ndarray, template: str):
    exe = shlex.split(template)[0]
    if shutil.which(exe) is None:
        raise PreprocessError(f"external bias-correction tool {exe!r} not found")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        src, msk, out = tmp / "in.nii.gz", tmp / "mask.nii.gz", tmp / "out.nii.gz"
        save_volume(v, src)
        save_labels(LabelMap(m.astype(np.uint8), v.spacing, v.affine), msk)
        cmd = template.format(**{"in": shlex.quote(str(src)), "mask": shlex.quote(str(msk)), "out": shlex.quote(str(out))})
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
        if proc.returncode != 0 or not out.exists():
            raise PreprocessError(f"external bias correction failed: {proc.stderr.strip()[:500]}")
        corrected = load_volume(out, v.modality)
    safe = np.where(np.abs(corrected.data) > 1e-8, corrected.data, 1.0)
    bias = np.where(m, v.data / safe, 1.0)
    return corrected, v.with_data(np.clip(bias, 1e-6, None))


# ---------------------------------------------------------------------------
# Skull stripping
# ---------------------------------------------------------------------------


def strip_skull(v: Volume, closing_iterations: int = 2, threshold_scale: float = 1.0) -> LabelMap:
    """Largest connected component of the Otsu foreground, closed and hole-filled.

    ``threshold_scale`` < 1 lowers the Otsu cut, trading a tight boundary for
    recall of dark tissue.
    """
    data = v.data
    if np.ptp(data) == 0:
        raise PreprocessError("no foreground: volume is constant")
    fg = data > threshold_scale * threshold_otsu(data)
    if not fg.any():
        raise PreprocessError("no foreground above threshold")
    struct = ndimage.generate_binary_structure(3, 1)
    fg = ndimage.binary_closing(fg, struct, iterations=closing_iterations, border_value=0)
    fg = ndimage.binary_fill_holes(fg)
    lab, n = ndimage.label(fg, struct)
    if n == 0:
        raise PreprocessError("no foreground after morphology")
    sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, n + 1))
    mask = lab == (int(np.argmax(sizes)) + 1)
    return LabelMap.like(mask.astype(np.uint8), v)


# ---------------------------------------------------------------------------
# Rigid alignment
# ---------------------------------------------------------------------------


def rotation_matrix(angles_deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_rigid(data: np.ndarray, translation, rotation_deg, order: int = 1) -> np.ndarray:
    """Resample ``data`` at ``R (p - c) + c + t`` for every grid point ``p``."""
    r = rotation_matrix(rotation_deg)
    c = (np.asarray(data.shape) - 1) / 2.0
    offset = c - r @ c + np.asarray(translation, float)
    return ndimage.affine_transform(data, r, offset=offset, order=order, mode="nearest")


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def rigid_align(moving: Volume, fixed: Volume, max_iter: int = 2000, sigmas=(2.0, 1.0, 0.0)) -> tuple[Volume, RigidParams]:
    """Maximise global NCC over translation and rotation, coarse to fine.

    Returns the moving volume resampled on the fixed grid and the parameters.
    If the optimiser hits ``max_iter`` the best parameters so far are
    returned with ``converged=False``.
    """
    if moving.shape != fixed.shape:
        raise PreprocessError("rigid_align expects volumes on the same grid")
    x = np.zeros(6)
    converged = True
    steps = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
    for sigma in sigmas:
        mov = ndimage.gaussian_filter(moving.data.astype(np.float64), sigma) if sigma else moving.data.astype(np.float64)
        fix = ndimage.gaussian_filter(fixed.data.astype(np.float64), sigma) if sigma else fixed.data.astype(np.float64)

        def cost(p):
            return -_ncc(apply_rigid(mov, p[:3], p[3:]), fix)

        res = optimize.minimize(
            cost, x, method="Powell",
            options={"maxfev": max_iter, "xtol": 1e-3, "ftol": 1e-7, "direc": np.diag(steps)},
        )
        if res.fun <= cost(x):
            x = res.x
        converged = converged and bool(res.success)
        steps = steps * 0.5
    if not converged:
        warnings.warn("rigid alignment did not converge; returning best parameters found")
    aligned = apply_rigid(moving.data.astype(np.float64), x[:3], x[3:])
    params = RigidParams(tuple(float(t) for t in x[:3]), tuple(float(a) for a in x[3:]), converged,
                         _ncc(aligned, fixed.data.astype(np.float64)))
    return Volume(aligned, fixed.spacing, fixed.affine, moving.modality), params


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


def mask_bbox(mask, margin: int = 0) -> tuple:
    m = _mask_array(mask)
    if not m.any():
        raise PreprocessError("empty mask")
    idx = np.argwhere(m)
    lo = np.maximum(idx.min(0) - margin, 0)
    hi = np.minimum(idx.max(0) + margin + 1, m.shape)
    return tuple((int(a), int(b)) for a, b in zip(lo, hi))


def crop_to_mask(v: Volume | LabelMap, mask, margin: int = 0):
    """Crop to the mask's bounding box plus ``margin``, clamped to the grid."""
    bbox = mask_bbox(mask, margin)
    sl = tuple(slice(a, b) for a, b in bbox)
    affine = np.array(v.affine, dtype=float)
    affine[:3, 3] = affine[:3, :3] @ np.array([a for a, _ in bbox], float) + affine[:3, 3]
    if isinstance(v, LabelMap):
        return LabelMap(v.data[sl], v.spacing, affine)
    return Volume(v.data[sl], v.spacing, affine, v.modality)


def uncrop(cropped: np.ndarray, bbox, shape, fill=0) -> np.ndarray:
    out = np.full(shape, fill, dtype=np.asarray(cropped).dtype)
    out[tuple(slice(a, b) for a, b in bbox)] = cropped
    return out


def preprocess_subject(t2: Volume, t1: Volume | None = None, margin: int = 4, target_spacing=None,
                       bias_order: int = 3, external_n4: str | None = None):
    """Run the full chain on one 6-month session.

    Returns ``(t2, t1, report)`` with ``t1`` rigidly aligned to ``t2``.
    """
    report = PreprocessReport()
    mask0 = strip_skull(t2)
    t2c, field = correct_bias(t2, mask0, bias_order, external_n4)
    report.steps["bias"] = "ok"
    report.bias_field = field
    mask = strip_skull(t2c)
    report.steps["skull_strip"] = "ok"
    report.brain_mask = mask
    if t1 is not None:
        t1c, _ = correct_bias(t1, mask, bias_order, external_n4)
        t1, report.rigid = rigid_align(t1c, t2c)
        report.steps["rigid"] = "ok" if report.rigid.converged else "not-converged"
    report.bbox = mask_bbox(mask, margin)
    t2c = crop_to_mask(t2c, mask, margin)
    t1 = crop_to_mask(t1, mask, margin) if t1 is not None else None
    report.steps["crop"] = "ok"
    if target_spacing is not None:
        t2c = resample(t2c, target_spacing)
        t1 = resample(t1, target_spacing) if t1 is not None else None
        report.steps["resample"] = "ok"
    return t2c, t1, report
