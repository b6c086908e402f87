"""Merging an external 3-tissue segmentation into 8-tissue label maps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import nibabel as nib
import numpy as np

from .volcore import (
    CORTICAL_TISSUES,
    DEEP_TISSUES,
    LabelMap,
    Tissue,
    save_labels,
)

DEFAULT_CODE_MAP = {1: Tissue.CSF, 2: Tissue.GM, 3: Tissue.WM}
FUSION_RULE = "deep-structures-win"
FUSION_RULES = ("deep-structures-win", "three-tissue-wins")


class FusionError(ValueError):
    pass


@dataclass(eq=False)
class ThreeTissueMap:
    labels: LabelMap  # canonical codes: 0 background, 1 CSF, 2 GM, 3 WM
    source: str = "external"

    @property
    def data(self) -> np.ndarray:
        return self.labels.data


def parse_code_map(text: str) -> dict[int, Tissue]:
    """Parse ``"1:CSF,2:GM,3:WM"`` (tissue names or canonical codes)."""
    out = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        ext, _, name = item.partition(":")
        name = name.strip()
        tissue = Tissue(int(name)) if name.isdigit() else Tissue[name.upper()]
        out[int(ext)] = tissue
    return out


def relabel(data: np.ndarray, code_map: dict) -> np.ndarray:
    data = np.asarray(data)
    present = set(np.unique(data).tolist()) - {0}
    unmapped = sorted(present - set(int(k) for k in code_map))
    if unmapped:
        raise FusionError(f"external codes {unmapped} are not covered by the code mapping")
    out = np.zeros(data.shape, dtype=np.uint8)
    for ext, tissue in code_map.items():
        tissue = Tissue(tissue)
        if tissue not in CORTICAL_TISSUES:
            raise FusionError(f"code {ext} maps to {tissue.display_name}; only CSF/GM/WM are accepted")
        out[data == int(ext)] = int(tissue)
    return out


def _read_raw_labels(path):
    # External tools may write codes above 8, so read plain integers.
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    if data.ndim != 3:
        raise FusionError(f"{Path(path).name}: expected a 3D label image")
    if data.dtype.kind == "f":
        if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
            raise FusionError(f"{Path(path).name}: non-integer labels")
        data = data.astype(np.int64)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return data, spacing, np.asarray(img.affine, dtype=float)


def ingest_three_tissue(path, code_map: dict | None = None, reference=None, source: str = "external", tol: float = 1e-4) -> ThreeTissueMap:
    """Load an external WM/GM/CSF map and relabel it to canonical codes.

    When ``reference`` (a Volume or LabelMap) is given, shape, spacing and
    affine must agree within ``tol``.
    """
    data, spacing, affine = _read_raw_labels(path)
    if reference is not None and not (
        data.shape == reference.shape
        and np.allclose(spacing, reference.spacing, atol=tol)
        and np.allclose(affine, reference.affine, atol=tol)
    ):
        raise FusionError(f"{Path(path).name}: geometry does not match the subject grid")
    canonical = relabel(data, DEFAULT_CODE_MAP if code_map is None else code_map)
    return ThreeTissueMap(LabelMap(canonical, spacing, affine), source)


def fuse_labels(eight: LabelMap, three: ThreeTissueMap | LabelMap, brain_mask, rule: str = FUSION_RULE) -> LabelMap:
    """Per voxel inside the mask: deep structures from ``eight`` win, then
    WM/GM/CSF from ``three``, otherwise ``eight``. Outside: background.

    ``rule="three-tissue-wins"`` lets WM/GM/CSF from ``three`` override deep
    labels as well.
    """
    if rule not in FUSION_RULES:
        raise FusionError(f"unknown fusion rule {rule!r}; expected one of {FUSION_RULES}")
    three_lm = three.labels if isinstance(three, ThreeTissueMap) else three
    mask = np.asarray(brain_mask.data if isinstance(brain_mask, LabelMap) else brain_mask).astype(bool)
    if eight.shape != three_lm.shape or mask.shape != eight.shape:
        raise FusionError("eight-tissue map, three-tissue map and mask must share a grid")
    if not eight.same_grid(three_lm):
        raise FusionError("eight-tissue and three-tissue maps have different geometry")
    e, t = eight.data, three_lm.data
    deep = np.isin(e, [int(x) for x in DEEP_TISSUES])
    if rule == "three-tissue-wins":
        deep = np.zeros_like(deep)
    cortical = np.isin(t, [int(x) for x in CORTICAL_TISSUES])
    out = np.where(deep, e, np.where(cortical, t, e))
    out = np.where(mask, out, 0).astype(np.uint8)
    return LabelMap.like(out, eight)


def three_tissue_from_labels(lm: LabelMap) -> LabelMap:
    """Keep CSF/GM/WM codes, zero everything else."""
    keep = np.isin(lm.data, [int(x) for x in CORTICAL_TISSUES])
    return LabelMap.like(np.where(keep, lm.data, 0), lm)


def write_fused(fused: LabelMap, out_dir, subject_id: str, provenance: dict) -> Path:
    out = Path(out_dir)
    path = save_labels(fused, out / f"{subject_id}_fused.nii.gz")
    meta = {"rule": FUSION_RULE, **provenance}
    (out / f"{subject_id}_fused.json").write_text(json.dumps(meta, indent=2, default=str))
    return path


def make_pseudo_labels(manifest: dict, fused_maps: dict, variant: str = "both", cohort_root=None) -> dict:
    """Training manifest pairing 6-month images with fused maps as targets.

    ``fused_maps`` maps subject id to a fused map path (or LabelMap).
    """
    images = {"T1": ["m6_T1.nii.gz"], "T2": ["m6_T2.nii.gz"], "both": ["m6_T1.nii.gz", "m6_T2.nii.gz"]}
    if variant not in images:
        raise FusionError(f"variant must be one of {sorted(images)}")
    missing = [sid for sid in manifest["split"]["train"] if sid not in fused_maps]
    if missing:
        raise FusionError(f"no fused map for train subjects {missing}")
    root = Path(cohort_root) if cohort_root is not None else None
    pairs = []
    for sid in manifest["split"]["train"]:
        img = [str(root / sid / f) if root else f"{sid}/{f}" for f in images[variant]]
        target = fused_maps[sid]
        pairs.append({"id": sid, "images": img, "target": str(target) if not isinstance(target, LabelMap) else sid})
    return {"variant": variant, "in_channels": len(images[variant]), "pairs": pairs}
