import json

import nibabel as nib
import numpy as np
import pytest

from infantseg.fusion import (
    FusionError,
    ThreeTissueMap,
    fuse_labels,
    ingest_three_tissue,
    make_pseudo_labels,
    parse_code_map,
    relabel,
    three_tissue_from_labels,
    write_fused,
)
from infantseg.volcore import DEEP_TISSUES, LabelMap, Tissue, save_labels


def _write_codes(path, data, affine=None, zooms=(1.0, 1.0, 1.0)):
    img = nib.Nifti1Image(np.asarray(data, np.int16), np.diag([*zooms, 1.0]) if affine is None else affine)
    img.header.set_zooms(zooms)
    nib.save(img, str(path))
    return path


def test_parse_code_map():
    m = parse_code_map("10:CSF, 150:gm,250:3")
    assert m == {10: Tissue.CSF, 150: Tissue.GM, 250: Tissue.WM}


def test_ingest_default_mapping(tmp_path):
    data = np.random.default_rng(0).integers(0, 4, (5, 5, 5))
    three = ingest_three_tissue(_write_codes(tmp_path / "t.nii.gz", data))
    assert isinstance(three, ThreeTissueMap)
    assert np.array_equal(three.data, data)


def test_ingest_unmapped_code_named(tmp_path):
    data = np.zeros((4, 4, 4), int)
    data[0, 0, 0] = 4
    with pytest.raises(FusionError, match=r"\[4\]"):
        ingest_three_tissue(_write_codes(tmp_path / "t.nii.gz", data))


def test_ingest_roundtrip_of_canonical_map(tmp_path):
    lab = np.random.default_rng(1).integers(0, 9, (6, 6, 6))
    canon = three_tissue_from_labels(LabelMap(lab))
    path = save_labels(canon, tmp_path / "c.nii.gz")
    back = ingest_three_tissue(path, {1: 1, 2: 2, 3: 3}, reference=canon)
    assert np.array_equal(back.data, canon.data)


def test_ingest_permuted_codes_invariant(tmp_path):
    data = np.random.default_rng(2).integers(0, 4, (5, 5, 5))
    perm = {1: 250, 2: 10, 3: 150}
    ext = np.zeros_like(data)
    for c, e in perm.items():
        ext[data == c] = e
    a = ingest_three_tissue(_write_codes(tmp_path / "a.nii.gz", data))
    b = ingest_three_tissue(_write_codes(tmp_path / "b.nii.gz", ext), {250: Tissue.CSF, 10: Tissue.GM, 150: Tissue.WM})
    assert np.array_equal(a.data, b.data)


def test_ingest_geometry_check(tmp_path):
    ref = LabelMap(np.zeros((5, 5, 5), np.uint8), (1.0, 1.0, 1.0))
    path = _write_codes(tmp_path / "t.nii.gz", np.zeros((5, 5, 5)), zooms=(1.0, 1.0, 1.2))
    with pytest.raises(FusionError, match="geometry"):
        ingest_three_tissue(path, reference=ref)
    path = _write_codes(tmp_path / "s.nii.gz", np.zeros((5, 5, 4)))
    with pytest.raises(FusionError, match="geometry"):
        ingest_three_tissue(path, reference=ref)


def test_relabel_rejects_deep_targets():
    with pytest.raises(FusionError, match="only CSF/GM/WM"):
        relabel(np.ones((2, 2, 2)), {1: Tissue.VENTRICLE})


def _lm(values):
    return LabelMap(np.array(values, np.uint8).reshape(1, 1, -1))


def test_fuse_precedence_rules():
    eight = _lm([Tissue.VENTRICLE, Tissue.GM, Tissue.WM, Tissue.CSF])
    three = _lm([Tissue.WM, Tissue.WM, 0, Tissue.GM])
    mask = np.array([1, 1, 1, 0], bool).reshape(1, 1, -1)
    out = fuse_labels(eight, three, mask).data.ravel().tolist()
    assert out == [Tissue.VENTRICLE, Tissue.WM, Tissue.WM, 0]
    alt = fuse_labels(eight, three, mask, rule="three-tissue-wins").data.ravel().tolist()
    assert alt[0] == Tissue.WM
    with pytest.raises(FusionError):
        fuse_labels(eight, three, mask, rule="majority")


def test_fuse_random_invariants():
    rng = np.random.default_rng(3)
    eight = LabelMap(rng.integers(0, 9, (8, 8, 8)))
    three = LabelMap(rng.integers(0, 4, (8, 8, 8)))
    mask = rng.random((8, 8, 8)) > 0.2
    out = fuse_labels(eight, three, mask)
    deep = np.isin(eight.data, [int(t) for t in DEEP_TISSUES]) & mask
    assert np.array_equal(out.data[deep], eight.data[deep])
    assert np.all(out.data[~mask] == 0)
    assert out.data.max() <= 8
    again = fuse_labels(out, three_tissue_from_labels(out), mask)
    assert np.array_equal(again.data, out.data)


def test_fuse_geometry_mismatch():
    a = LabelMap(np.zeros((4, 4, 4), np.uint8))
    b = LabelMap(np.zeros((4, 4, 4), np.uint8), (2.0, 1.0, 1.0))
    with pytest.raises(FusionError):
        fuse_labels(a, b, np.ones((4, 4, 4), bool))
    with pytest.raises(FusionError):
        fuse_labels(a, a, np.ones((4, 4, 3), bool))


def test_write_fused_provenance(tmp_path):
    lm = LabelMap(np.ones((3, 3, 3), np.uint8))
    path = write_fused(lm, tmp_path, "sub-1", {"three": "x.nii.gz", "code_map": {"1": 1}})
    assert path.name == "sub-1_fused.nii.gz"
    meta = json.loads((tmp_path / "sub-1_fused.json").read_text())
    assert meta["rule"] == "deep-structures-win" and meta["three"] == "x.nii.gz"


def test_make_pseudo_labels():
    ids = [f"s{i}" for i in range(33)]
    manifest = {"split": {"train": ids, "test": ["t0"]}}
    fused = {sid: f"/fused/{sid}.nii.gz" for sid in ids}
    both = make_pseudo_labels(manifest, fused, "both", "/cohort")
    assert len(both["pairs"]) == 33 and both["in_channels"] == 2
    t1 = make_pseudo_labels(manifest, fused, "T1", "/cohort")
    t2 = make_pseudo_labels(manifest, fused, "T2", "/cohort")
    assert t1["in_channels"] == t2["in_channels"] == 1
    for a, b in zip(t1["pairs"], t2["pairs"]):
        assert a["images"] != b["images"]
        assert {k: v for k, v in a.items() if k != "images"} == {k: v for k, v in b.items() if k != "images"}
    with pytest.raises(FusionError, match="s3"):
        make_pseudo_labels(manifest, {k: v for k, v in fused.items() if k != "s3"})
    with pytest.raises(FusionError):
        make_pseudo_labels(manifest, fused, "PD")
