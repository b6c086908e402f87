"""Procedural longitudinal brain phantoms.

Each subject has a "neonatal" T2w scan and "6-month" T1w/T2w scans of the
same anatomy. The 6-month session is the neonatal label map pulled through
a smooth random displacement, re-rendered with a different tissue contrast
in which white and grey matter move toward isointensity.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np
from scipy import ndimage

from .volcore import (
    LabelMap,
    Modality,
    Tissue,
    Volume,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
    write_label_legend,
)

log = logging.getLogger(__name__)

# Mean intensity per tissue code 0..8.
NEO_T2_MEANS = (0.0, 1.0, 0.5, 0.8, 0.9, 0.4, 0.6, 0.3, 0.7)
M6_T1_MEANS = (0.0, 0.15, 0.5, 0.8, 0.1, 0.6, 0.65, 0.75, 0.55)
M6_T2_MEANS = (0.0, 0.95, 0.55, 0.45, 1.0, 0.7, 0.4, 0.3, 0.65)

SUBJECT_FILES = {
    "neo_t2": "neo_T2.nii.gz",
    "m6_t1": "m6_T1.nii.gz",
    "m6_t2": "m6_T2.nii.gz",
    "labels_neo": "labels_neo.nii.gz",
    "labels_m6": "labels_m6.nii.gz",
    "true_field": "field.nii.gz",
}


class PhantomError(ValueError):
    pass


@dataclass
class PhantomConfig:
    grid_size: int = 64
    neo_t2_means: tuple = NEO_T2_MEANS
    m6_t1_means: tuple = M6_T1_MEANS
    m6_t2_means: tuple = M6_T2_MEANS
    noise_std: float = 0.02
    bias_amplitude: float = 0.1
    # Max displacement in voxels of the neonatal -> 6-month deformation.
    deformation_amplitude: float = 1.5
    # Gaussian smoothing scale of the deformation, as a fraction of grid size.
    deformation_smoothness: float = 0.15
    # Scales the 6-month WM/GM mean difference; 0 makes them isointense.
    contrast_gap: float = 0.5
    shape_jitter: float = 0.04
    partial_volume_sigma: float = 0.5

    def __post_init__(self):
        for name in ("neo_t2_means", "m6_t1_means", "m6_t2_means"):
            table = tuple(float(x) for x in getattr(self, name))
            if len(table) != 9 or not all(math.isfinite(x) for x in table):
                raise PhantomError(f"{name} needs 9 finite values")
            setattr(self, name, table)
        if not 0.0 <= self.contrast_gap <= 1.0:
            raise PhantomError("contrast_gap must lie in [0, 1]")
        if self.grid_size < 32:
            raise PhantomError("grid_size must be at least 32")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**d)

    def effective_m6_means(self, modality: str) -> tuple:
        """6-month table with the WM/GM difference scaled by ``contrast_gap``."""
        table = list(self.m6_t1_means if modality == "T1w" else self.m6_t2_means)
        wm, gm = table[Tissue.WM], table[Tissue.GM]
        mid = 0.5 * (wm + gm)
        table[Tissue.WM] = mid + self.contrast_gap * (wm - mid)
        table[Tissue.GM] = mid + self.contrast_gap * (gm - mid)
        return tuple(table)


@dataclass(eq=False)
class PhantomSubject:
    subject_id: str
    neo_t2: Volume
    m6_t1: Volume
    m6_t2: Volume
    labels_neo: LabelMap
    labels_m6: LabelMap
    true_field: np.ndarray  # (3, x, y, z) displacement in voxels
    seed: int = 0

    def brain_mask(self, session: str = "m6") -> np.ndarray:
        return (self.labels_m6 if session == "m6" else self.labels_neo).data != 0


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def _ellipsoid(coords, center, radii, jitter=None):
    r = sum(((c - c0) / r0) ** 2 for c, c0, r0 in zip(coords, center, radii))
    r = np.sqrt(r)
    if jitter is not None:
        r = r * (1.0 + jitter)
    return r


def _make_labels(n: int, rng, cfg: PhantomConfig) -> np.ndarray:
    ax = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    coords = np.meshgrid(ax, ax, ax, indexing="ij")
    jitter = cfg.shape_jitter * _smooth_noise(rng, (n, n, n), n / 8)
    shift = rng.uniform(-0.03, 0.03, size=3)

    def c(p):
        return tuple(np.asarray(p) + shift)

    labels = np.zeros((n, n, n), dtype=np.uint8)
    cerebrum = _ellipsoid(coords, c((0.0, 0.05, 0.15)), (0.7, 0.8, 0.62), jitter)
    labels[cerebrum <= 1.0] = Tissue.CSF
    labels[cerebrum <= 0.86] = Tissue.GM
    labels[cerebrum <= 0.68] = Tissue.WM
    stem = _ellipsoid(coords, c((0.0, -0.1, -0.55)), (0.16, 0.16, 0.4), jitter)
    labels[stem <= 1.0] = Tissue.BRAINSTEM
    cerebellum = _ellipsoid(coords, c((0.0, -0.55, -0.55)), (0.5, 0.28, 0.26), jitter)
    labels[(cerebellum <= 1.0) & (labels != Tissue.BRAINSTEM)] = Tissue.CEREBELLUM
    for side in (-1.0, 1.0):
        bg = _ellipsoid(coords, c((0.3 * side, 0.12, 0.08)), (0.14, 0.2, 0.16), jitter)
        labels[bg <= 1.0] = Tissue.BASAL_GANGLIA
        hip = _ellipsoid(coords, c((0.42 * side, -0.2, -0.12)), (0.11, 0.22, 0.12), jitter)
        labels[hip <= 1.0] = Tissue.HIPPOCAMPUS_AMYGDALA
        vent = _ellipsoid(coords, c((0.12 * side, 0.05, 0.25)), (0.09, 0.32, 0.14), jitter)
        labels[vent <= 1.0] = Tissue.VENTRICLE
    return labels


def _displacement(n: int, rng, cfg: PhantomConfig) -> np.ndarray:
    if cfg.deformation_amplitude == 0:
        return np.zeros((3, n, n, n), dtype=np.float32)
    sigma = cfg.deformation_smoothness * n
    u = np.stack([ndimage.gaussian_filter(rng.standard_normal((n, n, n)), sigma, mode="wrap") for _ in range(3)])
    u *= cfg.deformation_amplitude / (np.abs(u).max() + 1e-12)
    return u.astype(np.float32)


def warp_labels_nearest(labels: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``out(i) = labels(round(i + u(i)))`` with edge clamping."""
    n = labels.shape
    grid = np.meshgrid(*(np.arange(s) for s in n), indexing="ij")
    coords = [g + d for g, d in zip(grid, u)]
    return ndimage.map_coordinates(labels, coords, order=0, mode="nearest").astype(np.uint8)


def _render(labels: np.ndarray, means, rng, cfg: PhantomConfig) -> np.ndarray:
    img = np.asarray(means, dtype=np.float64)[labels]
    if cfg.partial_volume_sigma > 0:
        img = ndimage.gaussian_filter(img, cfg.partial_volume_sigma)
    n = labels.shape[0]
    bias = np.exp(cfg.bias_amplitude * _smooth_noise(rng, labels.shape, n / 4))
    img = img * bias + cfg.noise_std * rng.standard_normal(labels.shape)
    # Magnitude images: noise folds at zero.
    return np.abs(img).astype(np.float32)


def jacobian_determinant(u: np.ndarray) -> np.ndarray:
    """Determinant of ``I + grad u`` by central differences, per voxel."""
    grads = np.stack([np.stack(np.gradient(u[c]), axis=0) for c in range(3)])  # (comp, axis, ...)
    jac = grads + np.eye(3).reshape(3, 3, 1, 1, 1)
    return np.linalg.det(np.moveaxis(jac, (0, 1), (-2, -1)))


def generate_subject(seed: int, cfg: PhantomConfig | None = None, subject_id: str | None = None) -> PhantomSubject:
    cfg = cfg or PhantomConfig()
    n = cfg.grid_size
    if n < 32:
        raise PhantomError("grid_size must be at least 32")
    rng = np.random.default_rng(seed)
    labels_neo = _make_labels(n, rng, cfg)
    u = _displacement(n, rng, cfg)
    labels_m6 = warp_labels_nearest(labels_neo, u) if cfg.deformation_amplitude else labels_neo.copy()
    for name, lab in (("neonatal", labels_neo), ("6-month", labels_m6)):
        present = set(np.unique(lab).tolist())
        for t in Tissue:
            if int(t) not in present:
                raise PhantomError(f"{name} label map has no voxels of tissue {t.display_name}")

    neo = _render(labels_neo, cfg.neo_t2_means, rng, cfg)
    t1 = _render(labels_m6, cfg.effective_m6_means("T1w"), rng, cfg)
    t2 = _render(labels_m6, cfg.effective_m6_means("T2w"), rng, cfg)
    return PhantomSubject(
        subject_id=subject_id or f"sub-{seed:04d}",
        neo_t2=Volume(neo, modality=Modality.T2W),
        m6_t1=Volume(t1, modality=Modality.T1W),
        m6_t2=Volume(t2, modality=Modality.T2W),
        labels_neo=LabelMap(labels_neo),
        labels_m6=LabelMap(labels_m6),
        true_field=u,
        seed=seed,
    )


def split_counts(n: int, train_fraction: float) -> tuple[int, int]:
    """Rounded train size, clamped so both splits are nonempty."""
    if n < 2:
        raise PhantomError("a cohort needs at least 2 subjects")
    n_train = min(max(int(round(n * train_fraction)), 1), n - 1)
    return n_train, n - n_train


def save_subject(subject: PhantomSubject, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(subject.neo_t2, d / SUBJECT_FILES["neo_t2"])
    save_volume(subject.m6_t1, d / SUBJECT_FILES["m6_t1"])
    save_volume(subject.m6_t2, d / SUBJECT_FILES["m6_t2"])
    save_labels(subject.labels_neo, d / SUBJECT_FILES["labels_neo"])
    save_labels(subject.labels_m6, d / SUBJECT_FILES["labels_m6"])
    field_img = nib.Nifti1Image(np.moveaxis(subject.true_field, 0, -1).astype(np.float32), subject.neo_t2.affine)
    nib.save(field_img, str(d / SUBJECT_FILES["true_field"]))
    return d


def load_subject(directory, subject_id: str | None = None, seed: int = -1) -> PhantomSubject:
    d = Path(directory)
    field = np.asarray(nib.load(str(d / SUBJECT_FILES["true_field"])).dataobj, dtype=np.float32)
    return PhantomSubject(
        subject_id=subject_id or d.name,
        neo_t2=load_volume(d / SUBJECT_FILES["neo_t2"], Modality.T2W),
        m6_t1=load_volume(d / SUBJECT_FILES["m6_t1"], Modality.T1W),
        m6_t2=load_volume(d / SUBJECT_FILES["m6_t2"], Modality.T2W),
        labels_neo=load_labels(d / SUBJECT_FILES["labels_neo"]),
        labels_m6=load_labels(d / SUBJECT_FILES["labels_m6"]),
        true_field=np.moveaxis(field, -1, 0).copy(),
        seed=seed,
    )


def generate_cohort(
    n: int,
    base_seed: int,
    cfg: PhantomConfig | None = None,
    train_fraction: float = 33 / 43,
    out_dir=None,
    overwrite: bool = True,
) -> dict:
    """Generate ``n`` subjects with seeds ``base_seed + index``.

    Returns the manifest; when ``out_dir`` is given the subjects and
    ``manifest.json`` are written there.
    """
    cfg = cfg or PhantomConfig()
    n_train, _ = split_counts(n, train_fraction)
    ids = [f"sub-{base_seed + i:04d}" for i in range(n)]
    manifest = {
        "ids": ids,
        "seeds": {sid: base_seed + i for i, sid in enumerate(ids)},
        "split": {"train": ids[:n_train], "test": ids[n_train:]},
        "config": cfg.to_dict(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        if (out / "manifest.json").exists() and not overwrite:
            raise FileExistsError(f"{out / 'manifest.json'} exists; refusing to overwrite")
        out.mkdir(parents=True, exist_ok=True)
        for sid in ids:
            save_subject(generate_subject(manifest["seeds"][sid], cfg, sid), out / sid)
            log.info("wrote %s", sid)
        write_label_legend(out)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


class Cohort:
    """In-memory or on-disk collection of phantom subjects with a split."""

    def __init__(self, subjects: dict[str, PhantomSubject], split: dict[str, list[str]], root: Path | None = None):
        self.subjects = subjects
        self.split = split
        self.root = root

    @classmethod
    def generate(cls, n: int, base_seed: int, cfg: PhantomConfig | None = None, train_fraction: float = 33 / 43):
        manifest = generate_cohort(n, base_seed, cfg, train_fraction)
        cfg = cfg or PhantomConfig()
        subjects = {sid: generate_subject(manifest["seeds"][sid], cfg, sid) for sid in manifest["ids"]}
        return cls(subjects, manifest["split"])

    @classmethod
    def load(cls, root) -> "Cohort":
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json under {root}")
        manifest = json.loads(manifest_path.read_text())
        subjects = {sid: load_subject(root / sid, sid, manifest["seeds"].get(sid, -1)) for sid in manifest["ids"]}
        return cls(subjects, manifest["split"], root)

    @property
    def train(self) -> list[PhantomSubject]:
        return [self.subjects[s] for s in self.split["train"]]

    @property
    def test(self) -> list[PhantomSubject]:
        return [self.subjects[s] for s in self.split["test"]]
