"""Overlap and surface-distance metrics, significance testing and reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from .volcore import TISSUES, LabelMap, Tissue, boundary_mask

METRICS = ("dice", "hd95", "assd")


def _check_grid(a, b):
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch {a.shape} vs {b.shape}")


def dice(pred, gt) -> float:
    """``2|A n B| / (|A| + |B|)``; NaN when both masks are empty."""
    a, b = np.asarray(pred, bool), np.asarray(gt, bool)
    _check_grid(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return math.nan
    return 2.0 * int((a & b).sum()) / total


def surface_distances(a, b, spacing=None) -> tuple[np.ndarray, np.ndarray]:
    """Distances from each boundary voxel of ``a`` to the nearest boundary voxel of ``b``, and back."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    _check_grid(a, b)
    ba, bb = boundary_mask(a), boundary_mask(b)
    sampling = None if spacing is None else tuple(float(s) for s in spacing)
    dt_b = ndimage.distance_transform_edt(~bb, sampling=sampling)
    dt_a = ndimage.distance_transform_edt(~ba, sampling=sampling)
    return dt_b[ba], dt_a[bb]


def hd95(pred, gt, spacing=None, pooled: bool = False) -> float:
    """95th-percentile Hausdorff distance between mask boundaries.

    By default the larger of the two directed 95th percentiles (linear
    interpolation between order statistics). ``pooled=True`` takes the
    percentile of both directions' distances together instead. NaN if either
    mask is empty.
    """
    a, b = np.asarray(pred, bool), np.asarray(gt, bool)
    _check_grid(a, b)
    if not a.any() or not b.any():
        return math.nan
    d_ab, d_ba = surface_distances(a, b, spacing)
    if pooled:
        return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def assd(pred, gt, spacing=None) -> float:
    a, b = np.asarray(pred, bool), np.asarray(gt, bool)
    _check_grid(a, b)
    if not a.any() or not b.any():
        return math.nan
    d_ab, d_ba = surface_distances(a, b, spacing)
    # Correctly rounded sum, so the value does not depend on summation order.
    return math.fsum(np.concatenate([d_ab, d_ba]).tolist()) / (d_ab.size + d_ba.size)


@dataclass
class MetricReport:
    pipeline: str
    units: str = "voxel"
    # subject id -> tissue name -> {dice, hd95, assd}
    subjects: dict = field(default_factory=dict)
    # Published average row, used instead of recomputing from the subjects.
    reference_average: dict | None = None

    def add(self, subject_id: str, rows: dict):
        self.subjects[subject_id] = rows

    def tissue_means(self) -> tuple[dict, dict]:
        """Per-tissue means with NaN exclusion, and the excluded counts."""
        means, excluded = {}, {}
        for t in TISSUES:
            name = t.display_name
            means[name], excluded[name] = {}, {}
            for m in METRICS:
                vals = np.array([rows[name][m] for rows in self.subjects.values()], dtype=float)
                finite = vals[~np.isnan(vals)]
                means[name][m] = float(finite.mean()) if finite.size else math.nan
                excluded[name][m] = int(np.isnan(vals).sum())
        return means, excluded

    def average(self) -> dict:
        means, _ = self.tissue_means()
        out = {}
        for m in METRICS:
            vals = np.array([means[t.display_name][m] for t in TISSUES])
            vals = vals[~np.isnan(vals)]
            out[m] = float(vals.mean()) if vals.size else math.nan
        return out

    def subject_average(self, metric: str = "dice") -> dict:
        """Per-subject tissue-averaged value (NaN excluded)."""
        return {sid: _average_row(rows)[metric] for sid, rows in self.subjects.items()}

    def to_dict(self) -> dict:
        means, excluded = self.tissue_means()
        return {
            "pipeline": self.pipeline,
            "units": self.units,
            "subjects": self.subjects,
            "tissue_means": means,
            "nan_excluded": excluded,
            "average": self.average(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["pipeline"], d.get("units", "voxel"), d["subjects"])


def _average_row(rows: dict) -> dict:
    out = {}
    for m in METRICS:
        vals = np.array([rows[t.display_name][m] for t in TISSUES], dtype=float)
        vals = vals[~np.isnan(vals)]
        out[m] = float(vals.mean()) if vals.size else math.nan
    return out


def evaluate(pred: LabelMap, gt: LabelMap, units: str = "voxel") -> dict:
    """Per-tissue DICE/HD95/ASSD plus an ``"Average"`` row.

    ``units="mm"`` scales distances by the label map's spacing.
    """
    p = np.asarray(pred.data if isinstance(pred, LabelMap) else pred)
    g = np.asarray(gt.data if isinstance(gt, LabelMap) else gt)
    _check_grid(p, g)
    if units not in ("voxel", "mm"):
        raise ValueError(f"units must be 'voxel' or 'mm', got {units!r}")
    spacing = gt.spacing if units == "mm" and isinstance(gt, LabelMap) else None
    rows = {}
    for t in TISSUES:
        a, b = p == t, g == t
        rows[t.display_name] = {"dice": dice(a, b), "hd95": hd95(a, b, spacing), "assd": assd(a, b, spacing)}
    rows["Average"] = _average_row(rows)
    return rows


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    zero_variance: bool = False


def paired_ttest(scores_a, scores_b) -> TTestResult:
    """Two-tailed paired t-test with ``n - 1`` degrees of freedom."""
    a, b = np.asarray(scores_a, float), np.asarray(scores_b, float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length score lists with at least 2 entries")
    d = a - b
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0:
        return TTestResult(math.nan, math.nan, n, zero_variance=True)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return TTestResult(float(t), float(p), n)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

ROW_ORDER = [t.display_name for t in TISSUES] + ["Average"]


def reference_table() -> dict:
    """Reference per-tissue values shipped with the package."""
    text = resources.files("infantseg").joinpath("data/paper_table1.json").read_text()
    return json.loads(text)


def reference_reports() -> list[MetricReport]:
    """The reference table as single-row reports (one pseudo-subject each)."""
    table = reference_table()
    out = []
    for p in table["pipelines"]:
        rows = {name: dict(vals) for name, vals in p["rows"].items()}
        r = MetricReport(p["name"], table.get("units", "unstated"), reference_average=rows.pop("Average"))
        r.add("reference", rows)
        out.append(r)
    return out


def _table_rows(report: MetricReport) -> dict:
    means, _ = report.tissue_means()
    rows = {name: means[name] for name in ROW_ORDER[:-1]}
    rows["Average"] = report.reference_average or report.average()
    return rows


def _fmt(x, digits: int) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.{digits}f}"


def render_markdown(reports: list[MetricReport], digits: int = 2) -> str:
    """Tissues as rows, DICE/HD95/ASSD per pipeline.

    With two reports a delta block (second minus first) is appended.
    """
    if not reports:
        raise ValueError("need at least one report")
    tables = [_table_rows(r) for r in reports]
    header = ["Brain Tissue"]
    for r in reports:
        header += [f"{r.pipeline} DICE", f"{r.pipeline} HD95", f"{r.pipeline} ASSD"]
    if len(reports) == 2:
        header += ["Δ DICE", "Δ HD95", "Δ ASSD"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for name in ROW_ORDER:
        cells = [name]
        for tab in tables:
            cells += [_fmt(tab[name][m], digits) for m in METRICS]
        if len(reports) == 2:
            cells += [_fmt(tables[1][name][m] - tables[0][name][m], digits) for m in METRICS]
        lines.append("| " + " | ".join(cells) + " |")
    units = sorted({r.units for r in reports})
    lines.append("")
    lines.append(f"Distance units: {', '.join(units)}")
    return "\n".join(lines) + "\n"


def render_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["pipeline", "tissue", "dice", "hd95", "assd", "units"])
    for r in reports:
        tab = _table_rows(r)
        for name in ROW_ORDER:
            w.writerow([r.pipeline, name, *(repr(float(tab[name][m])) for m in METRICS), r.units])
    return buf.getvalue()


def read_csv(text: str) -> dict:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out.setdefault(row["pipeline"], {})[row["tissue"]] = {m: float(row[m]) for m in METRICS}
    return out


def emit_report(reports: list[MetricReport], out_dir, overlays: list | None = None, digits: int = 2) -> dict:
    """Write ``report.csv``, ``report.md`` and optional overlay PNGs.

    ``overlays`` is a list of ``(subject_id, intensity array, {pipeline: label array})``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    paths["csv"] = out / "report.csv"
    paths["csv"].write_text(render_csv(reports))
    paths["md"] = out / "report.md"
    paths["md"].write_text(render_markdown(reports, digits))
    paths["overlays"] = []
    for sid, image, label_sets in overlays or []:
        paths["overlays"] += save_overlays(out / "overlays", sid, image, label_sets)
    return paths


TISSUE_COLORS = {
    Tissue.BACKGROUND: (0, 0, 0, 0),
    Tissue.CSF: (0.25, 0.55, 1.0, 0.6),
    Tissue.GM: (0.95, 0.35, 0.3, 0.6),
    Tissue.WM: (0.95, 0.95, 0.85, 0.6),
    Tissue.VENTRICLE: (0.2, 0.9, 0.95, 0.6),
    Tissue.CEREBELLUM: (0.55, 0.3, 0.85, 0.6),
    Tissue.BASAL_GANGLIA: (0.3, 0.85, 0.35, 0.6),
    Tissue.BRAINSTEM: (1.0, 0.65, 0.1, 0.6),
    Tissue.HIPPOCAMPUS_AMYGDALA: (1.0, 0.4, 0.8, 0.6),
}


def save_overlays(directory, subject_id: str, image: np.ndarray, label_sets: dict) -> list[Path]:
    """One PNG per plane; pipelines side by side with a fixed tissue legend."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap
    from matplotlib.patches import Patch

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cmap = ListedColormap([TISSUE_COLORS[t] for t in Tissue])
    image = np.asarray(image)
    centre = [s // 2 for s in image.shape]
    planes = {"sagittal": 0, "coronal": 1, "axial": 2}
    written = []
    for plane, axis in planes.items():
        fig, axes = plt.subplots(1, len(label_sets), figsize=(3 * len(label_sets), 3.3), squeeze=False)
        for ax, (name, labels) in zip(axes[0], label_sets.items()):
            img = np.take(image, centre[axis], axis=axis).T
            lab = np.take(np.asarray(labels), centre[axis], axis=axis).T
            ax.imshow(img, cmap="gray", origin="lower")
            ax.imshow(lab, cmap=cmap, vmin=-0.5, vmax=8.5, origin="lower", interpolation="nearest")
            ax.set_title(name, fontsize=8)
            ax.axis("off")
        handles = [Patch(color=TISSUE_COLORS[t][:3], label=t.display_name) for t in TISSUES]
        fig.legend(handles=handles, loc="lower center", ncol=4, fontsize=6)
        path = directory / f"{subject_id}_{plane}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    return written
