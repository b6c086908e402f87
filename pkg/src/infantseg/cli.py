"""Command-line entry point: ``infantseg <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure (including partial batch
failures), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, fusion
from . import orchestrator as orch
from .metrics import MetricReport, emit_report, evaluate, reference_reports
from .phantom import Cohort, PhantomConfig, generate_cohort
from .preprocess import crop_to_mask, preprocess_subject
from .volcore import LabelMap, Modality, load_labels, load_volume, save_labels, save_volume

COHORT_ENV = "INFANTSEG_COHORT"
HELP_WIDTH = 100
log = logging.getLogger("infantseg")


class UsageError(Exception):
    pass


class BatchFailure(Exception):
    def __init__(self, errors: dict):
        super().__init__(f"{len(errors)} subject(s) failed")
        self.errors = errors


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------


class NdjsonFormatter(logging.Formatter):
    def format(self, record):
        rec = {"time": round(record.created, 3), "level": record.levelname, "logger": record.name,
               "message": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec, default=str)


def _setup_logging(workdir: Path, command: str, verbosity: int):
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.WARNING - 10 * min(verbosity, 2))
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(console)
    log_dir = workdir / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(log_dir / f"{command}.ndjson")
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(NdjsonFormatter())
    root.addHandler(fh)


def _event(message: str, **fields):
    log.info(message, extra={"fields": fields})


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _resolve(workdir: Path, path) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else workdir / p


def _refuse_existing(path: Path, overwrite: bool):
    if path.exists() and not overwrite:
        raise UsageError(f"{path} exists; pass --overwrite to replace it")


def _parse_lambda_range(text: str) -> list[float]:
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            n = int(round((stop - start) / step)) + 1
            return [round(start + i * step, 10) for i in range(n)]
        return [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --lambda value {text!r}: use start:stop:step or a comma list") from exc


def _load_spec(args, workdir: Path) -> orch.PipelineSpec:
    if args.config:
        cfg_path = _resolve(workdir, args.config)
        if not cfg_path.exists():
            raise UsageError(f"config file {cfg_path} not found")
        base = json.loads(cfg_path.read_text())
    else:
        base = (orch.desk_spec() if args.preset == "desk" else orch.PipelineSpec()).to_dict()
    overrides = list(args.set or [])
    for key in ("name", "seed", "variant", "cohort"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    if getattr(args, "pipeline", None):
        overrides.append(f"pipeline={json.dumps(orch.pipeline_id(args.pipeline))}")
    try:
        resolved = orch.apply_overrides(base, overrides)
        spec = orch.PipelineSpec.from_dict(resolved)
    except Exception as exc:  # jsonschema or value errors in user config
        raise UsageError(f"invalid configuration: {exc}") from exc
    _event("resolved config", config=spec.to_dict())
    return spec


def _cohort_root(args, workdir: Path, spec: orch.PipelineSpec | None = None) -> Path:
    root = getattr(args, "cohort", None) or (spec.cohort if spec else None) or os.environ.get(COHORT_ENV)
    if not root:
        raise UsageError(f"no cohort given: use --cohort, the config's 'cohort' key or ${COHORT_ENV}")
    return _resolve(workdir, root)


def _load_cohort(path: Path) -> Cohort:
    if not (path / "manifest.json").exists():
        raise UsageError(f"{path} has no manifest.json")
    return Cohort.load(path)


def _error_table(errors: dict) -> str:
    width = max(len(k) for k in errors)
    lines = [f"{'subject'.ljust(width)}  error", f"{'-' * width}  -----"]
    lines += [f"{sid.ljust(width)}  {msg}" for sid, msg in sorted(errors.items())]
    return "\n".join(lines)


def _map_jobs(fn, items, jobs: int, processes: bool = False):
    if jobs <= 1:
        return [fn(i) for i in items]
    pool = ProcessPoolExecutor if processes else ThreadPoolExecutor
    with pool(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(args, workdir: Path) -> int:
    out = _resolve(workdir, args.out)
    _refuse_existing(out / "manifest.json", args.overwrite)
    cfg = PhantomConfig(
        grid_size=args.grid_size,
        noise_std=args.noise_std,
        contrast_gap=args.contrast_gap,
        deformation_amplitude=args.deformation_amplitude,
    )
    manifest = generate_cohort(args.n, args.seed, cfg, args.train_fraction, out, overwrite=True)
    if args.three_tissue:
        cohort = Cohort.load(out)
        orch.write_reference_three_tissue(cohort, out / "three_tissue")
    _event("cohort written", out=str(out), ids=manifest["ids"])
    print(f"wrote {len(manifest['ids'])} subjects to {out} "
          f"({len(manifest['split']['train'])} train / {len(manifest['split']['test'])} test)")
    return 0


def _preprocess_one(job):
    sid, src, dst, margin, n4 = job
    try:
        t2 = load_volume(src / "m6_T2.nii.gz", Modality.T2W)
        t1_path = src / "m6_T1.nii.gz"
        t1 = load_volume(t1_path, Modality.T1W) if t1_path.exists() else None
        t2c, t1c, report = preprocess_subject(t2, t1, margin=margin, external_n4=n4)
        dst.mkdir(parents=True, exist_ok=True)
        save_volume(t2c, dst / "m6_T2.nii.gz")
        if t1c is not None:
            save_volume(t1c, dst / "m6_T1.nii.gz")
        save_labels(crop_to_mask(report.brain_mask, report.brain_mask, margin), dst / "brain_mask.nii.gz")
        report.save(dst / "preprocess.json")
        return sid, None
    except Exception as exc:  # noqa: BLE001 - reported per subject
        return sid, f"{type(exc).__name__}: {exc}"


def cmd_preprocess(args, workdir: Path) -> int:
    root = _cohort_root(args, workdir)
    out = _resolve(workdir, args.out)
    manifest = json.loads((root / "manifest.json").read_text())
    ids = args.subjects or manifest["ids"]
    jobs = []
    for sid in ids:
        dst = out / sid
        _refuse_existing(dst / "preprocess.json", args.overwrite)
        jobs.append((sid, root / sid, dst, args.margin, args.n4_cmd))
    results = _map_jobs(_preprocess_one, jobs, args.jobs, processes=True)
    errors = {sid: err for sid, err in results if err}
    _event("preprocess finished", ok=len(ids) - len(errors), errors=errors)
    if errors:
        raise BatchFailure(errors)
    print(f"preprocessed {len(ids)} subjects into {out}")
    return 0


def cmd_train(args, workdir: Path) -> int:
    spec = _load_spec(args, workdir)
    key = spec.pipeline.split("_")[0].lower()
    run = orch.Run(workdir, spec)
    # Dependency check happens before any data is touched.
    run.require(key)
    stage = f"p5_{spec.variant}" if key == "p5" else key
    if run.is_complete(stage):
        if not args.overwrite:
            raise UsageError(f"stage {stage} of run {spec.name} is already complete; pass --overwrite to retrain")
        shutil.rmtree(run.root / stage, ignore_errors=True)
    cohort = _load_cohort(_cohort_root(args, workdir, spec))
    three = None
    if key == "p4":
        three_dir = _resolve(workdir, args.three_tissue) if args.three_tissue else cohort.root / "three_tissue"
        three = {sid: three_dir / f"{sid}_3tissue.nii.gz" for sid in cohort.subjects}
    t0 = time.time()
    out = orch.train_stage(spec.pipeline, cohort, spec, workdir, three_tissue=three)
    elapsed = time.time() - t0
    if key == "p4":
        if not out.ok:
            raise BatchFailure(out.errors)
        print(f"{spec.pipeline}: fused maps in {run.stage_dir('p4')} ({elapsed:.0f}s)")
        return 0
    ckpt = run.stage_dir(stage) / "segmenter.pt"
    _event("train finished", pipeline=spec.pipeline, checkpoint=str(ckpt), seconds=elapsed)
    print(f"{spec.pipeline}: checkpoint {ckpt} ({elapsed:.0f}s)")
    return 0


def _infer_inputs(bundle, t1, t2) -> list:
    inputs = bundle.meta.get("inputs", ["T2"])
    vols = []
    for name in inputs:
        path = t1 if name == "T1" else t2
        if path is None:
            raise UsageError(f"bundle expects a {name} volume; pass --{name.lower()}")
        vols.append(load_volume(path, Modality.T1W if name == "T1" else Modality.T2W))
    return vols


def cmd_infer(args, workdir: Path) -> int:
    from .nets import ModelBundle

    bundle = ModelBundle.load(_resolve(workdir, args.bundle))
    if bundle.arch != "segmenter":
        raise UsageError(f"{args.bundle} holds a {bundle.arch}, not a segmenter")
    out = _resolve(workdir, args.out)
    if args.t1 or args.t2:
        _refuse_existing(out, args.overwrite)
        vols = _infer_inputs(bundle, _resolve(workdir, args.t1), _resolve(workdir, args.t2))
        mask = load_labels(_resolve(workdir, args.mask)).data.astype(bool) if args.mask else None
        save_labels(orch.infer(bundle, vols, mask), out)
        print(f"wrote {out}")
        return 0
    root = _cohort_root(args, workdir)
    manifest = json.loads((root / "manifest.json").read_text())
    ids = manifest["split"][args.split] if args.split != "all" else manifest["ids"]
    out.mkdir(parents=True, exist_ok=True)

    def one(sid):
        dst = out / f"{sid}_pred.nii.gz"
        try:
            _refuse_existing(dst, args.overwrite)
            vols = _infer_inputs(bundle, root / sid / "m6_T1.nii.gz", root / sid / "m6_T2.nii.gz")
            save_labels(orch.infer(bundle, vols), dst)
            return sid, None
        except Exception as exc:  # noqa: BLE001
            return sid, f"{type(exc).__name__}: {exc}"

    results = _map_jobs(one, ids, args.jobs)
    errors = {sid: e for sid, e in results if e}
    if errors:
        raise BatchFailure(errors)
    print(f"wrote {len(ids)} label maps to {out}")
    return 0


def _find(directory: Path, sid: str, suffixes) -> Path | None:
    for suf in suffixes:
        p = directory / f"{sid}{suf}"
        if p.exists():
            return p
    return None


def cmd_fuse(args, workdir: Path) -> int:
    eight_dir = _resolve(workdir, args.eight)
    three_dir = _resolve(workdir, args.three)
    out = _resolve(workdir, args.out)
    code_map = fusion.parse_code_map(args.code_map)
    ids = args.subjects or sorted(p.name.split("_")[0] for p in eight_dir.glob("*_pred.nii.gz"))
    if not ids:
        raise UsageError(f"no <id>_pred.nii.gz maps in {eight_dir}")
    out.mkdir(parents=True, exist_ok=True)
    errors = {}
    for sid in ids:
        try:
            _refuse_existing(out / f"{sid}_fused.nii.gz", args.overwrite)
            eight_path = _find(eight_dir, sid, ("_pred.nii.gz", ".nii.gz"))
            three_path = _find(three_dir, sid, ("_3tissue.nii.gz", ".nii.gz"))
            if eight_path is None or three_path is None:
                raise FileNotFoundError("8-tissue or 3-tissue file missing")
            eight = load_labels(eight_path)
            three = fusion.ingest_three_tissue(three_path, code_map, reference=eight, source=args.source)
            mask = load_labels(_find(_resolve(workdir, args.masks), sid, ("_mask.nii.gz", ".nii.gz"))).data \
                if args.masks else eight.data != 0
            fused = fusion.fuse_labels(eight, three, mask, args.rule)
            fusion.write_fused(fused, out, sid, {"rule": args.rule, "eight": str(eight_path), "three": str(three_path),
                                                  "source": args.source, "code_map": {str(k): int(v) for k, v in code_map.items()}})
        except Exception as exc:  # noqa: BLE001
            errors[sid] = f"{type(exc).__name__}: {exc}"
    if errors:
        raise BatchFailure(errors)
    print(f"fused {len(ids)} subjects into {out}")
    return 0


def _summary_line(report: MetricReport) -> str:
    a = report.average()
    return f"{report.pipeline}: DICE {a['dice']:.3f}  HD95 {a['hd95']:.2f}  ASSD {a['assd']:.2f} ({report.units})"


def cmd_evaluate(args, workdir: Path) -> int:
    if args.pipeline and args.pred:
        raise UsageError("use either --pipeline (trained run) or --pred (label-map directory)")
    if args.pipeline:
        spec = _load_spec(args, workdir)
        cohort = _load_cohort(_cohort_root(args, workdir, spec))
        report = orch.evaluate_pipeline(spec.pipeline, cohort, spec, workdir, units=args.units, variant=spec.variant)
    elif args.pred:
        root = _cohort_root(args, workdir)
        manifest = json.loads((root / "manifest.json").read_text())
        pred_dir = _resolve(workdir, args.pred)
        ids = manifest["split"][args.split] if args.split != "all" else manifest["ids"]
        report = MetricReport(args.name or pred_dir.name, args.units)

        def one(sid):
            p = _find(pred_dir, sid, ("_pred.nii.gz", "_fused.nii.gz", ".nii.gz"))
            if p is None:
                return sid, None, "no prediction file"
            try:
                return sid, evaluate(load_labels(p), load_labels(root / sid / "labels_m6.nii.gz"), args.units), None
            except Exception as exc:  # noqa: BLE001
                return sid, None, f"{type(exc).__name__}: {exc}"

        errors = {}
        for sid, rows, err in _map_jobs(one, ids, args.jobs):
            if err:
                errors[sid] = err
            else:
                report.add(sid, rows)
        if errors:
            raise BatchFailure(errors)
    else:
        raise UsageError("evaluate needs --pipeline or --pred")
    if args.out:
        out = _resolve(workdir, args.out)
        _refuse_existing(out, args.overwrite)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=2))
    _event("evaluation", report=report.to_dict())
    print(_summary_line(report))
    return 0


def cmd_report(args, workdir: Path) -> int:
    reports = []
    if args.reference:
        reports += reference_reports()
    for path in args.reports or []:
        reports.append(MetricReport.from_dict(json.loads(_resolve(workdir, path).read_text())))
    if not reports:
        raise UsageError("nothing to report: pass --reports and/or --reference")
    out = _resolve(workdir, args.out)
    _refuse_existing(out / "report.md", args.overwrite)
    overlays = []
    if args.overlay:
        root = _cohort_root(args, workdir)
        for sid in args.overlay:
            labels = {"truth": load_labels(root / sid / "labels_m6.nii.gz").data}
            for item in args.pred or []:
                name, _, directory = item.partition("=")
                p = _find(_resolve(workdir, directory), sid, ("_pred.nii.gz", "_fused.nii.gz", ".nii.gz"))
                if p is not None:
                    labels[name] = load_labels(p).data
            image = load_volume(root / sid / "m6_T2.nii.gz").data
            overlays.append((sid, image, labels))
    paths = emit_report(reports, out, overlays, digits=args.digits)
    print(f"wrote {paths['md']} and {paths['csv']}" + (f" plus {len(paths['overlays'])} overlays" if overlays else ""))
    return 0


def cmd_sweep(args, workdir: Path) -> int:
    if orch.pipeline_id(args.pipeline) != "P3_Cyc_AUNet_VM":
        raise UsageError("only P3 has a sweep mode (smoothness weight)")
    lambdas = _parse_lambda_range(args.lambda_range)
    spec = _load_spec(args, workdir)
    run = orch.Run(workdir, spec)
    run.require("p3")
    cohort = _load_cohort(_cohort_root(args, workdir, spec))
    res = orch.sweep_p3(cohort, spec, workdir, lambdas)
    print(res["table"], end="")
    print(f"{len(lambdas)} runs; best λ by DICE: {res['best_lambda']:.1f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


def _add_config_args(p, pipeline_required=True):
    p.add_argument("--pipeline", required=pipeline_required, help="pipeline id (P1..P5 or full id)")
    p.add_argument("--config", help="experiment config JSON (validated against the shipped schema)")
    p.add_argument("--preset", choices=("clinical", "desk"), default="desk",
                   help="defaults used when no --config is given (default: desk)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. training.p1_epochs=5; repeatable")
    p.add_argument("--cohort", help=f"cohort directory (default: config 'cohort' or ${COHORT_ENV})")
    p.add_argument("--name", help="run name; artifacts go to runs/<name>/<stage>/")
    p.add_argument("--seed", type=int, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infantseg", formatter_class=_formatter,
                                     description="Infant brain 8-tissue segmentation pipelines on phantom or real cohorts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--workdir", default=".", help="root for relative paths, runs/ and logs/ (default: .)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more console output (-v, -vv)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic longitudinal cohort", formatter_class=_formatter)
    p.add_argument("--n", type=int, required=True, help="number of subjects (>= 2)")
    p.add_argument("--seed", type=int, default=0, help="base seed; subject i uses seed + i (default: 0)")
    p.add_argument("--out", required=True, help="output cohort directory")
    p.add_argument("--grid-size", type=int, default=64, help="voxels per axis (default: 64)")
    p.add_argument("--train-fraction", type=float, default=33 / 43, help="train share of subjects (default: 33/43)")
    p.add_argument("--noise-std", type=float, default=0.02, help="Gaussian noise std (default: 0.02)")
    p.add_argument("--contrast-gap", type=float, default=0.5, help="6-month WM/GM contrast scale in [0, 1] (default: 0.5)")
    p.add_argument("--deformation-amplitude", type=float, default=1.5,
                   help="max neonatal->6-month displacement in voxels (default: 1.5)")
    p.add_argument("--three-tissue", action=argparse.BooleanOptionalAction, default=True,
                   help="also export ground-truth WM/GM/CSF maps to three_tissue/")
    p.add_argument("--overwrite", action="store_true", help="replace an existing cohort")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="bias-correct, skull-strip, align and crop 6-month scans",
                       formatter_class=_formatter)
    p.add_argument("--cohort", help=f"cohort directory (default: ${COHORT_ENV})")
    p.add_argument("--out", required=True, help="output directory, one folder per subject")
    p.add_argument("--subjects", nargs="+", help="subset of subject ids (default: all)")
    p.add_argument("--margin", type=int, default=4, help="crop margin in voxels (default: 4)")
    p.add_argument("--n4-cmd", help="external bias-correction command template with {in} {mask} {out}")
    p.add_argument("--jobs", type=int, default=1, help="parallel subjects (default: 1)")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one pipeline stage", formatter_class=_formatter)
    _add_config_args(p)
    p.add_argument("--variant", choices=orch.VARIANTS, help="P5 input modalities")
    p.add_argument("--three-tissue", help="directory of <id>_3tissue.nii.gz files for P4 (default: <cohort>/three_tissue)")
    p.add_argument("--overwrite", action="store_true", help="retrain a completed stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment 6-month scans with a trained segmenter", formatter_class=_formatter)
    p.add_argument("--bundle", required=True, help="segmenter checkpoint (.pt)")
    p.add_argument("--t2", help="single-subject T2w volume")
    p.add_argument("--t1", help="single-subject T1w volume")
    p.add_argument("--mask", help="brain mask for single-subject mode (default: skull-strip the T2w)")
    p.add_argument("--cohort", help=f"cohort directory for batch mode (default: ${COHORT_ENV})")
    p.add_argument("--split", choices=("train", "test", "all"), default="test", help="batch subjects (default: test)")
    p.add_argument("--out", required=True, help="output file (single) or directory (batch)")
    p.add_argument("--jobs", type=int, default=1, help="parallel subjects (default: 1)")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse", help="replace WM/GM/CSF with an external 3-tissue map", formatter_class=_formatter)
    p.add_argument("--eight", required=True, help="directory of <id>_pred.nii.gz 8-tissue maps")
    p.add_argument("--three", required=True, help="directory of <id>_3tissue.nii.gz external maps")
    p.add_argument("--out", required=True, help="output directory for <id>_fused.nii.gz")
    p.add_argument("--code-map", default="1:CSF,2:GM,3:WM", help="external code mapping (default: 1:CSF,2:GM,3:WM)")
    p.add_argument("--masks", help="directory of <id>_mask.nii.gz brain masks (default: 8-tissue foreground)")
    p.add_argument("--rule", choices=fusion.FUSION_RULES, default=fusion.FUSION_RULE,
                   help="precedence rule (default: deep-structures-win)")
    p.add_argument("--source", default="external-3-tissue", help="provenance tag for the 3-tissue maps")
    p.add_argument("--subjects", nargs="+", help="subset of subject ids")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="DICE/HD95/ASSD against 6-month labels", formatter_class=_formatter)
    _add_config_args(p, pipeline_required=False)
    p.add_argument("--variant", choices=orch.VARIANTS, help="P5 variant to evaluate")
    p.add_argument("--pred", help="directory of predicted label maps (instead of --pipeline)")
    p.add_argument("--split", choices=("train", "test", "all"), default="test", help="subjects (default: test)")
    p.add_argument("--units", choices=("voxel", "mm"), default="voxel", help="distance units (default: voxel)")
    p.add_argument("--out", help="write the MetricReport JSON here")
    p.add_argument("--jobs", type=int, default=1, help="parallel subjects (default: 1)")
    p.add_argument("--overwrite", action="store_true", help="replace an existing report file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render per-tissue comparison tables (markdown/CSV) and overlays", formatter_class=_formatter)
    p.add_argument("--reports", nargs="+", help="MetricReport JSON files")
    p.add_argument("--reference", action="store_true", help="include the shipped reference table")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--digits", type=int, default=2, help="decimal places (default: 2)")
    p.add_argument("--overlay", nargs="+", metavar="ID", help="subjects to render overlay PNGs for")
    p.add_argument("--pred", action="append", metavar="NAME=DIR", help="label-map directory per pipeline; repeatable")
    p.add_argument("--cohort", help=f"cohort directory for overlays (default: ${COHORT_ENV})")
    p.add_argument("--overwrite", action="store_true", help="replace existing report files")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="grid search of the registration smoothness weight", formatter_class=_formatter)
    _add_config_args(p)
    p.add_argument("--lambda", dest="lambda_range", default="0.1:0.9:0.1",
                   help="start:stop:step or comma list (default: 0.1:0.9:0.1)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    workdir = Path(args.workdir).resolve()
    _setup_logging(workdir, args.command, args.verbose)
    _event("invocation", argv=list(sys.argv[1:] if argv is None else argv), command=args.command)
    try:
        return args.func(args, workdir)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"infantseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except orch.StageDependencyError as exc:
        print(f"infantseg {args.command}: {exc}", file=sys.stderr)
        return 1
    except BatchFailure as exc:
        print(f"infantseg {args.command}: {exc}\n{_error_table(exc.errors)}", file=sys.stderr)
        log.error("batch failure", extra={"fields": {"errors": exc.errors}})
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.exception("command failed")
        print(f"infantseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
