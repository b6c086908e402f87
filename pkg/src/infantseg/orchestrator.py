"""The five training/inference pipelines and their run bookkeeping.

P1  segmenter trained on neonatal T2 and applied to 6-month T2
P2  CycleGAN neonatal->6-month with a segmenter trained on its outputs
P3  P2 plus a registration net; the segmenter is fine-tuned on warped data
P4  P2 inference with WM/GM/CSF replaced from an external 3-tissue map
P5  fresh segmenter trained on real 6-month images with P4's maps as targets

Stage artifacts live under ``<workdir>/runs/<name>/<stage>/``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import nibabel as nib
import numpy as np
import torch

from . import fusion
from .losses import LossLog, LossWeights, cyclegan_total, lncc, registration_loss, seg_loss, smoothness_loss
from .metrics import MetricReport, evaluate
from .nets import (
    AttentionUNet,
    GanConfig,
    ModelBundle,
    PatchDiscriminator,
    RegNet,
    RegNetConfig,
    SegmenterConfig,
    UNetGenerator,
    warp,
    warp_labels,
)
from .phantom import Cohort, PhantomSubject, jacobian_determinant
from .preprocess import strip_skull
from .volcore import LabelMap, Volume, load_labels, rescale_unit

log = logging.getLogger(__name__)

PIPELINES = ("P1_AUNet", "P2_Cyc_AUNet", "P3_Cyc_AUNet_VM", "P4_Cyc_AUNet_iBEAT", "P5_Cyc_AUNet_iBEAT_AUNet")
SHORT_IDS = {p.split("_")[0]: p for p in PIPELINES}
VARIANTS = ("T1", "T2", "both")
INPUT_SIGNATURE = "unit-p99-in-brain-mask"
# Label maps are zeroed outside the mask, so a mask that clips dark tissue
# costs more than one that keeps a rim of background.
MASK_THRESHOLD_SCALE = 0.5
LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))

# Stage directory and required predecessor stages.
STAGES = {"p1": (), "p2": (), "p3": ("p2",), "p4": ("p2",), "p5": ("p4",)}


class StageDependencyError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def pipeline_id(name: str) -> str:
    if name in PIPELINES:
        return name
    key = name.upper().split("_")[0]
    if key in SHORT_IDS:
        return SHORT_IDS[key]
    raise ValueError(f"unknown pipeline {name!r}; expected one of {', '.join(PIPELINES)}")


@dataclass
class TrainingConfig:
    p1_epochs: int = 100
    p2_epochs: int = 100
    p3_reg_epochs: int = 100
    p3_seg_epochs: int = 50
    p5_epochs: int = 100
    batch_size: int = 1
    flip_augment: bool = True
    gan_betas: tuple = (0.5, 0.999)
    # Max gradient norm for the registration net; 0 disables clipping.
    reg_grad_clip: float = 1.0


@dataclass
class PipelineSpec:
    name: str = "default"
    cohort: str | None = None
    pipeline: str = "P5_Cyc_AUNet_iBEAT_AUNet"
    variant: str = "both"
    seed: int = 0
    exact: bool = True
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    regnet: RegNetConfig = field(default_factory=RegNetConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    fresh_segmenter_p3: bool = False
    code_map: dict = field(default_factory=lambda: {1: 1, 2: 2, 3: 3})
    fusion_rule: str = fusion.FUSION_RULE

    def __post_init__(self):
        self.pipeline = pipeline_id(self.pipeline)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["code_map"] = {str(k): int(v) for k, v in self.code_map.items()}
        return json.loads(json.dumps(d, default=list))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        validate_config(d)
        d = copy.deepcopy(d)
        sub = {
            "segmenter": SegmenterConfig,
            "gan": GanConfig,
            "regnet": RegNetConfig,
            "losses": LossWeights,
            "training": TrainingConfig,
        }
        kwargs = {k: v for k, v in d.items() if k not in sub and k in cls.__dataclass_fields__}
        for key, typ in sub.items():
            if key in d:
                kwargs[key] = typ(**{k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()})
        if "code_map" in kwargs:
            kwargs["code_map"] = {int(k): int(v) for k, v in kwargs["code_map"].items()}
        return cls(**kwargs)


def desk_spec(**overrides) -> PipelineSpec:
    """Reduced widths and epoch counts for 32^3 phantoms on one CPU."""
    spec = PipelineSpec(
        # Far fewer optimizer steps than at clinical scale, hence the larger rate.
        segmenter=SegmenterConfig(filters=(8, 16, 32, 64, 128), learning_rate=2e-3),
        gan=GanConfig(generator_filters=(16, 32, 64, 128, 128), discriminator_filters=(16, 32, 64, 128, 1)),
        losses=LossWeights(lncc_window=7),
        training=TrainingConfig(p1_epochs=60, p2_epochs=60, p3_reg_epochs=60, p3_seg_epochs=10, p5_epochs=60),
    )
    for k, v in overrides.items():
        setattr(spec, k, v)
    spec.__post_init__()
    return spec


def config_schema() -> dict:
    return json.loads(resources.files("infantseg").joinpath("data/config_schema.json").read_text())


def validate_config(d: dict):
    jsonschema.validate(d, config_schema())


def load_config(path) -> PipelineSpec:
    return PipelineSpec.from_dict(json.loads(Path(path).read_text()))


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    d = copy.deepcopy(d)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


# ---------------------------------------------------------------------------
# Determinism and run bookkeeping
# ---------------------------------------------------------------------------


def seed_everything(seed: int, exact: bool = True):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    torch.use_deterministic_algorithms(exact)


@dataclass
class RunState:
    checkpoints: dict = field(default_factory=dict)
    epochs: dict = field(default_factory=dict)
    loss_logs: dict = field(default_factory=dict)
    completed: dict = field(default_factory=dict)

    @classmethod
    def load(cls, run_dir) -> "RunState":
        path = Path(run_dir) / "state.json"
        if path.exists():
            return cls(**json.loads(path.read_text()))
        return cls()

    def save(self, run_dir):
        path = Path(run_dir) / "state.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2))


class Run:
    """Directory layout and stage bookkeeping for one named experiment."""

    def __init__(self, workdir, spec: PipelineSpec):
        self.spec = spec
        self.root = Path(workdir) / "runs" / spec.name
        self.root.mkdir(parents=True, exist_ok=True)

    def stage_dir(self, stage: str) -> Path:
        d = self.root / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    @property
    def state(self) -> RunState:
        return RunState.load(self.root)

    def is_complete(self, stage: str) -> bool:
        return bool(self.state.completed.get(stage))

    def require(self, stage: str):
        missing = [dep for dep in STAGES[stage] if not self.is_complete(dep)]
        if missing:
            raise StageDependencyError(
                f"stage {stage} needs completed stage(s) {', '.join(missing)} under {self.root}; run those first"
            )

    def mark(self, stage: str, epochs: int, checkpoints: dict):
        st = self.state
        st.checkpoints[stage] = {k: str(v) for k, v in checkpoints.items()}
        st.epochs[stage] = epochs
        st.loss_logs[stage] = str(self.stage_dir(stage) / "loss.ndjson")
        st.completed[stage] = True
        st.save(self.root)

    def echo_config(self, stage: str, extra: dict | None = None):
        payload = {"spec": self.spec.to_dict(), "stage": stage, **(extra or {})}
        (self.stage_dir(stage) / "config.json").write_text(json.dumps(payload, indent=2, default=str))

    def bundle(self, stage: str, key: str) -> ModelBundle:
        return ModelBundle.load(self.stage_dir(stage) / f"{key}.pt")


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


def inference_mask(v: Volume) -> np.ndarray:
    return strip_skull(v, threshold_scale=MASK_THRESHOLD_SCALE).data.astype(bool)


class SubjectData:
    """Network-ready tensors for one subject, computed lazily and cached."""

    def __init__(self, subject: PhantomSubject):
        self.subject = subject
        self._cache = {}

    @property
    def sid(self) -> str:
        return self.subject.subject_id

    def m6_mask(self) -> np.ndarray:
        if "m6_mask" not in self._cache:
            self._cache["m6_mask"] = inference_mask(self.subject.m6_t2)
        return self._cache["m6_mask"]

    def neo_mask(self) -> np.ndarray:
        return self.subject.labels_neo.data != 0

    def image(self, which: str) -> torch.Tensor:
        """``(C, D, H, W)`` float tensor; ``which`` in neo, T1, T2, both."""
        if which not in self._cache:
            s = self.subject
            if which == "neo":
                arrs = [rescale_unit(s.neo_t2, self.neo_mask()).data]
            elif which == "T1":
                arrs = [rescale_unit(s.m6_t1, self.m6_mask()).data]
            elif which == "T2":
                arrs = [rescale_unit(s.m6_t2, self.m6_mask()).data]
            elif which == "both":
                arrs = [self.image("T1")[0].numpy(), self.image("T2")[0].numpy()]
            else:
                raise ValueError(f"unknown input {which!r}")
            self._cache[which] = torch.from_numpy(np.stack(arrs).astype(np.float32))
        return self._cache[which]

    def labels(self, session: str) -> torch.Tensor:
        lm = self.subject.labels_neo if session == "neo" else self.subject.labels_m6
        return torch.from_numpy(lm.data.astype(np.int64))


def prepare(cohort: Cohort) -> dict[str, SubjectData]:
    return {sid: SubjectData(s) for sid, s in cohort.subjects.items()}


# ---------------------------------------------------------------------------
# Generic segmenter training
# ---------------------------------------------------------------------------


def _epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    g = torch.Generator().manual_seed(seed * 100003 + epoch)
    return torch.randperm(n, generator=g).tolist()


def _flip(x: torch.Tensor, y: torch.Tensor, seed: int, epoch: int, idx: int):
    g = torch.Generator().manual_seed(seed * 7919 + epoch * 131 + idx)
    if torch.rand(1, generator=g).item() < 0.5:
        return x.flip(-3), y.flip(-3)
    return x, y


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


def _check_finite(value: float, stage: str, epoch: int):
    if not math.isfinite(value):
        raise TrainingDiverged(f"{stage}: non-finite loss at epoch {epoch}; last good checkpoint kept")


def fit_segmenter(
    model: AttentionUNet,
    samples: list[tuple[torch.Tensor, torch.Tensor]],
    epochs: int,
    stage_dir: Path,
    seed: int,
    lr: float,
    batch_size: int = 1,
    flip: bool = True,
    resume: bool = True,
    tag: str = "segmenter",
) -> list[float]:
    """Train with the DICE + cross-entropy loss, checkpointing every epoch.

    An existing ``<tag>_state.pt`` in ``stage_dir`` is resumed from, so
    ``epochs`` is the total count, not the number of additional epochs.
    """
    state_path = stage_dir / f"{tag}_state.pt"
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    start, history = 0, []
    if resume and state_path.exists():
        st = torch.load(state_path, weights_only=False)
        model.load_state_dict(st["model"])
        opt.load_state_dict(st["optimizer"])
        start, history = st["epoch"], st["history"]
    logger = LossLog(stage_dir / "loss.ndjson")
    model.train()
    for epoch in range(start, epochs):
        total = 0.0
        order = _epoch_order(len(samples), seed, epoch)
        for batch in _batches(order, batch_size):
            xs, ys = [], []
            for i in batch:
                x, y = samples[i]
                if flip:
                    x, y = _flip(x, y, seed, epoch, i)
                xs.append(x)
                ys.append(y)
            x, y = torch.stack(xs), torch.stack(ys)
            opt.zero_grad()
            loss = seg_loss(model(x), y)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch)
        mean = total / len(samples)
        _check_finite(mean, tag, epoch)
        history.append(mean)
        logger.write(epoch, {f"{tag}_seg_loss": mean})
        torch.save({"model": model.state_dict(), "optimizer": opt.state_dict(), "epoch": epoch + 1, "history": history}, state_path)
    model.eval()
    return history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict(model: AttentionUNet, x: torch.Tensor, mask: np.ndarray | None = None) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        labels = model(x[None]).argmax(1)[0].numpy().astype(np.uint8)
    if mask is not None:
        labels[~mask] = 0
    return labels


def infer(bundle: ModelBundle, volumes: list[Volume], mask=None, signature: str | None = INPUT_SIGNATURE) -> LabelMap:
    """Label map from raw volumes (one per input channel).

    Volumes are scaled with the bundle's recorded input convention; the
    result is restricted to ``mask`` (skull-stripped from the last volume
    when omitted).
    """
    cfg = bundle.config
    if len(volumes) != cfg.in_channels:
        raise ValueError(f"bundle expects {cfg.in_channels} input volume(s), got {len(volumes)}")
    recorded = bundle.meta.get("input_signature")
    if signature is not None and recorded not in (None, signature):
        log.warning("input signature %s differs from the bundle's %s", signature, recorded)
    if mask is None:
        mask = inference_mask(volumes[-1])
    mask = np.asarray(mask, bool)
    x = torch.from_numpy(np.stack([rescale_unit(v, mask).data for v in volumes]).astype(np.float32))
    return LabelMap.like(predict(bundle.model, x, mask), volumes[0])


def evaluate_predictions(name: str, preds: dict, cohort: Cohort, session: str = "m6", units: str = "voxel") -> MetricReport:
    report = MetricReport(name, units)
    for sid, pred in preds.items():
        s = cohort.subjects[sid]
        gt = s.labels_m6 if session == "m6" else s.labels_neo
        pred_lm = pred if isinstance(pred, LabelMap) else LabelMap.like(pred, gt)
        report.add(sid, evaluate(pred_lm, gt, units))
    return report


def segment_subjects(model, data: dict[str, SubjectData], ids, which: str) -> dict[str, np.ndarray]:
    out = {}
    for sid in ids:
        d = data[sid]
        mask = d.neo_mask() if which == "neo" else d.m6_mask()
        out[sid] = predict(model, d.image(which), mask)
    return out


# ---------------------------------------------------------------------------
# P1
# ---------------------------------------------------------------------------


def _new_segmenter(spec: PipelineSpec, in_channels: int = 1, seed_offset: int = 0) -> AttentionUNet:
    torch.manual_seed(spec.seed + seed_offset)
    return AttentionUNet(_with(spec.segmenter, in_channels=in_channels))


def _with(cfg, **changes):
    d = asdict(cfg)
    d.update(changes)
    return type(cfg)(**d)


def train_p1(cohort: Cohort, spec: PipelineSpec, workdir, data=None, resume: bool = True) -> ModelBundle:
    """Segmenter on neonatal T2 and labels."""
    run = Run(workdir, spec)
    seed_everything(spec.seed, spec.exact)
    data = data or prepare(cohort)
    stage = run.stage_dir("p1")
    run.echo_config("p1", {"train": cohort.split["train"]})
    model = _new_segmenter(spec)
    samples = [(data[sid].image("neo"), data[sid].labels("neo")) for sid in cohort.split["train"]]
    if not samples:
        raise ValueError("cohort has no training subjects")
    history = fit_segmenter(model, samples, spec.training.p1_epochs, stage, spec.seed, spec.segmenter.learning_rate,
                            spec.training.batch_size, spec.training.flip_augment, resume)
    bundle = ModelBundle(
        "segmenter", model.cfg, model, "p1",
        {"input_signature": INPUT_SIGNATURE, "inputs": ["T2"], "final_loss": history[-1] if history else None},
    )
    path = bundle.save(stage / "segmenter.pt")
    run.mark("p1", spec.training.p1_epochs, {"segmenter": path})
    return bundle


# ---------------------------------------------------------------------------
# P2
# ---------------------------------------------------------------------------


def build_gan(spec: PipelineSpec) -> dict:
    torch.manual_seed(spec.seed + 1)
    return {
        "g_ab": UNetGenerator(spec.gan),
        "g_ba": UNetGenerator(spec.gan),
        "d_a": PatchDiscriminator(spec.gan),
        "d_b": PatchDiscriminator(spec.gan),
    }


def _gan_diagnostics(nets: dict, data: dict, ids) -> dict:
    """Held-out mean D_B score on synthesized images and cycle error."""
    if not ids:
        return {}
    scores, cyc = [], []
    with torch.no_grad():
        for sid in ids:
            x = data[sid].image("neo")[None]
            fake = nets["g_ab"](x)
            scores.append(float(nets["d_b"](fake).mean()))
            cyc.append(float((nets["g_ba"](fake) - x).abs().mean()))
    return {"heldout_d_b_fake": float(np.mean(scores)), "heldout_cycle_error": float(np.mean(cyc))}


def train_p2(cohort: Cohort, spec: PipelineSpec, workdir, data=None, resume: bool = True) -> dict:
    """CycleGAN with the segmentation term; the segmenter learns on G_AB outputs."""
    run = Run(workdir, spec)
    seed_everything(spec.seed, spec.exact)
    data = data or prepare(cohort)
    stage = run.stage_dir("p2")
    run.echo_config("p2", {"train": cohort.split["train"]})
    nets = build_gan(spec)
    seg = _new_segmenter(spec)
    train_ids = cohort.split["train"]
    heldout = cohort.split["test"]
    w = spec.losses
    use_seg = w.seg_in_gan > 0
    g_params = list(nets["g_ab"].parameters()) + list(nets["g_ba"].parameters())
    d_params = list(nets["d_a"].parameters()) + list(nets["d_b"].parameters())
    betas = tuple(spec.training.gan_betas)
    opt_g = torch.optim.Adam(g_params, lr=spec.gan.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(d_params, lr=spec.gan.learning_rate, betas=betas)
    opt_s = torch.optim.Adam(seg.parameters(), lr=spec.segmenter.learning_rate)
    state_path = stage / "gan_state.pt"
    start = 0
    if resume and state_path.exists():
        st = torch.load(state_path, weights_only=False)
        for k, m in nets.items():
            m.load_state_dict(st[k])
        seg.load_state_dict(st["seg"])
        opt_g.load_state_dict(st["opt_g"])
        opt_d.load_state_dict(st["opt_d"])
        opt_s.load_state_dict(st["opt_s"])
        start = st["epoch"]
    logger = LossLog(stage / "loss.ndjson")
    logger_diag = _gan_diagnostics(nets, data, heldout) if start == 0 else None
    if logger_diag:
        logger.write(-1, logger_diag)
    for m in (*nets.values(), seg):
        m.train()
    for epoch in range(start, spec.training.p2_epochs):
        order = _epoch_order(len(train_ids), spec.seed, epoch)
        partner = _epoch_order(len(train_ids), spec.seed + 1, epoch)
        sums: dict[str, float] = {}
        for k, (ia, ib) in enumerate(zip(order, partner)):
            xa = data[train_ids[ia]].image("neo")
            ya = data[train_ids[ia]].labels("neo")
            xb = data[train_ids[ib]].image("T2")
            if spec.training.flip_augment:
                xa, ya = _flip(xa, ya, spec.seed, epoch, k)
            xa, ya, xb = xa[None], ya[None], xb[None]
            opt_g.zero_grad()
            opt_s.zero_grad()
            out = cyclegan_total(xa, xb, nets, seg if use_seg else None, w, ya)
            out.generator.backward()
            opt_g.step()
            if use_seg:
                opt_s.step()
            opt_d.zero_grad()
            (out.discriminator_a + out.discriminator_b).backward()
            opt_d.step()
            for name, val in out.log_values().items():
                sums[name] = sums.get(name, 0.0) + val
        means = {k: v / len(train_ids) for k, v in sums.items()}
        _check_finite(means["generator_total"], "p2", epoch)
        means.update(_gan_diagnostics(nets, data, heldout))
        sat = means.get("discriminator_a", 1.0) < 1e-3 or means.get("discriminator_b", 1.0) < 1e-3
        if sat:
            log.warning("p2 epoch %d: discriminator loss near zero (possible collapse)", epoch)
        logger.write(epoch, means)
        torch.save(
            {**{k: m.state_dict() for k, m in nets.items()}, "seg": seg.state_dict(), "opt_g": opt_g.state_dict(),
             "opt_d": opt_d.state_dict(), "opt_s": opt_s.state_dict(), "epoch": epoch + 1},
            state_path,
        )
    for m in (*nets.values(), seg):
        m.eval()
    bundles = {k: ModelBundle("generator" if k.startswith("g") else "discriminator", spec.gan, m, "p2")
               for k, m in nets.items()}
    bundles["segmenter"] = ModelBundle("segmenter", seg.cfg, seg, "p2", {"input_signature": INPUT_SIGNATURE, "inputs": ["T2"]})
    paths = {k: b.save(stage / f"{k}.pt") for k, b in bundles.items()}
    run.mark("p2", spec.training.p2_epochs, paths)
    return bundles


# ---------------------------------------------------------------------------
# P3
# ---------------------------------------------------------------------------


def endpoint_error(flow: np.ndarray, true_field: np.ndarray, mask: np.ndarray | None = None) -> float:
    err = np.sqrt(((flow - true_field) ** 2).sum(0))
    return float(err[mask].mean() if mask is not None else err.mean())


def _synthesize(g_ab, data, ids) -> dict[str, torch.Tensor]:
    with torch.no_grad():
        return {sid: g_ab(data[sid].image("neo")[None])[0] for sid in ids}


def fit_regnet(model: RegNet, pairs: list, epochs: int, stage_dir: Path, seed: int, lr: float, weights: LossWeights,
               track: list | None = None, resume: bool = True, tag: str = "regnet", clip: float = 0.0) -> list[dict]:
    """Train on ``(moving, fixed)`` tensor pairs.

    ``track`` is an optional list of ``((moving, fixed), (true_field, mask))``
    whose mean endpoint error is logged every epoch.
    """
    state_path = stage_dir / f"{tag}_state.pt"
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    start, history = 0, []
    if resume and state_path.exists():
        st = torch.load(state_path, weights_only=False)
        model.load_state_dict(st["model"])
        opt.load_state_dict(st["optimizer"])
        start, history = st["epoch"], st["history"]
    logger = LossLog(stage_dir / "loss.ndjson")
    for epoch in range(start, epochs):
        model.train()
        total = 0.0
        for i in _epoch_order(len(pairs), seed, epoch):
            m, f = pairs[i]
            opt.zero_grad()
            flow = model(m[None], f[None])
            loss = registration_loss(f[None], m[None], flow, weights)
            loss.backward()
            if clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
            opt.step()
            total += float(loss.detach())
        rec = {f"{tag}_loss": total / len(pairs)}
        _check_finite(rec[f"{tag}_loss"], tag, epoch)
        if track:
            rec[f"{tag}_epe"] = mean_epe(model, [p for p, _ in track], [t for _, t in track])
        history.append(rec)
        logger.write(epoch, rec)
        torch.save({"model": model.state_dict(), "optimizer": opt.state_dict(), "epoch": epoch + 1, "history": history}, state_path)
    model.eval()
    return history


def predict_flow(model: RegNet, moving: torch.Tensor, fixed: torch.Tensor) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return model(moving[None], fixed[None])[0].numpy()


def mean_epe(model, pairs, truth) -> float:
    return float(np.mean([endpoint_error(predict_flow(model, m, f), u, mask) for (m, f), (u, mask) in zip(pairs, truth)]))


def folding_fraction(flow: np.ndarray, mask: np.ndarray | None = None) -> float:
    jac = jacobian_determinant(flow)
    sel = jac[mask] if mask is not None else jac
    return float((sel <= 0).mean())


def train_p3(cohort: Cohort, spec: PipelineSpec, workdir, data=None, smooth: float | None = None,
             stage_name: str = "p3", resume: bool = True) -> dict:
    """Registration of synthesized 6-month images onto real ones, then
    segmenter fine-tuning on the warped images and labels."""
    run = Run(workdir, spec)
    run.require("p3")
    seed_everything(spec.seed, spec.exact)
    data = data or prepare(cohort)
    p2_gen = run.bundle("p2", "g_ab").model
    p2_seg = run.bundle("p2", "segmenter")
    stage = run.stage_dir(stage_name)
    weights = copy.deepcopy(spec.losses)
    if smooth is not None:
        weights.smooth = smooth
    run.echo_config(stage_name, {"smooth": weights.smooth})
    train_ids, test_ids = cohort.split["train"], cohort.split["test"]
    syn = _synthesize(p2_gen, data, train_ids + test_ids)

    def pair(sid):
        return syn[sid], data[sid].image("T2")

    def truth(sid):
        return cohort.subjects[sid].true_field, data[sid].m6_mask()

    torch.manual_seed(spec.seed + 2)
    regnet = RegNet(spec.regnet)
    reg_hist = fit_regnet(regnet, [pair(s) for s in train_ids], spec.training.p3_reg_epochs, stage, spec.seed,
                          spec.regnet.learning_rate, weights, [(pair(s), truth(s)) for s in test_ids], resume,
                          clip=spec.training.reg_grad_clip)
    flows = {sid: predict_flow(regnet, *pair(sid)) for sid in train_ids + test_ids}
    folding = {sid: folding_fraction(flows[sid], data[sid].m6_mask()) for sid in flows}
    for sid, frac in folding.items():
        if frac > 0.01:
            log.warning("p3: %s has %.2f%% non-positive Jacobian voxels", sid, 100 * frac)
    samples = []
    for sid in train_ids:
        flow = torch.from_numpy(flows[sid])[None]
        x = warp(syn[sid][None], flow)[0]
        y = warp_labels(data[sid].labels("neo")[None], flow)[0]
        samples.append((x.detach(), y))
    seg = _new_segmenter(spec) if spec.fresh_segmenter_p3 else copy.deepcopy(p2_seg.model)
    seg_hist = fit_segmenter(seg, samples, spec.training.p3_seg_epochs, stage, spec.seed, spec.segmenter.learning_rate,
                             spec.training.batch_size, spec.training.flip_augment, resume, tag="segmenter")
    epe = {sid: endpoint_error(flows[sid], *truth(sid)) for sid in train_ids + test_ids}
    zero = {sid: endpoint_error(np.zeros_like(flows[sid]), *truth(sid)) for sid in train_ids + test_ids}

    def pick(d, ids):
        return {sid: d[sid] for sid in ids}

    # Train pairs are the ones whose warped labels feed the segmenter.
    summary = {"smooth": weights.smooth, "train_epe": pick(epe, train_ids), "train_zero_epe": pick(zero, train_ids),
               "test_epe": pick(epe, test_ids), "test_zero_epe": pick(zero, test_ids), "folding": folding,
               "final_reg_loss": reg_hist[-1] if reg_hist else None, "final_seg_loss": seg_hist[-1] if seg_hist else None}
    (stage / "summary.json").write_text(json.dumps(summary, indent=2))
    bundles = {
        "regnet": ModelBundle("regnet", spec.regnet, regnet, stage_name, {"smooth": weights.smooth}),
        "segmenter": ModelBundle("segmenter", seg.cfg, seg, stage_name, {"input_signature": INPUT_SIGNATURE, "inputs": ["T2"]}),
    }
    paths = {k: b.save(stage / f"{k}.pt") for k, b in bundles.items()}
    if stage_name == "p3":
        run.mark("p3", spec.training.p3_reg_epochs, paths)
    bundles["summary"] = summary
    return bundles


def sweep_p3(cohort: Cohort, spec: PipelineSpec, workdir, lambdas=LAMBDA_GRID, data=None) -> dict:
    """One P3 run per smoothness weight and a comparison table."""
    run = Run(workdir, spec)
    run.require("p3")
    data = data or prepare(cohort)
    rows = []
    for lam in lambdas:
        res = train_p3(cohort, spec, workdir, data, smooth=lam, stage_name=f"p3_sweep/lambda_{lam:.1f}")
        preds = segment_subjects(res["segmenter"].model, data, cohort.split["test"], "T2")
        rep = evaluate_predictions(f"P3 lambda={lam:.1f}", preds, cohort)
        s = res["summary"]
        rows.append({
            "lambda": lam,
            "dice": rep.average()["dice"],
            "hd95": rep.average()["hd95"],
            "assd": rep.average()["assd"],
            "test_epe": float(np.mean(list(s["test_epe"].values()))) if s["test_epe"] else math.nan,
            "max_folding": max(s["folding"].values()) if s["folding"] else math.nan,
        })
    table = ["| λ | DICE | HD95 | ASSD | EPE | folding |", "|---|---|---|---|---|---|"]
    for r in rows:
        table.append(f"| {r['lambda']:.1f} | {r['dice']:.3f} | {r['hd95']:.2f} | {r['assd']:.2f} | {r['test_epe']:.3f} | {r['max_folding']:.4f} |")
    out = run.stage_dir("p3_sweep")
    (out / "comparison.md").write_text("\n".join(table) + "\n")
    (out / "comparison.json").write_text(json.dumps(rows, indent=2))
    best = max(rows, key=lambda r: r["dice"])
    return {"rows": rows, "table": "\n".join(table) + "\n", "best_lambda": best["lambda"]}


# ---------------------------------------------------------------------------
# P4
# ---------------------------------------------------------------------------


def write_reference_three_tissue(cohort: Cohort, out_dir, code_map: dict | None = None) -> dict:
    """Export ground-truth WM/GM/CSF maps in an external code scheme.

    ``code_map`` maps external code to canonical tissue; the inverse is used
    to encode. Stands in for an external tool's output on phantoms.
    """
    code_map = code_map or {1: 1, 2: 2, 3: 3}
    inverse = {int(v): int(k) for k, v in code_map.items()}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for sid, s in cohort.subjects.items():
        canon = fusion.three_tissue_from_labels(s.labels_m6).data
        ext = np.zeros(canon.shape, dtype=np.int16)
        for c, e in inverse.items():
            ext[canon == c] = e
        img = nib.Nifti1Image(ext, s.labels_m6.affine)
        img.header.set_zooms(s.labels_m6.spacing)
        path = out / f"{sid}_3tissue.nii.gz"
        nib.save(img, str(path))
        paths[sid] = path
    return paths


@dataclass
class BatchResult:
    outputs: dict
    errors: dict

    @property
    def ok(self) -> bool:
        return not self.errors


def run_p4(cohort: Cohort, spec: PipelineSpec, workdir, three_tissue: dict, data=None) -> BatchResult:
    """P2 inference on 6-month T2, then WM/GM/CSF replacement per subject.

    Subjects whose 3-tissue file is missing or invalid are reported in
    ``errors``; the others are still processed.
    """
    run = Run(workdir, spec)
    run.require("p4")
    data = data or prepare(cohort)
    seg = run.bundle("p2", "segmenter")
    stage = run.stage_dir("p4")
    run.echo_config("p4", {"three_tissue": {k: str(v) for k, v in three_tissue.items()}})
    fused, errors, p2_out = {}, {}, {}
    for sid, s in cohort.subjects.items():
        try:
            path = three_tissue.get(sid)
            if path is None or not Path(path).exists():
                raise FileNotFoundError(f"no 3-tissue file for {sid}")
            three = fusion.ingest_three_tissue(path, spec.code_map, reference=s.m6_t2, source="external-3-tissue")
            mask = data[sid].m6_mask()
            eight = LabelMap.like(predict(seg.model, data[sid].image("T2"), mask), s.m6_t2)
            out = fusion.fuse_labels(eight, three, mask, spec.fusion_rule)
            fusion.write_fused(out, stage, sid, {"rule": spec.fusion_rule, "eight": "p2/segmenter.pt", "three": str(path),
                                                 "code_map": {str(k): int(v) for k, v in spec.code_map.items()}})
            fused[sid] = out
            p2_out[sid] = eight
        except Exception as exc:  # noqa: BLE001 - per-subject batch contract
            errors[sid] = f"{type(exc).__name__}: {exc}"
            log.error("p4 %s: %s", sid, exc)
    (stage / "errors.json").write_text(json.dumps(errors, indent=2))
    if not errors:
        run.mark("p4", 0, {sid: stage / f"{sid}_fused.nii.gz" for sid in fused})
    return BatchResult({"fused": fused, "p2": p2_out}, errors)


def load_fused(run: Run, ids) -> dict[str, LabelMap]:
    return {sid: load_labels(run.stage_dir("p4") / f"{sid}_fused.nii.gz") for sid in ids}


# ---------------------------------------------------------------------------
# P5
# ---------------------------------------------------------------------------


def train_p5(cohort: Cohort, spec: PipelineSpec, workdir, variant: str | None = None, data=None,
             resume: bool = True) -> ModelBundle:
    """Fresh segmenter on real 6-month images with fused maps as targets."""
    variant = variant or spec.variant
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    run = Run(workdir, spec)
    run.require("p5")
    seed_everything(spec.seed, spec.exact)
    data = data or prepare(cohort)
    train_ids = cohort.split["train"]
    fused = load_fused(run, train_ids)
    manifest = fusion.make_pseudo_labels({"split": cohort.split}, {sid: run.stage_dir("p4") / f"{sid}_fused.nii.gz" for sid in fused},
                                         variant, cohort.root)
    stage = run.stage_dir(f"p5_{variant}")
    run.echo_config(f"p5_{variant}", {"pseudo_labels": manifest})
    (stage / "pseudo_labels.json").write_text(json.dumps(manifest, indent=2))
    in_ch = manifest["in_channels"]
    model = _new_segmenter(spec, in_channels=in_ch, seed_offset=5)
    samples = [(data[sid].image(variant), torch.from_numpy(fused[sid].data.astype(np.int64))) for sid in train_ids]
    history = fit_segmenter(model, samples, spec.training.p5_epochs, stage, spec.seed, spec.segmenter.learning_rate,
                            spec.training.batch_size, spec.training.flip_augment, resume)
    bundle = ModelBundle("segmenter", model.cfg, model, f"p5_{variant}",
                         {"input_signature": INPUT_SIGNATURE, "inputs": ["T1", "T2"] if variant == "both" else [variant],
                          "variant": variant, "final_loss": history[-1] if history else None})
    path = bundle.save(stage / "segmenter.pt")
    st = run.state
    st.checkpoints[f"p5_{variant}"] = {"segmenter": str(path)}
    st.completed[f"p5_{variant}"] = True
    st.epochs[f"p5_{variant}"] = spec.training.p5_epochs
    st.save(run.root)
    return bundle


# ---------------------------------------------------------------------------
# Evaluation of a finished pipeline
# ---------------------------------------------------------------------------


def evaluate_pipeline(pipeline: str, cohort: Cohort, spec: PipelineSpec, workdir, data=None, units: str = "voxel",
                      variant: str | None = None) -> MetricReport:
    """Score a trained pipeline on the test split's 6-month labels."""
    pid = pipeline_id(pipeline)
    run = Run(workdir, spec)
    data = data or prepare(cohort)
    ids = cohort.split["test"]
    key = pid.split("_")[0].lower()
    if key == "p4":
        preds = {sid: m.data for sid, m in load_fused(run, ids).items()}
    elif key == "p5":
        variant = variant or spec.variant
        model = run.bundle(f"p5_{variant}", "segmenter").model
        preds = segment_subjects(model, data, ids, variant)
    else:
        if not run.is_complete(key):
            raise StageDependencyError(f"{pid} has not been trained under {run.root}")
        model = run.bundle(key, "segmenter").model
        preds = segment_subjects(model, data, ids, "T2")
    report = evaluate_predictions(pid if key != "p5" else f"{pid}[{variant}]", preds, cohort, units=units)
    (run.stage_dir("reports") / f"{key}{'_' + variant if key == 'p5' else ''}.json").write_text(
        json.dumps(report.to_dict(), indent=2))
    return report


def train_stage(pipeline: str, cohort: Cohort, spec: PipelineSpec, workdir, three_tissue: dict | None = None, data=None):
    """Run the single stage that ``pipeline`` adds on top of its predecessors."""
    key = pipeline_id(pipeline).split("_")[0].lower()
    run = Run(workdir, spec)
    if key in STAGES:
        run.require(key)
    t0 = time.time()
    if key == "p1":
        out = train_p1(cohort, spec, workdir, data)
    elif key == "p2":
        out = train_p2(cohort, spec, workdir, data)
    elif key == "p3":
        out = train_p3(cohort, spec, workdir, data)
    elif key == "p4":
        if three_tissue is None:
            raise ValueError("P4 needs 3-tissue files")
        out = run_p4(cohort, spec, workdir, three_tissue, data)
    else:
        out = train_p5(cohort, spec, workdir, data=data)
    log.info("%s finished in %.1fs", pipeline, time.time() - t0)
    return out
