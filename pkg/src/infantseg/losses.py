"""Training objectives: segmentation, CycleGAN and registration losses."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .nets import warp

DICE_EPS = 1e-5
LNCC_EPS = 1e-8
PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    smooth: float = 0.6
    lncc_window: int = 15  # 7 on desk-scale phantoms
    cycle: float = 10.0
    identity: float = 5.0
    seg_in_gan: float = 1.0
    adversarial: str = "least-squares"
    # Raw sum over voxels instead of the mean for the smoothness term.
    smooth_sum: bool = False

    def __post_init__(self):
        for name in ("smooth", "cycle", "identity", "seg_in_gan"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} weight must be non-negative")
        if self.lncc_window < 3 or self.lncc_window % 2 == 0:
            raise ValueError("lncc_window must be odd and >= 3")
        if self.adversarial != "least-squares":
            raise ValueError("only the least-squares adversarial loss is supported")


def _target_onehot(target: torch.Tensor, num_classes: int, like: torch.Tensor) -> torch.Tensor:
    if target.dim() == like.dim():  # already (B, C, ...)
        return target.to(like.dtype)
    return F.one_hot(target.long(), num_classes).movedim(-1, 1).to(like.dtype)


def dice_term(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - mean soft DICE over classes present in the target or the prediction's argmax."""
    n_cls = pred.shape[1]
    onehot = _target_onehot(target, n_cls, pred)
    dims = [0] + list(range(2, pred.dim()))
    inter = (pred * onehot).sum(dims)
    denom = pred.sum(dims) + onehot.sum(dims)
    dice = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    with torch.no_grad():
        hard = F.one_hot(pred.argmax(1), n_cls).movedim(-1, 1)
        present = (onehot.sum(dims) > 0) | (hard.sum(dims) > 0)
    return 1.0 - dice[present].mean()


def ce_term(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    onehot = _target_onehot(target, pred.shape[1], pred)
    return -(onehot * torch.log(pred.clamp_min(PROB_FLOOR))).sum(1).mean()


def seg_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft-DICE plus cross-entropy on class probabilities ``(B, 9, ...)``.

    ``target`` is an integer label tensor ``(B, ...)`` or a one-hot stack.
    """
    if pred.shape[1] != 9:
        raise ValueError(f"expected 9 class channels, got {pred.shape[1]}")
    spatial = target.shape[2:] if target.dim() == pred.dim() else target.shape[1:]
    if pred.shape[0] != target.shape[0] or tuple(spatial) != tuple(pred.shape[2:]):
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} shapes differ")
    return dice_term(pred, target) + ce_term(pred, target)


def adversarial_loss(d_scores: torch.Tensor, target_is_real: bool) -> torch.Tensor:
    target = 1.0 if target_is_real else 0.0
    return ((d_scores - target) ** 2).mean()


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def cycle_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    _check_same(x, x_rec)
    return (x - x_rec).abs().mean()


def identity_loss(x: torch.Tensor, gx: torch.Tensor) -> torch.Tensor:
    _check_same(x, gx)
    return (x - gx).abs().mean()


@dataclass
class CycleGanLosses:
    generator: torch.Tensor
    discriminator_a: torch.Tensor
    discriminator_b: torch.Tensor
    components: dict
    fake_b: torch.Tensor
    fake_a: torch.Tensor

    def log_values(self) -> dict:
        vals = {k: float(v.detach()) for k, v in self.components.items()}
        vals["generator_total"] = float(self.generator.detach())
        vals["discriminator_a"] = float(self.discriminator_a.detach())
        vals["discriminator_b"] = float(self.discriminator_b.detach())
        return vals


def cyclegan_total(x_a, x_b, nets, seg_head=None, weights: LossWeights | None = None, y_a=None) -> CycleGanLosses:
    """Generator and discriminator objectives for one unpaired batch.

    ``nets`` maps ``g_ab, g_ba, d_a, d_b`` to modules. Domain A is neonatal
    and carries labels ``y_a`` consumed by ``seg_head`` through ``g_ab``.
    Discriminator objectives see detached generator outputs.
    """
    w = weights or LossWeights()
    g_ab, g_ba, d_a, d_b = nets["g_ab"], nets["g_ba"], nets["d_a"], nets["d_b"]
    fake_b = g_ab(x_a)
    fake_a = g_ba(x_b)
    comp = {
        "adv_ab": adversarial_loss(d_b(fake_b), True),
        "adv_ba": adversarial_loss(d_a(fake_a), True),
        "cycle_a": cycle_loss(x_a, g_ba(fake_b)),
        "cycle_b": cycle_loss(x_b, g_ab(fake_a)),
    }
    total = comp["adv_ab"] + comp["adv_ba"] + w.cycle * (comp["cycle_a"] + comp["cycle_b"])
    if w.identity > 0:
        comp["identity_a"] = identity_loss(x_a, g_ba(x_a))
        comp["identity_b"] = identity_loss(x_b, g_ab(x_b))
        total = total + w.identity * (comp["identity_a"] + comp["identity_b"])
    if w.seg_in_gan > 0 and seg_head is not None:
        if y_a is None:
            raise ValueError("segmentation term needs labels for the domain-A batch")
        comp["seg"] = seg_loss(seg_head(fake_b), y_a)
        total = total + w.seg_in_gan * comp["seg"]
    d_b_loss = 0.5 * (adversarial_loss(d_b(x_b), True) + adversarial_loss(d_b(fake_b.detach()), False))
    d_a_loss = 0.5 * (adversarial_loss(d_a(x_a), True) + adversarial_loss(d_a(fake_a.detach()), False))
    return CycleGanLosses(total, d_a_loss, d_b_loss, comp, fake_b, fake_a)


def _box_sum(x: torch.Tensor, s: int) -> torch.Tensor:
    # Sum over every fully contained s^3 window.
    return F.avg_pool3d(x, s, stride=1) * (s**3)


def lncc_map(fixed: torch.Tensor, moving: torch.Tensor, s: int) -> torch.Tensor:
    """Windowed Pearson correlation for every valid ``s^3`` window."""
    if fixed.shape != moving.shape:
        raise ValueError(f"grid mismatch {tuple(fixed.shape)} vs {tuple(moving.shape)}")
    if s < 1 or s % 2 == 0:
        raise ValueError("window size must be odd")
    if any(n < s for n in fixed.shape[2:]):
        raise ValueError(f"window {s} exceeds image size {tuple(fixed.shape[2:])}")
    n = float(s**3)
    sf, sm = _box_sum(fixed, s), _box_sum(moving, s)
    cross = _box_sum(fixed * moving, s) - sf * sm / n
    var_f = _box_sum(fixed * fixed, s) - sf * sf / n
    var_m = _box_sum(moving * moving, s) - sm * sm / n
    denom = var_f * var_m
    ok = denom > LNCC_EPS
    safe = torch.where(ok, denom, torch.ones_like(denom))
    return torch.where(ok, cross / torch.sqrt(safe), torch.zeros_like(cross))


def lncc(fixed: torch.Tensor, moving: torch.Tensor, s: int = 15) -> torch.Tensor:
    """Mean windowed correlation in ``[-1, 1]``; flat windows contribute 0."""
    return lncc_map(fixed, moving, s).mean()


def smoothness_loss(flow: torch.Tensor, reduce_sum: bool = False) -> torch.Tensor:
    """Squared forward differences of all displacement components.

    Each axis' difference array is averaged over its own entries and the
    three axes summed; ``reduce_sum`` returns the raw sum instead.
    """
    terms = []
    for axis in range(2, flow.dim()):
        d = torch.diff(flow, dim=axis) ** 2
        terms.append(d.sum() if reduce_sum else d.sum(1).mean())
    return sum(terms)


def registration_loss(fixed, moving, flow, weights: LossWeights | None = None, warped=None) -> torch.Tensor:
    """``(1 - LNCC(F, M o phi)) + smooth * |grad phi|^2``."""
    w = weights or LossWeights()
    if warped is None:
        warped = warp(moving, flow)
    sim = 1.0 - lncc(fixed, warped, w.lncc_window)
    if w.smooth == 0:
        return sim
    return sim + w.smooth * smoothness_loss(flow, w.smooth_sum)


class LossLog:
    """Append-only newline-delimited JSON of per-step loss components."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, step: int, values: dict, **extra):
        with self.path.open("a") as fh:
            for name, value in values.items():
                rec = {"step": step, "component": name, "value": float(value), **extra}
                fh.write(json.dumps(rec) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

