"""3D network architectures and the differentiable warping layer."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BUNDLE_VERSION = 1


@dataclass
class SegmenterConfig:
    in_channels: int = 1
    out_channels: int = 9
    filters: tuple = (32, 64, 128, 256, 512)
    kernel_size: int = 3
    stride: int = 2
    attention: bool = True
    norm_groups: int = 8
    learning_rate: float = 4e-4

    @property
    def divisor(self) -> int:
        return self.stride ** (len(self.filters) - 1)


@dataclass
class GanConfig:
    in_channels: int = 1
    generator_filters: tuple = (64, 128, 256, 512, 512)
    discriminator_filters: tuple = (64, 128, 256, 512, 1)
    kernel_size: int = 3
    stride: int = 2
    learning_rate: float = 8e-4

    @property
    def generator_divisor(self) -> int:
        return self.stride ** len(self.generator_filters)


@dataclass
class RegNetConfig:
    filters: tuple = (16, 32, 32, 32)
    kernel_size: int = 3
    stride: int = 2
    learning_rate: float = 2e-3

    @property
    def divisor(self) -> int:
        return self.stride ** len(self.filters)


def _groups(channels: int, wanted: int) -> int:
    g = min(wanted, channels)
    while channels % g:
        g -= 1
    return g


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv3d(cin, cout, k, stride=stride, padding=k // 2)


# ---------------------------------------------------------------------------
# Attention-gated U-Net
# ---------------------------------------------------------------------------


class ConvUnit(nn.Module):
    def __init__(self, cin, cout, k, stride, groups):
        super().__init__()
        self.conv = _conv(cin, cout, k, stride)
        self.norm = nn.GroupNorm(_groups(cout, groups), cout)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.1)


class EncoderBlock(nn.Module):
    def __init__(self, cin, cout, k, stride, groups):
        super().__init__()
        self.down = ConvUnit(cin, cout, k, stride, groups)
        self.refine = ConvUnit(cout, cout, k, 1, groups)

    def forward(self, x):
        return self.refine(self.down(x))


class AttentionGate(nn.Module):
    """Additive attention: the decoder signal rescales the skip features."""

    def __init__(self, skip_ch, gate_ch, inter_ch):
        super().__init__()
        self.w_skip = nn.Conv3d(skip_ch, inter_ch, 1)
        self.w_gate = nn.Conv3d(gate_ch, inter_ch, 1)
        self.psi = nn.Conv3d(inter_ch, 1, 1)

    def forward(self, skip, gate):
        a = torch.sigmoid(self.psi(F.relu(self.w_skip(skip) + self.w_gate(gate))))
        return skip * a


class DecoderBlock(nn.Module):
    def __init__(self, cin, skip_ch, cout, k, stride, groups, attention):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, stride, stride=stride)
        self.gate = AttentionGate(skip_ch, cout, max(1, skip_ch // 2)) if attention else None
        self.merge = ConvUnit(skip_ch + cout, cout, k, 1, groups)

    def forward(self, x, skip):
        x = self.up(x)
        if self.gate is not None:
            skip = self.gate(skip, x)
        return self.merge(torch.cat([skip, x], dim=1))


class AttentionUNet(nn.Module):
    def __init__(self, cfg: SegmenterConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SegmenterConfig()
        f, k, s, g = cfg.filters, cfg.kernel_size, cfg.stride, cfg.norm_groups
        self.stem = nn.Sequential(ConvUnit(cfg.in_channels, f[0], k, 1, g), ConvUnit(f[0], f[0], k, 1, g))
        self.down = nn.ModuleList(EncoderBlock(f[i], f[i + 1], k, s, g) for i in range(len(f) - 1))
        self.up = nn.ModuleList(
            DecoderBlock(f[i + 1], f[i], f[i], k, s, g, cfg.attention) for i in reversed(range(len(f) - 1))
        )
        self.head = nn.Conv3d(f[0], cfg.out_channels, 1)

    def check_input(self, x):
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (batch, {self.cfg.in_channels}, D, H, W), got {tuple(x.shape)}")
        d = self.cfg.divisor
        if any(n % d for n in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {d}")

    def logits(self, x):
        self.check_input(x)
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        h = skips.pop()
        for block in self.up:
            h = block(h, skips.pop())
        return self.head(h)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


def segmenter_forward(model: AttentionUNet, x: torch.Tensor) -> torch.Tensor:
    """Per-class probabilities of shape ``(batch, 9, D, H, W)``."""
    return model(x)


# ---------------------------------------------------------------------------
# CycleGAN generator and PatchGAN discriminator
# ---------------------------------------------------------------------------


class UNetGenerator(nn.Module):
    """Strided-conv encoder, transposed-conv decoder with skips, tanh output.

    Inputs whose sides are not multiples of ``stride ** len(filters)`` are
    reflect-padded (replicate for tiny sides) and the output is cropped back.
    """

    def __init__(self, cfg: GanConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GanConfig()
        f, k, s = cfg.generator_filters, cfg.kernel_size, cfg.stride
        chans = (cfg.in_channels, *f)
        self.enc = nn.ModuleList(_conv(chans[i], chans[i + 1], k, s) for i in range(len(f)))
        self.enc_norm = nn.ModuleList(
            nn.InstanceNorm3d(c, affine=True) if i else nn.Identity() for i, c in enumerate(f)
        )
        dec = []
        for i in reversed(range(len(f))):
            cin = f[i] if i == len(f) - 1 else 2 * f[i]
            cout = f[i - 1] if i else f[0]
            dec.append(nn.ConvTranspose3d(cin, cout, s, stride=s))
        self.dec = nn.ModuleList(dec)
        self.dec_norm = nn.ModuleList(nn.InstanceNorm3d(m.out_channels, affine=True) for m in dec[:-1])
        self.out = _conv(f[0] + cfg.in_channels, cfg.in_channels, k, 1)

    def forward(self, x):
        shape = x.shape[2:]
        d = self.cfg.generator_divisor
        pad = [(-n) % d for n in shape]
        if any(pad):
            spec = []
            for p in reversed(pad):
                spec += [p // 2, p - p // 2]
            mode = "reflect" if all(p < n for p, n in zip(pad, shape)) else "replicate"
            x_in = F.pad(x, spec, mode=mode)
        else:
            x_in = x
        skips = []
        h = x_in
        for conv, norm in zip(self.enc, self.enc_norm):
            h = F.leaky_relu(_safe_norm(norm, conv(h)), 0.2)
            skips.append(h)
        skips.pop()
        for i, up in enumerate(self.dec):
            h = up(h)
            if i < len(self.dec_norm):
                h = F.relu(_safe_norm(self.dec_norm[i], h))
                h = torch.cat([h, skips.pop()], dim=1)
            else:
                h = F.relu(h)
        h = torch.tanh(self.out(torch.cat([h, x_in], dim=1)))
        if any(pad):
            sl = [slice(None), slice(None)] + [slice(p // 2, p // 2 + n) for p, n in zip(pad, shape)]
            h = h[tuple(sl)]
        return h


def _safe_norm(norm, h):
    # Instance norm is undefined on a single voxel; pass such maps through.
    if isinstance(norm, nn.InstanceNorm3d) and math.prod(h.shape[2:]) == 1:
        return h
    return norm(h)


class PatchDiscriminator(nn.Module):
    """Stack of stride-2 convolutions ending in a 1-channel patch-score map."""

    def __init__(self, cfg: GanConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GanConfig()
        f, k, s = cfg.discriminator_filters, cfg.kernel_size, cfg.stride
        chans = (cfg.in_channels, *f)
        self.convs = nn.ModuleList(_conv(chans[i], chans[i + 1], k, s) for i in range(len(f)))
        self.norms = nn.ModuleList(
            nn.InstanceNorm3d(c, affine=True) if 0 < i < len(f) - 1 else nn.Identity() for i, c in enumerate(f)
        )

    def forward(self, x):
        h = x
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = _safe_norm(norm, conv(h))
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, 0.2)
        return h

    def output_shape(self, spatial) -> tuple:
        k, s = self.cfg.kernel_size, self.cfg.stride
        out = list(spatial)
        for _ in self.cfg.discriminator_filters:
            out = [(n + 2 * (k // 2) - k) // s + 1 for n in out]
        return tuple(out)


def generator_forward(model: UNetGenerator, x: torch.Tensor) -> torch.Tensor:
    return model(x)


def discriminator_forward(model: PatchDiscriminator, x: torch.Tensor) -> torch.Tensor:
    return model(x)


# ---------------------------------------------------------------------------
# Registration network and spatial transformer
# ---------------------------------------------------------------------------


class RegNet(nn.Module):
    """Encoder-decoder on the concatenated (moving, fixed) pair.

    The final displacement layer starts at zero so training begins at the
    identity transform.
    """

    def __init__(self, cfg: RegNetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or RegNetConfig()
        f, k, s = cfg.filters, cfg.kernel_size, cfg.stride
        chans = (2, *f)
        self.enc = nn.ModuleList(_conv(chans[i], chans[i + 1], k, s) for i in range(len(f)))
        dec = []
        for i in reversed(range(len(f))):
            cin = f[i] if i == len(f) - 1 else f[i + 1] + f[i]
            dec.append(_conv(cin, f[i], k, 1))
        self.dec = nn.ModuleList(dec)
        self.refine = _conv(f[0] + 2, f[0], k, 1)
        self.flow = _conv(f[0], 3, k, 1)
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)

    def forward(self, moving, fixed):
        if moving.shape != fixed.shape:
            raise ValueError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} grids differ")
        d = self.cfg.divisor
        if any(n % d for n in moving.shape[2:]):
            raise ValueError(f"spatial dims must be divisible by {d}")
        x = torch.cat([moving, fixed], dim=1)
        skips = [x]
        h = x
        for conv in self.enc:
            h = F.leaky_relu(conv(h), 0.2)
            skips.append(h)
        skips.pop()
        for i, conv in enumerate(self.dec):
            if i:
                h = torch.cat([h, skips.pop()], dim=1)
            h = F.leaky_relu(conv(h), 0.2)
            h = F.interpolate(h, scale_factor=self.cfg.stride, mode="trilinear", align_corners=False)
        h = F.leaky_relu(self.refine(torch.cat([h, skips.pop()], dim=1)), 0.2)
        return self.flow(h)


def regnet_forward(model: RegNet, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
    """Displacement field ``(batch, 3, D, H, W)`` in voxel units."""
    return model(moving, fixed)


def _sampling_grid(flow: torch.Tensor) -> torch.Tensor:
    shape = flow.shape[2:]
    base = torch.meshgrid(*(torch.arange(n, dtype=flow.dtype, device=flow.device) for n in shape), indexing="ij")
    coords = [b + flow[:, i] for i, b in enumerate(base)]
    # grid_sample wants (x, y, z) ordered as (W, H, D) -> reverse the axes.
    norm = [2.0 * c / max(n - 1, 1) - 1.0 for c, n in zip(coords, shape)]
    return torch.stack(norm[::-1], dim=-1)


def warp(img: torch.Tensor, flow: torch.Tensor, interp: str = "trilinear") -> torch.Tensor:
    """Resample ``img`` at ``i + u(i)``; out-of-grid samples take border values.

    ``img`` is ``(batch, C, D, H, W)``. In ``"label"`` mode ``img`` is a
    one-hot stack; it is warped trilinearly and the per-voxel argmax returned
    as an integer tensor of shape ``(batch, D, H, W)``.
    """
    if img.shape[2:] != flow.shape[2:] or flow.shape[1] != 3:
        raise ValueError(f"field {tuple(flow.shape)} does not match image grid {tuple(img.shape)}")
    grid = _sampling_grid(flow.to(img.dtype))
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=True)
    if interp == "label":
        return out.argmax(dim=1)
    if interp != "trilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    return out


def warp_labels(labels: torch.Tensor, flow: torch.Tensor, num_classes: int = 9) -> torch.Tensor:
    """Label-aware warp of an integer map ``(batch, D, H, W)``."""
    onehot = F.one_hot(labels.long(), num_classes).permute(0, 4, 1, 2, 3).to(flow.dtype)
    return warp(onehot, flow, "label")


# ---------------------------------------------------------------------------
# Model bundles
# ---------------------------------------------------------------------------

_ARCHS = {
    "segmenter": (AttentionUNet, SegmenterConfig),
    "generator": (UNetGenerator, GanConfig),
    "discriminator": (PatchDiscriminator, GanConfig),
    "regnet": (RegNet, RegNetConfig),
}


class BundleError(RuntimeError):
    pass


def _config_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def build(arch: str, cfg) -> nn.Module:
    if arch not in _ARCHS:
        raise BundleError(f"unknown architecture {arch!r}")
    return _ARCHS[arch][0](cfg)


@dataclass
class ModelBundle:
    """A model with its architecture config and the stage that produced it."""

    arch: str
    config: object
    model: nn.Module
    stage: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def new(cls, arch: str, cfg, stage: str = "", **meta) -> "ModelBundle":
        return cls(arch, cfg, build(arch, cfg), stage, dict(meta))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "version": BUNDLE_VERSION,
            "arch": self.arch,
            "config": _config_dict(self.config),
            "stage": self.stage,
            "meta": self.meta,
        }
        torch.save({"header": header, "state_dict": self.model.state_dict()}, path)
        path.with_suffix(".json").write_text(json.dumps(header, indent=2))
        return path

    @classmethod
    def load(cls, path, expect_config=None) -> "ModelBundle":
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
        header = blob["header"]
        if header.get("version") != BUNDLE_VERSION:
            raise BundleError(f"{path}: bundle version {header.get('version')} != {BUNDLE_VERSION}")
        arch = header["arch"]
        cfg_cls = _ARCHS[arch][1]
        cfg = cfg_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()})
        if expect_config is not None and _config_dict(expect_config) != header["config"]:
            raise BundleError(f"{path}: checkpoint config does not match the requested {arch} config")
        model = build(arch, cfg)
        model.load_state_dict(blob["state_dict"])
        return cls(arch, cfg, model, header.get("stage", ""), header.get("meta", {}))


def to_tensor(*arrays, dtype=torch.float32) -> torch.Tensor:
    """Stack 3D arrays as channels of a single-item batch."""
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float64) for a in arrays])[None]).to(dtype)
