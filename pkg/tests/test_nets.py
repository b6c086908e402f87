import numpy as np
import pytest
import torch

from infantseg.nets import (
    AttentionUNet,
    BundleError,
    GanConfig,
    ModelBundle,
    PatchDiscriminator,
    RegNet,
    RegNetConfig,
    SegmenterConfig,
    UNetGenerator,
    discriminator_forward,
    generator_forward,
    regnet_forward,
    segmenter_forward,
    to_tensor,
    warp,
    warp_labels,
)

DESK_SEG = SegmenterConfig(filters=(8, 16, 32, 64, 128))
DESK_GAN = GanConfig(generator_filters=(16, 32, 64, 128, 128), discriminator_filters=(16, 32, 64, 128, 1))


def test_clinical_defaults():
    s, g, r = SegmenterConfig(), GanConfig(), RegNetConfig()
    assert s.filters == (32, 64, 128, 256, 512) and s.learning_rate == 4e-4 and s.divisor == 16
    assert g.generator_filters == (64, 128, 256, 512, 512)
    assert g.discriminator_filters == (64, 128, 256, 512, 1) and g.learning_rate == 8e-4
    assert r.filters == (16, 32, 32, 32) and r.learning_rate == 2e-3


def test_segmenter_clinical_widths_64():
    torch.manual_seed(0)
    net = AttentionUNet().eval()
    x = torch.randn(1, 1, 64, 64, 64)
    with torch.no_grad():
        p = segmenter_forward(net, x)
        q = segmenter_forward(net, x)
    assert p.shape == (1, 9, 64, 64, 64)
    assert torch.allclose(p.sum(1), torch.ones(1, 64, 64, 64), atol=1e-5)
    assert torch.equal(p, q)


def test_segmenter_two_channels():
    net = AttentionUNet(SegmenterConfig(in_channels=2, filters=(8, 16, 32, 64, 128))).eval()
    with torch.no_grad():
        assert net(torch.randn(1, 2, 32, 32, 32)).shape == (1, 9, 32, 32, 32)


@pytest.mark.parametrize("n", [32, 64, 96])
def test_shape_contracts_over_sizes(n):
    torch.manual_seed(1)
    x = torch.randn(1, 1, n, n, n)
    with torch.no_grad():
        assert AttentionUNet(DESK_SEG).eval()(x).shape == (1, 9, n, n, n)
        g = UNetGenerator(DESK_GAN).eval()
        y = g(x)
        assert y.shape == x.shape and y.abs().max() <= 1
        d = PatchDiscriminator(DESK_GAN).eval()
        assert d(x).shape[2:] == d.output_shape((n, n, n))
        assert RegNet().eval()(x, x).shape == (1, 3, n, n, n)


def test_segmenter_input_errors():
    net = AttentionUNet(DESK_SEG)
    with pytest.raises(ValueError, match="divisible"):
        net(torch.randn(1, 1, 30, 32, 32))
    with pytest.raises(ValueError, match="expected"):
        net(torch.randn(1, 2, 32, 32, 32))


def test_generator_clinical_widths_64():
    torch.manual_seed(2)
    g_ab, g_ba = UNetGenerator().eval(), UNetGenerator().eval()
    x = torch.rand(1, 1, 64, 64, 64) * 2 - 1
    with torch.no_grad():
        y = generator_forward(g_ab, x)
        assert y.shape == x.shape
        assert y.min() >= -1 and y.max() <= 1
        assert generator_forward(g_ba, y).shape == x.shape


def test_generator_pads_odd_sizes():
    g = UNetGenerator(DESK_GAN).eval()
    with torch.no_grad():
        assert g(torch.randn(1, 1, 20, 33, 8)).shape == (1, 1, 20, 33, 8)


def test_discriminator_patch_map_64():
    d = PatchDiscriminator().eval()
    with torch.no_grad():
        out = discriminator_forward(d, torch.randn(1, 1, 64, 64, 64))
    # Five stride-2 layers: 64 / 2**5 = 2 per axis.
    assert out.shape == (1, 1, 2, 2, 2)
    assert d.output_shape((64, 64, 64)) == (2, 2, 2)


def test_regnet_zero_init():
    net = RegNet()
    m, f = torch.randn(1, 1, 32, 32, 32), torch.randn(1, 1, 32, 32, 32)
    flow = regnet_forward(net, m, f)
    assert flow.shape == (1, 3, 32, 32, 32)
    assert flow.abs().max() == 0
    with pytest.raises(ValueError, match="grids differ"):
        net(m, torch.randn(1, 1, 32, 32, 16))


def test_warp_identity_and_shift():
    torch.manual_seed(3)
    img = torch.randn(1, 2, 8, 9, 10, dtype=torch.float64)
    zero = torch.zeros(1, 3, 8, 9, 10, dtype=torch.float64)
    assert torch.allclose(warp(img, zero), img, atol=1e-12)
    labels = torch.randint(0, 9, (1, 8, 9, 10))
    assert torch.equal(warp_labels(labels, zero), labels)
    shift = zero.clone()
    shift[:, 0] = 2.0
    out = warp(img, shift)
    # output(i) = input(i + 2) along x for interior voxels.
    assert torch.allclose(out[:, :, :-2], img[:, :, 2:], atol=1e-10)
    assert torch.allclose(out[:, :, -1], img[:, :, -1], atol=1e-10)


def test_warp_axis_order():
    img = torch.zeros(1, 1, 6, 6, 6, dtype=torch.float64)
    img[0, 0, 2, 3, 4] = 1
    for axis in range(3):
        flow = torch.zeros(1, 3, 6, 6, 6, dtype=torch.float64)
        flow[:, axis] = 1.0
        out = warp(img, flow)
        idx = [2, 3, 4]
        idx[axis] -= 1
        assert out[0, 0, idx[0], idx[1], idx[2]] == pytest.approx(1.0)


def test_warp_labels_valid():
    torch.manual_seed(4)
    labels = torch.randint(0, 9, (1, 8, 8, 8))
    flow = torch.randn(1, 3, 8, 8, 8) * 1.5
    out = warp_labels(labels, flow)
    assert out.dtype == torch.int64 and out.shape == labels.shape
    assert 0 <= int(out.min()) and int(out.max()) <= 8


def test_warp_linear_in_image():
    torch.manual_seed(5)
    a, b = torch.randn(2, 1, 1, 8, 8, 8, dtype=torch.float64)
    flow = torch.randn(1, 3, 8, 8, 8, dtype=torch.float64)
    lhs = warp(2.5 * a - 0.75 * b, flow)
    rhs = 2.5 * warp(a, flow) - 0.75 * warp(b, flow)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_warp_grid_mismatch():
    with pytest.raises(ValueError):
        warp(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 3, 4, 4, 5))


def test_warp_gradcheck():
    torch.manual_seed(6)
    img = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64, requires_grad=True)
    # Keep samples away from the kinks at integer coordinates.
    flow = (0.3 + 0.4 * torch.rand(1, 3, 8, 8, 8, dtype=torch.float64)).requires_grad_()
    assert torch.autograd.gradcheck(warp, (img, flow), eps=1e-6, atol=1e-6, rtol=1e-3)


TINY_SEG = SegmenterConfig(filters=(4, 8), norm_groups=2)
TINY_GAN = GanConfig(generator_filters=(4, 8), discriminator_filters=(4, 8, 8, 4, 1))
TINY_REG = RegNetConfig(filters=(4, 8))


@pytest.mark.parametrize(
    "make",
    [
        lambda: (AttentionUNet(TINY_SEG), 1),
        lambda: (UNetGenerator(TINY_GAN), 1),
        lambda: (PatchDiscriminator(TINY_GAN), 1),
        lambda: (RegNet(TINY_REG), 2),
    ],
    ids=["segmenter", "generator", "discriminator", "regnet"],
)
def test_forward_gradcheck(make):
    torch.manual_seed(7)
    net, n_inputs = make()
    net = net.double()
    if isinstance(net, RegNet):
        torch.nn.init.normal_(net.flow.weight, std=0.1)
    xs = [torch.randn(1, 1, 8, 8, 8, dtype=torch.float64, requires_grad=True) for _ in range(n_inputs)]
    assert torch.autograd.gradcheck(lambda *a: net(*a), xs, eps=1e-6, atol=1e-5, rtol=1e-3, fast_mode=True)


def test_bundle_roundtrip(tmp_path):
    b = ModelBundle.new("segmenter", DESK_SEG, stage="p1", note="x")
    path = b.save(tmp_path / "seg.pt")
    assert path.with_suffix(".json").exists()
    back = ModelBundle.load(path, expect_config=DESK_SEG)
    assert back.stage == "p1" and back.meta == {"note": "x"}
    x = torch.randn(1, 1, 32, 32, 32)
    with torch.no_grad():
        assert torch.equal(b.model.eval()(x), back.model.eval()(x))
    with pytest.raises(BundleError, match="does not match"):
        ModelBundle.load(path, expect_config=SegmenterConfig())


def test_bundle_unknown_arch():
    with pytest.raises(BundleError):
        ModelBundle.new("transformer", DESK_SEG)


def test_to_tensor():
    t = to_tensor(np.zeros((2, 3, 4)), np.ones((2, 3, 4)))
    assert t.shape == (1, 2, 2, 3, 4) and t.dtype == torch.float32
