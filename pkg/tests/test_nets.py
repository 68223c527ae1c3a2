import pytest
import torch

from deyo.model import DEYO
from deyo.nets import PROFILES, Backbone, ModelScale, Neck, build_backbone_neck, count_parameters, get_scale
from oracles import central_difference


@pytest.fixture(scope="module")
def nets():
    torch.manual_seed(0)
    b, n = build_backbone_neck(PROFILES["N"])
    return b.eval().double(), n.eval().double()


@pytest.mark.parametrize("size,expected", [(160, (20, 10, 5)), (64, (8, 4, 2))])
def test_backbone_strides(nets, size, expected):
    b, n = nets
    with torch.no_grad():
        cs = b(torch.rand(1, 3, size, size, dtype=torch.float64))
        fp = n(*cs)
    assert tuple(c.shape[-1] for c in cs) == expected
    assert tuple(p.shape[-1] for p in fp.maps()) == expected
    assert tuple(p.shape[1] for p in fp.maps()) == PROFILES["N"].neck_dims


def test_full_profile_640():
    torch.manual_seed(0)
    b = Backbone(PROFILES["full"]).eval()
    with torch.no_grad():
        cs = b(torch.zeros(1, 3, 640, 640))
    assert [c.shape[-1] for c in cs] == [80, 40, 20]
    assert sum(c.shape[-1] * c.shape[-2] for c in cs) == 8400


def test_zero_image_finite(nets):
    b, n = nets
    with torch.no_grad():
        fp = n(*b(torch.zeros(2, 3, 64, 64, dtype=torch.float64)))
    assert all(torch.isfinite(p).all() for p in fp.maps())


def test_indivisible_size_rejected(nets):
    with pytest.raises(ValueError, match="divisible"):
        nets[0](torch.zeros(1, 3, 100, 96, dtype=torch.float64))


def test_neck_channel_mismatch():
    n = Neck((32, 64, 128), (64, 128, 128))
    with pytest.raises(ValueError, match="channels"):
        n(torch.zeros(1, 16, 8, 8), torch.zeros(1, 64, 4, 4), torch.zeros(1, 128, 2, 2))


def test_neck_paths_are_live(nets):
    _, n = nets
    g = torch.Generator().manual_seed(1)
    c3 = torch.rand(1, 32, 8, 8, generator=g, dtype=torch.float64)
    c4 = torch.rand(1, 64, 4, 4, generator=g, dtype=torch.float64)
    c5 = torch.rand(1, 128, 2, 2, generator=g, dtype=torch.float64)
    with torch.no_grad():
        base = n(c3, c4, c5)
        top_down = n(c3, c4, c5 + 0.5)
        bottom_up = n(c3 + 0.5, c4, c5)
    assert (top_down.p3 - base.p3).abs().max() > 1e-6
    assert (bottom_up.p5 - base.p5).abs().max() > 1e-6


def test_backbone_gradient_matches_finite_difference(nets):
    b, n = nets
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

    def loss():
        fp = n(*b(x))
        return sum((p ** 2).mean() for p in fp.maps())

    b.zero_grad()
    loss().backward()
    params = [p for p in b.parameters() if p.dim() > 1]
    g = torch.Generator().manual_seed(3)
    for _ in range(10):
        p = params[int(torch.randint(len(params), (1,), generator=g))]
        i = int(torch.randint(p.numel(), (1,), generator=g))
        flat = p.data.view(-1)
        orig = flat[i].item()

        def f(v):
            flat[i] = v
            with torch.no_grad():
                return loss().item()

        num = central_difference(f, orig, 1e-5)
        flat[i] = orig
        ana = p.grad.view(-1)[i].item()
        assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana), 1e-6)


def test_parameter_count_snapshot():
    counts = {k: (count_parameters(b), count_parameters(n)) for k, (b, n) in
              ((k, build_backbone_neck(s)) for k, s in PROFILES.items())}
    assert counts == {"N": (317672, 545344), "L": (1266384, 2176128), "full": (1266384, 883904)}
    assert count_parameters(DEYO("N")) == 1325753
    # pure function of the scale
    assert count_parameters(DEYO("N")) == count_parameters(DEYO(ModelScale()))


def test_scale_validation():
    with pytest.raises(ValueError):
        ModelScale(hidden_dim=0)
    with pytest.raises(ValueError):
        ModelScale(decoder_layers=0)
    with pytest.raises(ValueError):
        ModelScale(neck_dims=(64, 0, 128))
    with pytest.raises(ValueError, match="unknown model scale"):
        get_scale("XL")
    s = PROFILES["full"]
    assert s.hidden_dim == 256 and s.decoder_layers == 6
    assert get_scale(s.to_dict()) == s
