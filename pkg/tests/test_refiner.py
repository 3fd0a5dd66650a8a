import numpy as np
import pytest
import torch

from dmrsnet.grid import ChannelGrid, CsifFeatures
from dmrsnet.ops import init_parameters
from dmrsnet.refiner import RefineConfig, Refiner, RFBlock, refine_forward

from fdcheck import TOL, max_relative_error


def make(config=RefineConfig(), seed=0, double=False):
    model = Refiner(config)
    init_parameters(model, seed)
    return model.double() if double else model


class TestRFBlock:
    def test_spatial_preservation(self):
        blk = RFBlock(32, 64)
        init_parameters(blk, 0)
        assert blk(torch.randn(1, 32, 96, 16), torch.randn(1, 3)).shape == (1, 64, 96, 16)

    def test_zero_gate(self):
        blk = RFBlock(4, 6)
        init_parameters(blk, 1)
        with torch.no_grad():
            for p in blk.ca.parameters():
                p.zero_()
        x, c = torch.randn(2, 4, 8, 6), torch.randn(2, 3)
        conv_path = torch.relu(blk.conv2(torch.relu(blk.conv1(x))))
        torch.testing.assert_close(blk(x, c), 0.5 * conv_path, atol=0, rtol=0)

    def test_gradients(self):
        blk = RFBlock(3, 4).double()
        init_parameters(blk, 2)
        x, c = torch.randn(2, 3, 6, 4, dtype=torch.float64), torch.randn(2, 3, dtype=torch.float64)
        assert max_relative_error(lambda x, c, *p: blk(x, c), [x, c, *blk.parameters()], max_entries=15) < TOL


class TestRefiner:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            RefineConfig(time_pad=12)
        with pytest.raises(ValueError):
            RefineConfig(levels=5)

    def test_shape_and_scales(self):
        model = make(RefineConfig(ch=8))
        out = model(torch.randn(2, 96, 14, 2), torch.randn(2, 3))
        assert out.shape == (2, 96, 14, 2)
        assert model.trace == [(96, 16), (48, 8), (24, 4), (12, 2), (24, 4), (48, 8), (96, 16)]

    def test_channel_schedule(self):
        model = make()
        assert RefineConfig().channels() == [32, 64, 128, 256]
        assert model.bottleneck.conv1.out_channels == 256
        assert [b.conv2.out_channels for b in model.decoder] == [128, 64, 32]
        assert [b.conv1.in_channels for b in model.decoder] == [384, 192, 96]

    def test_zero_final_conv_is_identity(self):
        model = make(RefineConfig(ch=8), seed=1)
        with torch.no_grad():
            model.final.weight.zero_()
            model.final.bias.zero_()
        x = torch.randn(3, 96, 14, 2)
        assert torch.equal(model(x, torch.randn(3, 3)), x)

    def test_replicate_padding_time_constant(self):
        # a time-constant grid padded by replication equals a genuinely longer constant grid
        model = make(RefineConfig(ch=4), seed=2)
        col = torch.randn(1, 96, 1, 2)
        x = col.expand(1, 96, 14, 2).contiguous()
        c = torch.randn(1, 3)
        padded, left = model._pad(x.permute(0, 3, 1, 2))
        assert left == 1
        assert torch.equal(padded, col.expand(1, 96, 16, 2).permute(0, 3, 1, 2))

    def test_deterministic(self):
        model = make(RefineConfig(ch=4), seed=3)
        x, c = torch.randn(2, 96, 14, 2), torch.randn(2, 3)
        with torch.no_grad():
            assert torch.equal(model(x, c), model(x, c))

    def test_bottleneck_global_reach(self):
        model = make(RefineConfig(ch=2), seed=4, double=True)
        captured = {}
        model.bottleneck.register_forward_hook(lambda m, i, o: captured.__setitem__("b", o))
        x = torch.randn(1, 96, 14, 2, dtype=torch.float64, requires_grad=True)
        c = torch.randn(1, 3, dtype=torch.float64)
        model(x, c)
        b = captured["b"]
        assert b.shape[-2:] == (12, 2)
        # Jacobian row for one input pixel: gradient of every bottleneck position w.r.t. x[0, 0, 0, 0]
        reach = torch.zeros(12, 2)
        for i in range(12):
            for j in range(2):
                (g,) = torch.autograd.grad(b[0, :, i, j].sum(), x, retain_graph=True)
                reach[i, j] = g[0, 0, 0, 0].abs()
        assert torch.all(reach > 0)

    def test_typed_forward(self):
        model = make(RefineConfig(ch=4))
        rng = np.random.default_rng(0)
        g = ChannelGrid(rng.standard_normal((96, 14)), rng.standard_normal((96, 14)))
        assert isinstance(refine_forward(g, CsifFeatures(0.0, 1.0, 10.0), model), ChannelGrid)

    def test_full_network_gradients(self):
        # small grid keeps the number of relu switch points near each probe low
        model = make(RefineConfig(ch=2, n_freq=16, n_time=6, time_pad=8), seed=6, double=True)
        with torch.no_grad():
            for p in model.parameters():
                if p.dim() == 1:
                    p.normal_(0, 0.1)
        x = torch.randn(2, 16, 6, 2, dtype=torch.float64)
        c = torch.randn(2, 3, dtype=torch.float64)
        err = max_relative_error(lambda x, c, *p: model(x, c), [x, c, *model.parameters()], max_entries=4)
        assert err < TOL
