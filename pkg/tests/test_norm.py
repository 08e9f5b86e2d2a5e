import random

import pytest
import torch

from oracles import random_small_spec, two_pass_moments
from slimres.core import SlimmableNetwork, materialize_subnet
from slimres.errors import (
    CalibrationRequiredError,
    DegenerateBatchError,
    InsufficientDataError,
)
from slimres.norm import (
    BankEntry,
    BNStatsBank,
    SliceBatchNorm2d,
    StreamingMoments,
    calibrate,
)


class TestTrainModeNormalize:
    def test_constant_batch_zero_mean(self):
        bn = SliceBatchNorm2d(8)
        bn.train()
        x = torch.full((4, 8, 5, 5), 3.0)
        out = bn(x)
        # epsilon guards the zero variance; the 1/sqrt(eps) factor amplifies
        # rounding residue, so only near-zero is guaranteed
        assert torch.allclose(out, torch.zeros_like(out), atol=1e-3)
        assert abs(out.mean().item()) < 1e-3

    def test_mean_shift_std_scale(self):
        bn = SliceBatchNorm2d(8)
        bn.train()
        with torch.no_grad():
            bn.weight.fill_(2.5)
            bn.bias.fill_(-1.0)
        x = torch.randn(512, 8, 8, 8) * 3 + 4
        out = bn(x)
        assert torch.allclose(out.mean(dim=(0, 2, 3)), torch.full((8,), -1.0), atol=1e-3)
        assert torch.allclose(out.std(dim=(0, 2, 3)), torch.full((8,), 2.5), atol=1e-2)

    def test_degenerate_batch_rejected(self):
        bn = SliceBatchNorm2d(8)
        bn.train()
        with pytest.raises(DegenerateBatchError):
            bn(torch.randn(1, 8, 4, 4))

    def test_shared_scale_shift_slices(self, tiny_spec):
        # an update through the wide view must move the slice the narrow view reads
        spec = tiny_spec()
        net = SlimmableNetwork(spec)
        net.train()
        opt = torch.optim.SGD(net.parameters(), lr=0.5)
        narrow_c = spec.channels_at(0.4)
        first_bn = net.norm_layers[0]
        c_narrow = [c for l, (i, c) in zip(spec.layers, narrow_c) if l.kind == "normalization"][0]
        before = first_bn.weight[:c_narrow].clone()
        out = net(torch.randn(4, 3, 16, 16), width=0.8)
        (out.square().mean() * 1e6).backward()
        opt.step()
        after = first_bn.weight[:c_narrow]
        assert not torch.equal(before, after)


class TestStreamingMoments:
    def test_matches_two_pass_exactly(self):
        torch.manual_seed(0)
        acc = StreamingMoments(6)
        chunks = [torch.randn(3, 6, 4, 4) * (i + 1) + i for i in range(7)]
        for c in chunks:
            acc.update(c)
        mean, var = acc.moments()
        flat = torch.cat([c.to(torch.float64).permute(1, 0, 2, 3).reshape(6, -1) for c in chunks], 1)
        assert torch.allclose(mean, flat.mean(1), rtol=1e-12, atol=1e-12)
        assert torch.allclose(var, flat.var(1, unbiased=False), rtol=1e-10, atol=1e-12)

    def test_empty_refused(self):
        with pytest.raises(InsufficientDataError):
            StreamingMoments(4).moments()


class TestCalibrate:
    def _net_and_config(self, seed=0, width=0.5, res=12):
        rng = random.Random(seed)
        spec = random_small_spec(rng)
        torch.manual_seed(seed)
        net = SlimmableNetwork(spec)
        return net, spec.config(width, res)

    def test_streaming_equals_two_pass(self):
        net, config = self._net_and_config()
        view = materialize_subnet(net, config.width)
        torch.manual_seed(1)
        batches = [torch.randn(16, 3, 12, 12) for _ in range(4)]
        entry = calibrate(view, config, iter(batches), budget=64)
        means, variances = two_pass_moments(view, config.resolution, batches)
        for got_m, got_v, exp_m, exp_v in zip(entry.means, entry.variances, means, variances):
            assert torch.allclose(got_m, exp_m, rtol=1e-6, atol=1e-9)
            assert torch.allclose(got_v, exp_v, rtol=1e-6, atol=1e-9)

    def test_identical_images_zero_variance(self):
        # 1x1 kernels keep a constant image constant everywhere, so the only
        # possible variance would come from the stream itself
        from slimres.core import LayerSpec, SlimmableModelSpec

        layers = (
            LayerSpec("convolution", 3, 16, kernel=1),
            LayerSpec("normalization", 16, 16),
            LayerSpec("activation", 16, 16),
            LayerSpec("convolution", 16, 16, kernel=1),
            LayerSpec("normalization", 16, 16),
            LayerSpec("pooling", 16, 16),
            LayerSpec("fully-connected", 16, 5),
        )
        spec = SlimmableModelSpec(layers, 0.25, 8, 5, 3, (12,))
        net = SlimmableNetwork(spec)
        config = spec.config(0.5, 12)
        view = materialize_subnet(net, 0.5)
        image = torch.ones(8, 3, 12, 12) * torch.tensor([0.2, 0.5, -0.3]).view(1, 3, 1, 1)
        entry = calibrate(view, config, iter([image, image]), budget=16)
        for v in entry.variances:
            assert torch.all(v < 1e-9)

    def test_repeated_batches_add_no_variance(self):
        # streaming the same batch twice must reproduce the one-batch moments
        net, config = self._net_and_config()
        view = materialize_subnet(net, config.width)
        batch = torch.randn(8, 3, 12, 12)
        once = calibrate(view, config, iter([batch]), budget=8)
        twice = calibrate(view, config, iter([batch, batch]), budget=16)
        for a, b in zip(once.variances, twice.variances):
            assert torch.allclose(a, b, rtol=1e-9, atol=1e-12)

    def test_budget_consumed_exactly(self):
        net, config = self._net_and_config()
        view = materialize_subnet(net, config.width)
        batches = (torch.randn(13, 3, 12, 12) for _ in range(10))
        entry = calibrate(view, config, batches, budget=30)
        assert entry.sample_count == 30

    def test_default_budget_is_2000(self):
        from slimres.norm import DEFAULT_CALIBRATION_BUDGET

        assert DEFAULT_CALIBRATION_BUDGET == 2000
        assert BNStatsBank().calibration_sample_budget == 2000

    def test_empty_stream_refused(self):
        net, config = self._net_and_config()
        view = materialize_subnet(net, config.width)
        with pytest.raises(InsufficientDataError):
            calibrate(view, config, iter([]), budget=8)

    def test_idempotent_for_fixed_order(self):
        net, config = self._net_and_config()
        view = materialize_subnet(net, config.width)
        torch.manual_seed(3)
        batches = [torch.randn(8, 3, 12, 12) for _ in range(3)]
        e1 = calibrate(view, config, iter(batches), budget=24)
        e2 = calibrate(view, config, iter(batches), budget=24)
        for a, b in zip(e1.means + e1.variances, e2.means + e2.variances):
            assert torch.equal(a, b)

    def test_weights_untouched(self):
        net, config = self._net_and_config()
        before = [p.clone() for p in net.parameters()]
        view = materialize_subnet(net, config.width)
        calibrate(view, config, iter([torch.randn(8, 3, 12, 12)]), budget=8)
        for a, b in zip(before, net.parameters()):
            assert torch.equal(a, b)

    def test_dimensions_match_sliced_channels(self):
        for seed in range(4):
            net, _ = self._net_and_config(seed=seed)
            for width in (0.25, 0.55, 1.0):
                config = net.spec.config(width, 8)
                view = materialize_subnet(net, width)
                entry = calibrate(view, config, iter([torch.randn(8, 3, 8, 8)]), budget=8)
                expected = [
                    out
                    for layer, (_, out) in zip(net.spec.layers, net.spec.channels_at(width))
                    if layer.kind == "normalization"
                ]
                assert entry.channel_counts() == expected


class TestEvalModeNormalize:
    def test_missing_config_rejected(self, tiny_spec):
        bank = BNStatsBank()
        spec = tiny_spec()
        with pytest.raises(CalibrationRequiredError):
            bank.get(spec.config(0.5, 12))

    def test_wrong_config_stats_rejected(self, tiny_spec):
        # statistics calibrated for width 1.0 cannot serve the 0.5 view
        spec = tiny_spec()
        net = SlimmableNetwork(spec)
        full = spec.config(1.0, 16)
        entry = calibrate(
            materialize_subnet(net, 1.0), full,
            iter([torch.randn(8, 3, 16, 16)]), budget=8,
        )
        net.eval()
        with pytest.raises(ValueError):
            net(torch.randn(2, 3, 16, 16), width=0.5, norm_stats=entry.stats())

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            BankEntry(
                means=[torch.zeros(4)],
                variances=[torch.tensor([0.1, -0.2, 0.3, 0.4])],
                sample_count=5,
            )

    def test_post_stats_beats_batch_stats_of_one(self, tiny_spec):
        # desk-scale comparison: calibrated statistics vs normalizing every
        # held-out sample by itself
        import random

        from slimres.planner import evaluate_top1
        from slimres.trainer import TrainSchedule, run_training

        spec = tiny_spec(num_classes=4)

        class _Data(torch.utils.data.Dataset):
            def __init__(self, seed):
                g = torch.Generator().manual_seed(seed)
                n = 96
                self.y = torch.arange(n) % 4
                centers = torch.randn(4, 3, 1, 1, generator=g) * 1.5
                self.x = centers[self.y] + 0.6 * torch.randn(n, 3, 16, 16, generator=g)

            def __len__(self):
                return len(self.y)

            def __getitem__(self, i):
                return self.x[i], int(self.y[i])

        train, held_out = _Data(0), _Data(1)
        net, _ = run_training(
            "mutualnet", spec, train,
            TrainSchedule(epochs=4, batch_size=16, lr=0.05), seed=0,
        )
        config = spec.config(1.0, 16)
        entry = calibrate(
            materialize_subnet(net, 1.0), config,
            iter([train.x[i : i + 16] for i in range(0, 96, 16)]), budget=96,
        )
        bank = BNStatsBank()
        bank.put(config, entry)
        one_by_one = [(held_out.x[i : i + 1], held_out.y[i : i + 1]) for i in range(96)]
        batched = [(held_out.x[i : i + 16], held_out.y[i : i + 16]) for i in range(0, 96, 16)]
        calibrated = evaluate_top1(net, config, bank, batched)
        per_sample_stats = evaluate_top1(net, config, bank, one_by_one, use_batch_stats=True)
        assert calibrated >= per_sample_stats

    def test_bank_round_trip(self, tiny_spec):
        spec = tiny_spec()
        net = SlimmableNetwork(spec)
        bank = BNStatsBank(calibration_sample_budget=32)
        config = spec.config(0.75, 12)
        entry = calibrate(
            materialize_subnet(net, 0.75), config,
            iter([torch.randn(8, 3, 12, 12)] * 4), budget=32,
        )
        bank.put(config, entry)
        restored = BNStatsBank.from_state_dict(bank.state_dict())
        assert restored.calibration_sample_budget == 32
        got = restored.get(config)
        for a, b in zip(got.means, entry.means):
            assert torch.equal(a, b)
        assert config in restored
