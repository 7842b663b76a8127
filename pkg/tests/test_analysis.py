from fractions import Fraction

import numpy as np
import pytest

from sthnet.analysis import (
    attention_stats_csv,
    cost_report,
    count_flops,
    count_params,
    export_attention_stats,
    sweep_proportions,
)
from sthnet.convops import MacCounter
from sthnet.datasynth import LoadedDataset
from sthnet.errors import ShapeError, UnsupportedConfigError
from sthnet.network import NetworkConfig, build_sth_network, checkpoint_scalar_count
from sthnet.tensor import random_uniform

FULL = dict(num_class=174, frames=8, input_hw=224)

PUBLISHED_PARAMS_M = {Fraction(0): 24.4, Fraction(1, 8): 23.1, Fraction(1, 4): 22.0, Fraction(1, 2): 20.3}
PUBLISHED_GFLOPS = {Fraction(0): 33.3, Fraction(1, 8): 32.2, Fraction(1, 4): 30.5, Fraction(1, 2): 28.5}

# Frozen analytic values of this implementation (regression guard).
EXPECTED_PARAMS = {Fraction(0): 23_917_678, Fraction(1, 8): 22_974_574,
                   Fraction(1, 4): 22_031_470, Fraction(1, 2): 20_145_262}
EXPECTED_MACS = {Fraction(0): 32_699_940_864, Fraction(1, 8): 31_466_815_488,
                 Fraction(1, 4): 30_233_690_112, Fraction(1, 2): 27_767_439_360}
EXPECTED_PARAMS_ATTN_Q = 22_983_070


class TestPublishedTables:
    @pytest.mark.parametrize("p", list(PUBLISHED_PARAMS_M))
    def test_param_totals_within_two_percent(self, p):
        report = count_params(NetworkConfig(p=p, **FULL))
        assert report.total_params == EXPECTED_PARAMS[p]
        target = PUBLISHED_PARAMS_M[p] * 1e6
        assert abs(report.total_params - target) / target <= 0.02

    @pytest.mark.parametrize("p", list(PUBLISHED_GFLOPS))
    def test_mac_totals_within_three_percent(self, p):
        report = count_flops(NetworkConfig(p=p, **FULL))
        assert report.total_macs == EXPECTED_MACS[p]
        target = PUBLISHED_GFLOPS[p] * 1e9
        assert abs(report.total_macs - target) / target <= 0.03

    def test_attention_adds_published_overhead(self):
        report = count_params(NetworkConfig(p=Fraction(1, 4), attention=True, **FULL))
        assert report.total_params == EXPECTED_PARAMS_ATTN_Q
        assert abs(report.total_params - 23.2e6) / 23.2e6 <= 0.02

    def test_monotone_decreasing_in_p(self):
        cfg = NetworkConfig(p=0, **FULL)
        rows = sweep_proportions(cfg, [0, Fraction(1, 8), Fraction(1, 4), Fraction(1, 2)])
        params = [r["params"] for r in rows]
        macs = [r["macs"] for r in rows]
        assert params == sorted(params, reverse=True) and len(set(params)) == len(params)
        assert macs == sorted(macs, reverse=True) and len(set(macs)) == len(macs)

    def test_factorized_baseline_reference_points(self):
        # Replacing each hybrid core by spatial+temporal towers (12 taps per
        # channel pair instead of 9) should land near the published 27.6 M /
        # 37.9 G of the factorized variants: reconstructed here from the
        # p = 0 report plus the analytic 3-tap-per-pair increment.
        base = count_params(NetworkConfig(p=0, **FULL))
        widths = {64: 3, 128: 4, 256: 6, 512: 3}
        extra_params = sum(3 * w * w * n for w, n in widths.items())
        assert abs((base.total_params + extra_params) - 27.6e6) / 27.6e6 <= 0.02
        flops = count_flops(NetworkConfig(p=0, **FULL))
        sth_macs = flops.macs_of_kind("sth")
        assert abs((flops.total_macs + sth_macs / 3) - 37.9e9) / 37.9e9 <= 0.03


class TestCheckpointAgreement:
    @pytest.mark.parametrize("kw", [
        dict(p=Fraction(1, 4)),
        dict(p=0),
        dict(p=Fraction(1, 2), attention=True),
        dict(p=Fraction(1, 4), variant="merge"),
    ])
    def test_count_equals_checkpoint_scalars(self, kw):
        cfg = NetworkConfig(num_class=5, frames=4, input_hw=28, scale_factor=16, **kw)
        net = build_sth_network(cfg, seed=1)
        assert count_params(net).total_params == checkpoint_scalar_count(net)


class TestMacCounterAgreement:
    @pytest.mark.parametrize("attention", [False, True])
    def test_conv_macs_equal_instrumented_naive_forward(self, attention):
        cfg = NetworkConfig(num_class=3, frames=2, input_hw=16, scale_factor=16,
                            p=Fraction(1, 4), attention=attention)
        net = build_sth_network(cfg, seed=2)
        counter = MacCounter()
        clip = random_uniform((1, 3, 2, 16, 16), seed=3)
        net.forward_counted(clip, counter)
        report = count_flops(cfg)
        assert counter.count == report.macs_of_kind("conv", "sth")

    def test_single_conv_mac_formula(self):
        # One 3x3 spatial conv, 4->4 channels, T=2, 4x4 output: 4*4*2*16*9.
        from sthnet.convops import conv3d_naive, spatial_spec

        x = random_uniform((1, 4, 2, 4, 4), seed=4)
        w = random_uniform((4, 4, 1, 3, 3), seed=5)
        counter = MacCounter()
        conv3d_naive(x, w, spatial_spec(3), counter=counter)
        assert counter.count == 4 * 4 * 2 * 16 * 9


class TestReportOutput:
    def test_text_and_csv_shapes(self):
        report = cost_report(NetworkConfig(num_class=4, frames=4, input_hw=28, scale_factor=16))
        text = report.to_text()
        assert "param_convention" in text
        assert "TOTAL" in text
        csv = report.to_csv()
        assert csv.splitlines()[0] == "layer,params,macs"
        assert csv.splitlines()[-1].startswith("TOTAL,")

    def test_flops_input_shape_validated(self):
        cfg = NetworkConfig(num_class=4, frames=4, input_hw=28, scale_factor=16)
        with pytest.raises(ShapeError):
            count_flops(cfg, input_shape=(3, 8, 224, 224))


class TestAttentionStats:
    def _dataset(self, n=6, frames=6, res=28):
        videos = [random_uniform((3, frames, res, res), seed=10 + i).astype(np.float32)
                  for i in range(n)]
        labels = np.arange(n) % 4
        return LoadedDataset(videos, labels, np.zeros(3), 4, frames)

    def test_untrained_heads_give_exact_half(self):
        cfg = NetworkConfig(num_class=4, frames=4, input_hw=28, scale_factor=16, attention=True)
        net = build_sth_network(cfg, seed=6)
        rows = export_attention_stats(net, self._dataset(), frames=4)
        assert len(rows) == 16
        for r in rows:
            assert r["alpha_s"] == pytest.approx(0.5, abs=0)
            assert r["alpha_t"] == pytest.approx(0.5, abs=0)

    def test_rows_sum_to_one_after_training_like_perturbation(self):
        cfg = NetworkConfig(num_class=4, frames=4, input_hw=28, scale_factor=16, attention=True)
        net = build_sth_network(cfg, seed=7)
        for _, layer in net.iter_sth_layers():
            attn = layer.attention
            attn.head_t_w.value[...] = random_uniform(attn.head_t_w.value.shape,
                                                      seed=hash(attn.name) % 999, lo=-1, hi=1)
        rows = export_attention_stats(net, self._dataset(), frames=4)
        for r in rows:
            assert r["alpha_s"] + r["alpha_t"] == pytest.approx(1.0, abs=1e-12)
        # With randomized heads at least some layers move off equal weighting
        # (single-unit reductions may stay rectifier-dead, so not all must).
        assert any(abs(r["alpha_t"] - 0.5) > 1e-6 for r in rows)

    def test_requires_attention(self):
        cfg = NetworkConfig(num_class=4, frames=4, input_hw=28, scale_factor=16, attention=False)
        net = build_sth_network(cfg, seed=8)
        with pytest.raises(UnsupportedConfigError):
            export_attention_stats(net, self._dataset(), frames=4)

    def test_csv_format(self):
        rows = [{"layer_index": 0, "layer": "conv2_1", "alpha_s": 0.5, "alpha_t": 0.5}]
        csv = attention_stats_csv(rows)
        assert csv.splitlines()[0] == "layer,alpha_s,alpha_t"
        assert csv.splitlines()[1].startswith("conv2_1,0.5")
