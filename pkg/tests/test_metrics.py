import json

import numpy as np
import pytest

from spikefield.metrics import (
    EnergyModel,
    EnergyReport,
    LayerOps,
    OpCount,
    count_ops_ann,
    count_ops_snn,
    estimate_energy,
    measure_spike_rate,
    mse,
    psnr,
    ssim,
)
from spikefield.snn import LifConfig, SurrogateConfig, build_mlp, smlp_forward


def test_mse_and_psnr_frozen_values():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    assert mse(a, b) == pytest.approx(0.01)
    assert psnr(a, b) == pytest.approx(20.0)  # 10 log10(1 / 0.01)
    assert psnr(a, a) == 99.0  # identical images hit the cap
    assert psnr(a, b, cap=15.0) == 15.0


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 2)))


def test_ssim_identical_and_constant_images():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (16, 16, 3))
    assert ssim(img, img) == pytest.approx(1.0)
    a = np.full((16, 16), 0.4)
    b = np.full((16, 16), 0.6)
    # zero-variance pair: luminance term only
    expected = (2 * 0.4 * 0.6 + 0.01**2) / (0.4**2 + 0.6**2 + 0.01**2)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-9)


def test_ssim_penalizes_noise_more_than_shift():
    rng = np.random.default_rng(1)
    img = rng.uniform(0.2, 0.8, (24, 24))
    noisy = np.clip(img + rng.normal(0, 0.2, img.shape), 0, 1)
    shifted = np.clip(img + 0.05, 0, 1)
    assert ssim(img, shifted) > ssim(img, noisy)


def test_ssim_rejects_tiny_images():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_energy_frozen_hand_values():
    model = EnergyModel()  # 4.6 pJ per MAC, 0.9 pJ per AC
    count = OpCount(layers=[LayerOps(name="l0", in_width=1, out_width=1,
                                     macs=100, synapse_acs=600, bias_acs=400)])
    assert count.macs == 100 and count.acs == 1000
    assert estimate_energy(count, model) == pytest.approx(1360.0)  # 460 + 900


def test_ann_counts_match_hand_arithmetic():
    # 64 -> 64 -> 3 over 10 samples: (64*64 + 64*3) * 10 = 42,880 MACs, no biases.
    rng = np.random.default_rng(5)
    mlp = build_mlp(64, (64,), rng, lif=LifConfig(), surrogate=SurrogateConfig(), out_width=3)
    count = count_ops_ann(mlp, 10)
    assert count.macs == 42880
    assert count.acs == 0
    assert [l.macs for l in count.layers] == [40960, 1920]


def test_snn_counts_zero_spikes_and_rate_one():
    rng = np.random.default_rng(6)
    mlp = build_mlp(5, (4, 4), rng, lif=LifConfig(), surrogate=SurrogateConfig(), out_width=2)
    # silent net: big negative biases keep every neuron under threshold
    for layer in mlp.layers[:-1]:
        layer.weight[...] = 0.0
        layer.bias[...] = -5.0
    x = np.zeros((3, 4, 5))
    occ = np.ones((3, 4), dtype=bool)
    tape = smlp_forward(mlp, x, occ)
    count = count_ops_snn(mlp, tape)
    slots = 12
    assert count.layers[0].macs == 5 * 4 * slots  # first layer always multiplies
    assert all(l.synapse_acs == 0 for l in count.layers[1:])
    assert [l.bias_acs for l in count.layers] == [4 * slots, 4 * slots, 2 * slots]
    # saturated net: every hidden neuron fires on every slot
    for layer in mlp.layers[:-1]:
        layer.bias[...] = 50.0
    tape = smlp_forward(mlp, x, occ)
    count = count_ops_snn(mlp, tape)
    ann = count_ops_ann(mlp, slots)
    # at rate 1 the synaptic ACs equal the dense MAC counts layer by layer
    for snn_l, ann_l in zip(count.layers[1:], ann.layers[1:]):
        assert snn_l.synapse_acs == ann_l.macs


def test_snn_counts_scale_with_occupancy():
    rng = np.random.default_rng(7)
    mlp = build_mlp(3, (4,), rng, lif=LifConfig(), surrogate=SurrogateConfig(), out_width=2)
    x = rng.uniform(0, 2, (2, 5, 3))
    occ = np.zeros((2, 5), dtype=bool)
    occ[0, :3] = True
    tape = smlp_forward(mlp, x, occ)
    count = count_ops_snn(mlp, tape)
    assert count.occupied_slots == 3
    assert count.layers[0].macs == 3 * 4 * 3
    # spikes on unoccupied slots must not be charged
    hand = int(tape.spikes[0][occ].sum())
    assert count.layers[1].synapse_acs == hand * 2


def test_measure_spike_rate_empty_flag():
    spikes = np.zeros((2, 3, 4))
    rates, occupied = measure_spike_rate([spikes], np.zeros((2, 3), dtype=bool))
    assert rates == [0.0]
    assert occupied == 0


def test_energy_report_serialization():
    model = EnergyModel()
    snn = OpCount(layers=[LayerOps(name="l0", in_width=2, out_width=3,
                                   macs=60, synapse_acs=0, bias_acs=30, slots=10)],
                  occupied_slots=10)
    ann = OpCount(layers=[LayerOps(name="l0", in_width=2, out_width=3, macs=60)],
                  occupied_slots=10)
    report = EnergyReport(model=model, snn=snn, ann=ann, spike_rates=[0.25])
    d = json.loads(report.to_json())
    assert d["snn"]["energy_pj"] == pytest.approx(60 * 4.6 + 30 * 0.9)
    assert d["snn"]["energy_mj"] == pytest.approx(d["snn"]["energy_pj"] * 1e-9)
    assert d["ratio"] == pytest.approx(d["snn"]["energy_pj"] / d["ann"]["energy_pj"])
    assert d["spike_rates"] == [0.25]
    assert d["e_mac_pj"] == 4.6
    assert d["e_ac_pj"] == 0.9


def test_energy_report_zero_baseline_stays_valid_json():
    # nothing survived the mask: no ops on either path, ratio undefined
    empty = OpCount(layers=[LayerOps(name="l0", in_width=2, out_width=3)])
    report = EnergyReport(model=EnergyModel(), snn=empty, ann=empty)
    d = json.loads(report.to_json())
    assert d["ratio"] is None
    assert d["snn"]["energy_pj"] == 0.0


def test_opcount_merge():
    a = OpCount(layers=[LayerOps(name="l0", in_width=2, out_width=2, macs=10,
                                 synapse_acs=5, bias_acs=2, spikes_in=3, slots=4)],
                occupied_slots=4)
    b = OpCount(layers=[LayerOps(name="l0", in_width=2, out_width=2, macs=20,
                                 synapse_acs=15, bias_acs=4, spikes_in=7, slots=8)],
                occupied_slots=8)
    merged = a.merge(b)
    assert merged.layers[0].macs == 30
    assert merged.layers[0].spikes_in == 10
    assert merged.occupied_slots == 12
    with pytest.raises(ValueError):
        a.merge(OpCount(layers=[]))


def test_energy_model_validation():
    with pytest.raises(ValueError):
        EnergyModel(e_mac_pj=-1.0)
