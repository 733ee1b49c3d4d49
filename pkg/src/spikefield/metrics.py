"""Operation counting, energy estimates, and image quality metrics.

The energy model separates multiply-accumulates from plain accumulates.
A spiking forward pass pays full MACs only in the first layer (real-valued
inputs); every later synapse fires an AC per incoming spike, plus one AC per
bias add per occupied slot. The dense counterpart pays one MAC per synapse
per queried sample, biases excluded, matching the usual convention for this
kind of estimate. Unoccupied batch slots count nothing anywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .snn import SpikingMlp, SmlpTape


@dataclass(frozen=True)
class EnergyModel:
    """Per-op energy in picojoules (45 nm process convention by default)."""

    e_mac_pj: float = 4.6
    e_ac_pj: float = 0.9
    include_grid_ops: bool = False

    def __post_init__(self):
        if self.e_mac_pj <= 0 or self.e_ac_pj <= 0:
            raise ValueError("per-op energies must be positive")


@dataclass
class LayerOps:
    """Op counts of one synaptic layer."""

    name: str
    in_width: int
    out_width: int
    macs: int = 0
    synapse_acs: int = 0
    bias_acs: int = 0
    spikes_in: int = 0
    slots: int = 0

    @property
    def acs(self) -> int:
        return self.synapse_acs + self.bias_acs

    @property
    def input_rate(self) -> float:
        """Mean spikes per input neuron per occupied slot."""
        denom = self.in_width * self.slots
        return self.spikes_in / denom if denom else 0.0


@dataclass
class OpCount:
    """Totals plus a per-layer breakdown; merge accumulates across chunks."""

    layers: list
    occupied_slots: int = 0
    grid_macs: int = 0

    @property
    def macs(self) -> int:
        return self.grid_macs + sum(l.macs for l in self.layers)

    @property
    def acs(self) -> int:
        return sum(l.acs for l in self.layers)

    def merge(self, other: "OpCount") -> "OpCount":
        if len(self.layers) != len(other.layers):
            raise ValueError("cannot merge op counts of different topologies")
        for a, b in zip(self.layers, other.layers):
            if (a.in_width, a.out_width) != (b.in_width, b.out_width):
                raise ValueError("cannot merge op counts of different topologies")
            a.macs += b.macs
            a.synapse_acs += b.synapse_acs
            a.bias_acs += b.bias_acs
            a.spikes_in += b.spikes_in
            a.slots += b.slots
        self.occupied_slots += other.occupied_slots
        self.grid_macs += other.grid_macs
        return self


def measure_spike_rate(spikes: list, occupancy: np.ndarray | None):
    """Firing rate per hidden layer over occupied slots.

    Returns (rates, occupied_slots); with zero occupied slots every rate is
    reported as 0.0 and the count flags the situation.
    """
    rates = []
    occ_n = None
    for s in spikes:
        s = np.asarray(s)
        if occupancy is None:
            fired = float(s.sum())
            slots = s.shape[0] * s.shape[1]
        else:
            occ = np.asarray(occupancy, dtype=bool)
            if occ.shape != s.shape[:2]:
                raise ValueError("occupancy shape does not match spike trains")
            fired = float(s[occ].sum())
            slots = int(occ.sum())
        occ_n = slots
        rates.append(fired / (slots * s.shape[2]) if slots else 0.0)
    return rates, (occ_n or 0)


def count_ops_snn(mlp: SpikingMlp, tape: SmlpTape) -> OpCount:
    """Count spiking-mode ops of one recorded forward pass.

    Occupied slots come from the tape's occupancy (all slots when absent).
    """
    occ = tape.occupancy
    if occ is None:
        occ = np.ones(tape.inputs.shape[:2], dtype=bool)
    slots = int(occ.sum())
    layers = []
    for li, layer in enumerate(mlp.layers):
        ops = LayerOps(
            name=f"layer{li}", in_width=layer.in_width, out_width=layer.out_width, slots=slots
        )
        if li == 0:
            ops.macs = layer.in_width * layer.out_width * slots
            ops.spikes_in = 0
        else:
            spikes_in = int(np.asarray(tape.spikes[li - 1])[occ].sum())
            ops.spikes_in = spikes_in
            ops.synapse_acs = spikes_in * layer.out_width
        ops.bias_acs = layer.out_width * slots
        layers.append(ops)
    return OpCount(layers=layers, occupied_slots=slots)


def count_ops_ann(mlp: SpikingMlp, n_samples: int) -> OpCount:
    """Dense counterpart: every synapse pays one MAC per queried sample."""
    if n_samples < 0:
        raise ValueError("sample count must be non-negative")
    layers = []
    for li, layer in enumerate(mlp.layers):
        layers.append(
            LayerOps(
                name=f"layer{li}",
                in_width=layer.in_width,
                out_width=layer.out_width,
                macs=layer.in_width * layer.out_width * n_samples,
                slots=n_samples,
            )
        )
    return OpCount(layers=layers, occupied_slots=n_samples)


def estimate_energy(counts: OpCount, model: EnergyModel) -> float:
    """Total energy in picojoules."""
    return counts.macs * model.e_mac_pj + counts.acs * model.e_ac_pj


@dataclass
class EnergyReport:
    """Side-by-side energy estimate of the spiking and dense paths."""

    model: EnergyModel
    snn: OpCount
    ann: OpCount
    spike_rates: list = field(default_factory=list)

    @property
    def snn_pj(self) -> float:
        return estimate_energy(self.snn, self.model)

    @property
    def ann_pj(self) -> float:
        return estimate_energy(self.ann, self.model)

    @property
    def ratio(self) -> float:
        return self.snn_pj / self.ann_pj if self.ann_pj else float("inf")

    def to_dict(self) -> dict:
        def layer_rows(count: OpCount):
            return [
                {
                    "name": l.name,
                    "in_width": l.in_width,
                    "out_width": l.out_width,
                    "macs": l.macs,
                    "synapse_acs": l.synapse_acs,
                    "bias_acs": l.bias_acs,
                    "spikes_in": l.spikes_in,
                    "slots": l.slots,
                }
                for l in count.layers
            ]

        return {
            "e_mac_pj": self.model.e_mac_pj,
            "e_ac_pj": self.model.e_ac_pj,
            "include_grid_ops": self.model.include_grid_ops,
            "snn": {
                "macs": self.snn.macs,
                "acs": self.snn.acs,
                "grid_macs": self.snn.grid_macs,
                "occupied_slots": self.snn.occupied_slots,
                "layers": layer_rows(self.snn),
                "energy_pj": self.snn_pj,
                "energy_mj": self.snn_pj * 1e-9,
            },
            "ann": {
                "macs": self.ann.macs,
                "acs": self.ann.acs,
                "grid_macs": self.ann.grid_macs,
                "occupied_slots": self.ann.occupied_slots,
                "layers": layer_rows(self.ann),
                "energy_pj": self.ann_pj,
                "energy_mj": self.ann_pj * 1e-9,
            },
            "spike_rates": list(self.spike_rates),
            # a zero-op dense baseline has no meaningful ratio; keep the json strict
            "ratio": self.ratio if math.isfinite(self.ratio) else None,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, allow_nan=False)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped for identical inputs."""
    err = mse(a, b)
    if err <= 0.0:
        return cap
    return float(min(cap, 10.0 * np.log10(1.0 / err)))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with an outer-product kernel."""
    size = kernel.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, size, axis=0)
    rows = rows @ kernel
    cols = np.lib.stride_tricks.sliding_window_view(rows, size, axis=1)
    return cols @ kernel


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity, Gaussian-weighted windows, per channel.

    Uses C1 = 0.01^2 and C2 = 0.03^2 on a unit dynamic range; images smaller
    than the window are rejected.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ValueError("expected [H, W] or [H, W, C] images")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError("image smaller than the ssim window")
    c1 = 0.01**2
    c2 = 0.03**2
    kernel = _gaussian_kernel(window, sigma)
    scores = []
    for ch in range(a.shape[2]):
        x = a[..., ch]
        y = b[..., ch]
        mu_x = _windowed_mean(x, kernel)
        mu_y = _windowed_mean(y, kernel)
        xx = _windowed_mean(x * x, kernel) - mu_x**2
        yy = _windowed_mean(y * y, kernel) - mu_y**2
        xy = _windowed_mean(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
