"""Packing of ragged per-ray survivor sequences into dense [ray, time, channel] batches.

Two layouts are supported. Time-padding (TP) keeps every survivor at its
original slot along the ray: masked slots stay as zeros with occupancy 0,
so they still drive membrane leak, and the time axis spans the longest raw
sample count in the batch. Time-condensing (TCP) drops masked slots entirely
and left-justifies survivors, so the time axis only spans the longest
survivor count; rows can optionally be sorted by descending survivor count
(stable on the original ray index) without changing any per-ray output.

The scatter map (slot_ray, slot_time) lists, for each survivor in the flat
canonical order of MaskedSamples, the batch slot holding it; unpacking with
it undoes padding, permutation and flip in one gather.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .rays import MaskedSamples


class PackingMode(enum.Enum):
    TP = "tp"
    TCP = "tcp"


@dataclass
class PackedBatch:
    """Dense batch plus the bookkeeping needed to invert the packing."""

    data: np.ndarray  # [rays, t_len, channels]
    occupancy: np.ndarray  # [rays, t_len] bool
    ray_permutation: np.ndarray  # [rays] packed row -> original ray position
    slot_ray: np.ndarray  # [S] packed row per survivor (canonical order)
    slot_time: np.ndarray  # [S] packed time slot per survivor
    source_ray: np.ndarray  # [S] original ray index
    source_sample: np.ndarray  # [S] original sample index within the ray
    row_lengths: np.ndarray  # [rays] occupied span per row (raw for TP, survivors for TCP)
    mode: PackingMode
    flipped: bool = False

    @property
    def n_rays(self) -> int:
        return self.data.shape[0]

    @property
    def t_len(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def count(self) -> int:
        return self.slot_ray.shape[0]

    def validate(self) -> None:
        """Structural invariants; used by tests, not on hot paths."""
        occ = self.occupancy
        if occ.shape != self.data.shape[:2]:
            raise ValueError("occupancy shape mismatch")
        if int(occ.sum()) != self.count:
            raise ValueError("occupancy does not match survivor count")
        rebuilt = np.zeros_like(occ)
        rebuilt[self.slot_ray, self.slot_time] = True
        if not np.array_equal(rebuilt, occ):
            raise ValueError("scatter map is not a bijection onto occupied slots")
        if np.any(self.data[~occ] != 0.0):
            raise ValueError("unoccupied slots must hold zeros")
        if self.mode is PackingMode.TCP and not self.flipped:
            # survivors fill a prefix of each row
            lens = occ.sum(axis=1)
            k = np.arange(self.t_len)
            if not np.array_equal(occ, k[None, :] < lens[:, None]):
                raise ValueError("tcp rows must be occupied as a prefix")


def _scatter(masked: MaskedSamples, features: np.ndarray, slot_ray, slot_time, t_len, row_lengths, mode):
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] != masked.count:
        raise ValueError("features must be [survivors, channels]")
    n = masked.n_rays
    data = np.zeros((n, t_len, features.shape[1]), dtype=features.dtype)
    occ = np.zeros((n, t_len), dtype=bool)
    data[slot_ray, slot_time] = features
    occ[slot_ray, slot_time] = True
    return data, occ


def pack_tp(masked: MaskedSamples, features: np.ndarray) -> PackedBatch:
    """Time-padding layout: survivors stay at their raw sample slots."""
    t_len = int(masked.raw_counts.max()) if masked.n_rays else 0
    slot_ray = masked.ray_index
    slot_time = masked.sample_index
    data, occ = _scatter(masked, features, slot_ray, slot_time, t_len, masked.raw_counts, PackingMode.TP)
    return PackedBatch(
        data=data,
        occupancy=occ,
        ray_permutation=np.arange(masked.n_rays, dtype=np.int64),
        slot_ray=slot_ray.copy(),
        slot_time=slot_time.copy(),
        source_ray=masked.ray_index.copy(),
        source_sample=masked.sample_index.copy(),
        row_lengths=masked.raw_counts.copy(),
        mode=PackingMode.TP,
    )


def pack_tcp(masked: MaskedSamples, features: np.ndarray, sort: bool = False) -> PackedBatch:
    """Time-condensing layout: survivors left-justified, padded time removed."""
    counts = masked.counts_per_ray()
    t_len = int(counts.max()) if counts.size else 0
    if sort:
        order = np.lexsort((np.arange(masked.n_rays), -counts))
    else:
        order = np.arange(masked.n_rays, dtype=np.int64)
    slot_of_ray = np.empty(masked.n_rays, dtype=np.int64)
    slot_of_ray[order] = np.arange(masked.n_rays)
    slot_ray = slot_of_ray[masked.ray_index]
    # running index within each ray; survivors are ray-major so a global
    # cumulative count restarted per ray does it
    if masked.count:
        idx = np.arange(masked.count, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot_time = idx - starts[masked.ray_index]
    else:
        slot_time = np.zeros(0, dtype=np.int64)
    data, occ = _scatter(masked, features, slot_ray, slot_time, t_len, counts, PackingMode.TCP)
    return PackedBatch(
        data=data,
        occupancy=occ,
        ray_permutation=order,
        slot_ray=slot_ray,
        slot_time=slot_time,
        source_ray=masked.ray_index.copy(),
        source_sample=masked.sample_index.copy(),
        row_lengths=counts[order],
        mode=PackingMode.TCP,
    )


def temporal_flip(batch: PackedBatch) -> PackedBatch:
    """Reverse each ray's occupied sequence in place along time.

    TCP reverses the occupied prefix; TP reverses the whole raw slot span
    (masked zeros travel with it). Applying the flip twice restores the
    original batch bit for bit.
    """
    spans = batch.row_lengths[batch.slot_ray]
    new_time = spans - 1 - batch.slot_time
    if batch.count and new_time.min() < 0:
        raise ValueError("row_lengths inconsistent with slot_time")
    data = np.zeros_like(batch.data)
    occ = np.zeros_like(batch.occupancy)
    vals = batch.data[batch.slot_ray, batch.slot_time]
    data[batch.slot_ray, new_time] = vals
    occ[batch.slot_ray, new_time] = True
    return PackedBatch(
        data=data,
        occupancy=occ,
        ray_permutation=batch.ray_permutation.copy(),
        slot_ray=batch.slot_ray.copy(),
        slot_time=new_time,
        source_ray=batch.source_ray.copy(),
        source_sample=batch.source_sample.copy(),
        row_lengths=batch.row_lengths.copy(),
        mode=batch.mode,
        flipped=not batch.flipped,
    )


def unpack_scatter(outputs: np.ndarray, batch: PackedBatch) -> np.ndarray:
    """Gather per-survivor outputs back into canonical flat order: [S, C_out]."""
    outputs = np.asarray(outputs)
    if outputs.ndim != 3 or outputs.shape[:2] != batch.data.shape[:2]:
        raise ValueError("outputs shape does not match the packed batch")
    return outputs[batch.slot_ray, batch.slot_time]


@dataclass(frozen=True)
class PackStats:
    """Occupancy summary of one packed batch."""

    mode: str
    rays: int
    t_len: int
    valid_slots: int
    total_slots: int

    @property
    def density(self) -> float:
        return self.valid_slots / self.total_slots if self.total_slots else 0.0


def occupancy_stats(batch: PackedBatch) -> PackStats:
    return PackStats(
        mode=batch.mode.value,
        rays=batch.n_rays,
        t_len=batch.t_len,
        valid_slots=int(batch.occupancy.sum()),
        total_slots=int(batch.occupancy.size),
    )
