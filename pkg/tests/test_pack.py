import numpy as np
import pytest

from spikefield.pack import (
    PackingMode,
    occupancy_stats,
    pack_tcp,
    pack_tp,
    temporal_flip,
    unpack_scatter,
)
from spikefield.rays import MaskedSamples


def masked_fixture(ray_index, sample_index, raw_counts, n_rays=None, channels=2, seed=0):
    ray_index = np.asarray(ray_index, dtype=np.int64)
    sample_index = np.asarray(sample_index, dtype=np.int64)
    n_rays = int(ray_index.max()) + 1 if n_rays is None else n_rays
    rng = np.random.default_rng(seed)
    s = ray_index.shape[0]
    masked = MaskedSamples(
        n_rays=n_rays,
        ray_index=ray_index,
        sample_index=sample_index,
        positions=rng.normal(size=(s, 3)),
        alphas=rng.uniform(0.1, 0.9, s),
        trans=rng.uniform(0.1, 1.0, s),
        raw_counts=np.asarray(raw_counts, dtype=np.int64),
    )
    features = rng.normal(size=(s, channels))
    return masked, features


def test_occupancy_example_two_rays():
    # Two rays of four raw samples; survivors {0,2,3} and {1}. Padding keeps
    # original slots (4 valid of 8), condensing left-packs them (4 of 6).
    masked, features = masked_fixture(
        ray_index=[0, 0, 0, 1], sample_index=[0, 2, 3, 1], raw_counts=[4, 4]
    )
    tp = pack_tp(masked, features)
    tcp = pack_tcp(masked, features)
    assert (tp.t_len, tp.count, tp.data.shape[0] * tp.t_len) == (4, 4, 8)
    assert (tcp.t_len, tcp.count, tcp.data.shape[0] * tcp.t_len) == (3, 4, 6)
    assert occupancy_stats(tp).density == pytest.approx(0.5)
    assert occupancy_stats(tcp).density == pytest.approx(4 / 6)


def test_tp_keeps_original_time_slots():
    masked, features = masked_fixture(
        ray_index=[0, 0, 1, 1], sample_index=[1, 3, 0, 2], raw_counts=[5, 3]
    )
    batch = pack_tp(masked, features)
    assert batch.mode is PackingMode.TP
    assert batch.t_len == 5  # the largest raw count, masked slots included
    assert np.array_equal(batch.slot_time, masked.sample_index)
    assert np.array_equal(batch.slot_ray, masked.ray_index)
    # unoccupied slots hold zeros
    occ = batch.occupancy
    assert np.allclose(batch.data[~occ], 0.0)
    assert np.allclose(batch.data[batch.slot_ray, batch.slot_time], features)
    batch.validate()


def test_tcp_left_packs_survivors():
    masked, features = masked_fixture(
        ray_index=[0, 0, 0, 1, 2], sample_index=[2, 5, 7, 4, 0], raw_counts=[8, 8, 8]
    )
    batch = pack_tcp(masked, features)
    assert batch.mode is PackingMode.TCP
    assert batch.t_len == 3  # the largest survivor count
    assert list(batch.row_lengths) == [3, 1, 1]
    # occupancy is a left-aligned prefix per row
    occ = batch.occupancy
    for r in range(3):
        row = occ[r]
        assert row[: batch.row_lengths[r]].all()
        assert not row[batch.row_lengths[r]:].any()
    # survivor order along the ray is preserved
    assert np.allclose(batch.data[0, :3], features[:3])
    batch.validate()


def test_tcp_sort_orders_rows_by_length():
    masked, features = masked_fixture(
        ray_index=[0, 1, 1, 1, 2, 2], sample_index=[0, 0, 1, 2, 0, 1], raw_counts=[4, 4, 4]
    )
    plain = pack_tcp(masked, features, sort=False)
    sorted_batch = pack_tcp(masked, features, sort=True)
    assert list(plain.ray_permutation) == [0, 1, 2]
    assert list(sorted_batch.ray_permutation) == [1, 2, 0]  # descending counts, stable
    assert list(sorted_batch.row_lengths) == [3, 2, 1]
    # both layouts scatter back to the same canonical order
    out_a = unpack_scatter(plain.data, plain)
    out_b = unpack_scatter(sorted_batch.data, sorted_batch)
    assert np.allclose(out_a, features)
    assert np.allclose(out_b, features)


def test_unpack_scatter_inverts_both_modes():
    masked, features = masked_fixture(
        ray_index=[0, 0, 1, 2, 2, 2], sample_index=[1, 4, 2, 0, 1, 3],
        raw_counts=[5, 3, 6], channels=4, seed=3
    )
    for packer in (pack_tp, pack_tcp):
        batch = packer(masked, features)
        assert np.allclose(unpack_scatter(batch.data, batch), features)


def test_flip_reverses_occupied_prefix():
    masked, features = masked_fixture(
        ray_index=[0, 0, 0, 1], sample_index=[0, 1, 2, 0], raw_counts=[3, 2]
    )
    batch = pack_tcp(masked, features)
    flipped = temporal_flip(batch)
    assert flipped.flipped and not batch.flipped
    # row 0 had survivors [a, b, c]: flipped order is [c, b, a], zeros stay put
    assert np.allclose(flipped.data[0, :3], features[[2, 1, 0]])
    assert np.allclose(flipped.data[1, 0], features[3])
    assert np.allclose(flipped.data[1, 1:], 0.0)
    flipped.validate()


def test_flip_is_an_involution_bitwise():
    masked, features = masked_fixture(
        ray_index=[0, 0, 1, 1, 1, 3], sample_index=[2, 6, 0, 3, 4, 5],
        raw_counts=[7, 5, 2, 6], n_rays=4, channels=3, seed=9
    )
    for packer in (pack_tp, pack_tcp):
        batch = packer(masked, features)
        twice = temporal_flip(temporal_flip(batch))
        assert np.array_equal(twice.data, batch.data)
        assert np.array_equal(twice.slot_time, batch.slot_time)
        assert np.array_equal(twice.slot_ray, batch.slot_ray)
        assert np.array_equal(twice.occupancy, batch.occupancy)
        assert twice.flipped == batch.flipped


def test_flip_tp_mirrors_the_raw_window():
    # TP flip mirrors within the per-ray raw length, masked slots included.
    masked, features = masked_fixture(
        ray_index=[0, 0], sample_index=[0, 2], raw_counts=[4]
    )
    batch = pack_tp(masked, features)
    flipped = temporal_flip(batch)
    # raw length 4: sample 0 -> slot 3, sample 2 -> slot 1
    assert np.allclose(flipped.data[0, 3], features[0])
    assert np.allclose(flipped.data[0, 1], features[1])
    assert np.allclose(flipped.data[0, [0, 2]], 0.0)


def test_rays_with_no_survivors_still_get_rows():
    masked, features = masked_fixture(
        ray_index=[0, 2], sample_index=[1, 0], raw_counts=[3, 2, 4], n_rays=3
    )
    tcp = pack_tcp(masked, features)
    assert tcp.data.shape[0] == 3
    assert list(tcp.row_lengths) == [1, 0, 1]
    assert not tcp.occupancy[1].any()
    out = unpack_scatter(tcp.data, tcp)
    assert np.allclose(out, features)


def test_empty_batch_and_stats():
    masked, features = masked_fixture(
        ray_index=np.zeros(0), sample_index=np.zeros(0), raw_counts=[0, 0], n_rays=2
    )
    batch = pack_tcp(masked, features.reshape(0, 2))
    assert batch.count == 0 and batch.t_len == 0
    stats = occupancy_stats(batch)
    assert stats.density == 0.0
    assert stats.total_slots == 0


def test_validate_catches_corruption():
    masked, features = masked_fixture(
        ray_index=[0, 0, 1], sample_index=[0, 1, 0], raw_counts=[2, 2]
    )
    batch = pack_tcp(masked, features)
    batch.data[1, 1, 0] = 99.0  # poke a hole in an unoccupied slot
    with pytest.raises(ValueError):
        batch.validate()
