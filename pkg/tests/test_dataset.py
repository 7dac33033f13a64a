import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from qasplitfed import dataset as ds
from qasplitfed.errors import ConfigurationError, DataError
from qasplitfed.metrics import jaccard


@pytest.fixture(scope="module")
def samples():
    return ds.generate_synthetic(7, 40)


def test_generation_is_deterministic_per_seed():
    a, b = ds.generate_synthetic(3, 5), ds.generate_synthetic(3, 5)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
    c = ds.generate_synthetic(4, 5)
    assert not np.array_equal(a[0].image, c[0].image)


def test_sample_depends_only_on_seed_and_index():
    short, longer = ds.generate_synthetic(9, 3), ds.generate_synthetic(9, 6)
    for x, y in zip(short, longer):
        assert np.array_equal(x.image, y.image)


def test_zero_count_and_size_guard():
    assert ds.generate_synthetic(0, 0) == []
    with pytest.raises(ConfigurationError):
        ds.generate_synthetic(0, 1, (15, 32))


def test_every_class_present_with_min_share(samples):
    for s in samples:
        share = np.bincount(s.mask.ravel(), minlength=5) / s.mask.size
        assert share.min() >= 0.01
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert s.image.shape == s.mask.shape == (32, 32)


def test_nested_structure(samples):
    # ICM sits inside the region enclosed by TE; ZP encloses TE
    for s in samples:
        inside_zp = ndimage.binary_fill_holes(s.mask > 0)
        inside_te = ndimage.binary_fill_holes(np.isin(s.mask, (2, 3, 4)))
        assert inside_zp[s.mask == 2].all()
        assert inside_te[s.mask == 3].all() and inside_te[s.mask == 4].all()


def test_sample_validation():
    with pytest.raises(DataError):
        ds.SegSample(np.zeros((4, 4)), np.zeros((4, 5), np.uint8))
    with pytest.raises(DataError):
        ds.SegSample(np.zeros((4, 4)), np.full((4, 4), 5, np.uint8))


def test_desk_partition_leaves_seventeen_for_test():
    pool = ds.generate_synthetic(0, 160)
    clients, test = ds.partition_clients(pool, ds.DESK_COUNTS, seed=0)
    assert len(test) == 17
    for c, n in zip(clients, ds.DESK_COUNTS):
        assert c.train_count + c.validation_count == n
        assert c.validation_count == int(0.15 * n)
        assert abs(c.validation_count - 0.15 * n) <= 1
    ids = [s.sample_id for c in clients for s in c.train + c.validation] + [s.sample_id for s in test]
    assert len(ids) == len(set(ids)) == 160


def test_single_client_floor_rule(samples):
    clients, test = ds.partition_clients(samples[:10], [10], seed=1)
    assert clients[0].train_count == 9 and clients[0].validation_count == 1 and test == []


def test_partition_errors(samples):
    with pytest.raises(ConfigurationError):
        ds.partition_clients(samples, [30, 30], seed=0)
    with pytest.raises(ConfigurationError):
        ds.partition_clients(samples, [4], seed=0)        # no validation sample


@settings(max_examples=30)
@given(st.lists(st.integers(7, 12), min_size=1, max_size=3), st.integers(0, 1000))
def test_partition_conserves_samples(counts, seed):
    pool = ds.generate_synthetic(0, 40)[:sum(counts) + 3]
    clients, test = ds.partition_clients(pool, counts, seed)
    total = sum(c.train_count + c.validation_count for c in clients) + len(test)
    assert total == len(pool)


def test_disk_matches_lattice_enumeration():
    for r in range(1, 7):
        count = sum(1 for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dx * dx + dy * dy <= r * r)
        assert ds.disk(r).sum() == count
    assert ds.disk(2).sum() == 13


def test_single_pixel_grows_into_disk():
    mask = np.zeros((9, 9), np.uint8)
    mask[4, 4] = 1
    out = ds.corrupt_mask(mask, ds.CorruptionSpec(2))
    assert (out == 1).sum() == 13
    assert np.array_equal(out[2:7, 2:7] == 1, ds.disk(2))


def test_huge_radius_takes_highest_precedence_present(samples):
    out = ds.corrupt_mask(samples[0].mask, ds.CorruptionSpec(64))
    assert (out == 3).all()
    no_icm = np.where(samples[0].mask == 3, 4, samples[0].mask)
    assert (ds.corrupt_mask(no_icm, ds.CorruptionSpec(64)) == 2).all()


def test_background_only_mask_unchanged():
    m = np.zeros((8, 8), np.uint8)
    assert np.array_equal(ds.corrupt_mask(m), m)


def test_class_toggle_keeps_original_region(samples):
    m = samples[1].mask
    out = ds.corrupt_mask(m, ds.CorruptionSpec(3, classes=(1, 2, 4)))
    assert ((out == 3) == (m == 3)).all()
    full = ds.corrupt_mask(m, ds.CorruptionSpec(3))
    assert (full == 3).sum() > (m == 3).sum()


def _boundary(region):
    return region & ~ndimage.binary_erosion(region, border_value=1)


@pytest.mark.parametrize("radius", [2, 3, 4])
def test_corruption_properties_on_generated_masks(samples, radius):
    spec = ds.CorruptionSpec(radius)
    for s in samples:
        m = s.mask
        out = ds.corrupt_mask(m, spec)
        assert out.max() < 5 and not np.array_equal(out, m)
        assert (out == 0).sum() <= (m == 0).sum()
        assert ((out == 0) <= (m == 0)).all()          # background never grows
        shifts = []
        for c in ds.FOREGROUND:
            j = jaccard(out, m, c)
            assert j is not None and j < 1
            # original pixels of c are kept unless claimed by a higher-precedence class
            lost = (m == c) & (out != c)
            higher = ds.DEFAULT_PRECEDENCE[:ds.DEFAULT_PRECEDENCE.index(c)]
            assert np.isin(out[lost], higher).all()
            if (out == c).any():
                dist = ndimage.distance_transform_edt(~_boundary(m == c))
                shifts.append(dist[_boundary(out == c)].mean())
        assert np.mean(shifts) >= 1.0


def test_corrupt_client_marks_train_and_validation(samples):
    clients, test = ds.partition_clients(samples, [20], seed=0)
    bad = ds.corrupt_client(clients[0], ds.CorruptionSpec(3))
    assert bad.corrupted
    for a, b in zip(clients[0].train + clients[0].validation, bad.train + bad.validation):
        assert np.array_equal(b.mask, ds.corrupt_mask(a.mask, ds.CorruptionSpec(3)))
        assert np.array_equal(a.image, b.image)


def test_corruption_order_largest_first_with_seeded_ties():
    order = ds.corruption_order(ds.DESK_COUNTS, 0)
    assert order[:2] == [0, 3] and order[-1] == 2 and set(order[2:4]) == {1, 4}
    assert ds.corruption_order(ds.DESK_COUNTS, 0) == order


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ds.CorruptionSpec(0)
    with pytest.raises(ConfigurationError):
        ds.CorruptionSpec(2, precedence=(1, 2, 3))


def test_export_import_roundtrip(tmp_path, samples):
    clients, test = ds.partition_clients(samples, [12, 10], seed=2)
    clients[1] = ds.corrupt_client(clients[1], ds.CorruptionSpec(2))
    ds.export_dataset(tmp_path, clients, test, {"seed": 2})
    back, test2, meta = ds.import_dataset(tmp_path)
    assert meta == {"seed": 2}
    assert [c.corrupted for c in back] == [False, True]
    for a, b in zip(clients, back):
        for x, y in zip(a.train + a.validation, b.train + b.validation):
            assert x.sample_id == y.sample_id
            assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
    assert [s.sample_id for s in test2] == [s.sample_id for s in test]


def test_import_rejects_truncated_record(tmp_path, samples):
    clients, test = ds.partition_clients(samples[:10], [10], seed=0)
    ds.export_dataset(tmp_path, clients, test)
    rec = next((tmp_path / "samples").iterdir())
    rec.write_bytes(rec.read_bytes()[:-1])
    with pytest.raises(DataError):
        ds.import_dataset(tmp_path)
