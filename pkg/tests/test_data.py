import numpy as np
import pytest

from hybrid_al.data import (
    DatasetError,
    PhantomConfig,
    PoolError,
    SampleKey,
    Volume,
    generate_phantom,
    load_dataset,
    move_to_training,
    save_dataset,
    split_pools,
    unit_keys,
)


def _dummy_volumes(n, depth=2):
    out = []
    for i in range(n):
        img = np.zeros((depth, 16, 16), np.float32)
        lab = np.zeros((depth, 16, 16), np.uint8)
        lab[:, 4:8, 4:8] = 1
        out.append(Volume(f"v{i:03d}", img, lab))
    return out


def test_phantom_is_bit_identical_for_equal_seed():
    cfg = PhantomConfig(n_volumes=4, height=32, width=32, depth=4)
    a, b = generate_phantom(7, cfg), generate_phantom(7, cfg)
    for va, vb in zip(a, b):
        assert va.id == vb.id and va.cohort == vb.cohort
        assert va.image.tobytes() == vb.image.tobytes()
        assert va.labels.tobytes() == vb.labels.tobytes()
    c = generate_phantom(8, cfg)
    assert any(va.image.tobytes() != vc.image.tobytes() for va, vc in zip(a, c))


def test_phantom_value_ranges_and_shapes():
    cfg = PhantomConfig(n_volumes=3, height=24, width=40, depth=5, n_classes=3)
    for v in generate_phantom(0, cfg):
        assert v.image.shape == v.labels.shape == (5, 24, 40)
        assert v.image.dtype == np.float32 and v.labels.dtype == np.uint8
        assert v.image.min() >= 0 and v.image.max() <= 1
        assert v.labels.max() <= 3


def test_phantom_zero_noise_is_piecewise_constant():
    cfg = PhantomConfig(n_volumes=3, height=32, width=32, depth=4, noise=0.0)
    for v in generate_phantom(7, cfg):
        for z in range(v.depth):
            for c in np.unique(v.labels[z]):
                vals = v.image[z][v.labels[z] == c]
                assert np.ptp(vals) == 0


def test_phantom_every_class_present_dataset_wide():
    vols = generate_phantom(7, PhantomConfig())
    labels = np.concatenate([v.labels.ravel() for v in vols])
    fg = labels[labels > 0]
    frac = np.bincount(fg, minlength=5)[1:] / fg.size
    assert np.all(frac >= 0.005), frac


def test_phantom_has_both_cohorts():
    vols = generate_phantom(7, PhantomConfig())
    cohorts = [v.cohort for v in vols]
    assert set(cohorts) == {"old", "young"}
    assert cohorts.count("young") == round(0.3 * 30)


@pytest.mark.parametrize("kw", [dict(height=8), dict(width=15), dict(n_classes=0), dict(noise=-0.1)])
def test_phantom_rejects_bad_config(kw):
    with pytest.raises(ValueError):
        generate_phantom(0, PhantomConfig(**kw))


def test_volume_rejects_out_of_range_data():
    img = np.zeros((2, 16, 16), np.float32)
    with pytest.raises(ValueError):
        Volume("x", img + 2, np.zeros_like(img, np.uint8))
    with pytest.raises(ValueError):
        Volume("x", img, np.zeros((2, 16, 15), np.uint8))


def test_split_pool_sizes():
    p = split_pools(_dummy_volumes(119), (1, 89, 9, 20), seed=0)
    assert (len(p.training), len(p.unlabeled), len(p.validation), len(p.test)) == (1, 89, 9, 20)
    p = split_pools(_dummy_volumes(30), (1, 24, 1, 4), seed=0)
    assert (len(p.training), len(p.unlabeled), len(p.validation), len(p.test)) == (1, 24, 1, 4)
    with pytest.raises(ValueError):
        split_pools(_dummy_volumes(119), (1, 89, 9, 19), seed=0)
    with pytest.raises(ValueError):
        split_pools(_dummy_volumes(4), (0, 2, 1, 1), seed=0)


def test_split_is_seeded_partition():
    vols = _dummy_volumes(10)
    a = split_pools(vols, (2, 5, 1, 2), seed=5)
    b = split_pools(vols, (2, 5, 1, 2), seed=5)
    assert a == b
    ids = [k.volume_id for k in a.training + a.unlabeled] + a.validation + a.test
    assert sorted(ids) == [v.id for v in vols]


def test_slice_rule_expands_training_to_slices():
    vols = _dummy_volumes(5, depth=3)
    p = split_pools(vols, (1, 2, 1, 1), seed=0, rule="slice")
    assert len(p.training) == 3 and len(p.unlabeled) == 6
    assert all(k.slice_index is not None for k in p.training + p.unlabeled)
    p.check({v.id: v for v in vols})


def test_move_to_training_bookkeeping():
    vols = _dummy_volumes(30)
    p = split_pools(vols, (1, 24, 1, 4), seed=1)
    q = move_to_training(p, [p.unlabeled[3]])
    assert len(q.unlabeled) == 23 and len(q.training) == 2
    assert q.training[-1] == p.unlabeled[3]
    assert q.validation == p.validation and q.test == p.test
    with pytest.raises(PoolError):
        move_to_training(q, [q.training[0]])
    assert len(q.training) == 2
    for _ in range(5):
        q = move_to_training(q, [q.unlabeled[0]])
    assert len(q.training) == 7
    assert set(q.training) | set(q.unlabeled) == set(p.training) | set(p.unlabeled)
    assert not set(q.training) & set(q.unlabeled)


def test_pool_check_detects_overlap():
    p = split_pools(_dummy_volumes(4), (1, 2, 0, 1), seed=0)
    bad = type(p)(p.training + [p.unlabeled[0]], p.unlabeled, p.validation, p.test, p.acquisition_rule)
    with pytest.raises(PoolError):
        bad.check()


def test_sample_key_text_round_trip():
    for key in (SampleKey("vol003"), SampleKey("vol003", 7)):
        assert SampleKey.parse(str(key)) == key
    assert str(SampleKey("vol003", 7)) == "vol003:7"
    v = _dummy_volumes(1, depth=3)[0]
    assert unit_keys(v, "volume") == [SampleKey("v000")]
    assert [k.slice_index for k in unit_keys(v, "slice")] == [0, 1, 2]


def test_save_load_round_trip(tmp_path):
    vols = generate_phantom(2, PhantomConfig(n_volumes=3, height=16, width=20, depth=3))
    save_dataset(vols, tmp_path, 4)
    back = load_dataset(tmp_path / "manifest.tsv")
    assert len(back) == 3
    for a, b in zip(vols, back):
        assert a.same_as(b)


def test_load_rejects_corruption(tmp_path):
    vols = generate_phantom(2, PhantomConfig(n_volumes=2, height=16, width=16, depth=2))
    save_dataset(vols, tmp_path, 4)
    path = tmp_path / f"{vols[0].id}.vol"
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="checksum"):
        load_dataset(tmp_path / "manifest.tsv")


def test_load_rejects_depth_mismatch_and_missing_file(tmp_path):
    vols = generate_phantom(2, PhantomConfig(n_volumes=2, height=16, width=16, depth=2))
    save_dataset(vols, tmp_path, 4)
    manifest = tmp_path / "manifest.tsv"
    text = manifest.read_text()
    lines = text.splitlines()
    fields = lines[1].split("\t")
    fields[2] = "5"
    manifest.write_text("\n".join([lines[0], "\t".join(fields)] + lines[2:]) + "\n")
    with pytest.raises(DatasetError, match="depth"):
        load_dataset(manifest)
    manifest.write_text(text)
    (tmp_path / f"{vols[1].id}.vol").unlink()
    with pytest.raises(DatasetError):
        load_dataset(manifest)
