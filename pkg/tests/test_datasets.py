import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdp.datasets import (
    IGNORE_ID,
    DatasetDescriptor,
    Sample,
    SyntheticSpec,
    Taxonomy,
    benchmark_spec,
    build_label_registry,
    bundled_descriptor,
    generate_synthetic_dataset,
    load_dataset_dir,
    load_sample,
    map_local_to_global,
    save_dataset_dir,
    save_sample,
    synthetic_splits,
)
from mdp.errors import ConfigError, DataError, FormatError

A = DatasetDescriptor("A", ("bg", "circle"))
B = DatasetDescriptor("B", ("bg", "square"))


def test_disjoint_count():
    assert build_label_registry([A, B]).num_classes == 4


def test_name_merged_count():
    reg = build_label_registry([A, B], "name-merged")
    assert reg.num_classes == 3
    assert reg.local_to_global("B")[0] == reg.local_to_global("A")[0]


def test_bundled_descriptors_union():
    voc, ade = bundled_descriptor("voc"), bundled_descriptor("ade20k")
    assert len(voc.classes) == 21 and len(ade.classes) == 150
    reg = build_label_registry([voc, ade])
    assert reg.num_classes == len(voc.classes) + len(ade.classes) == 171


def test_duplicate_dataset_id():
    with pytest.raises(ConfigError, match="duplicate"):
        build_label_registry([A, DatasetDescriptor("A", ("x",))])


def test_global_ids_unique_per_pair():
    reg = build_label_registry([A, B, DatasetDescriptor("C", ("bg", "circle", "tri"))])
    pairs = [(d.id, k) for d in reg.datasets for k in range(len(d.classes))]
    gids = [int(reg.local_to_global(ds)[k]) for ds, k in pairs]
    assert len(set(gids)) == len(gids) == reg.num_classes


def test_map_offset_and_ignore():
    reg = build_label_registry([A, B])
    assert map_local_to_global(reg, "B", np.array([0]))[0] == 2
    ign = np.full((3, 3), IGNORE_ID)
    np.testing.assert_array_equal(map_local_to_global(reg, "A", ign), ign)


def test_map_out_of_range_names_sample():
    reg = build_label_registry([A, B])
    with pytest.raises(DataError, match="sample 17"):
        reg.to_global("A", np.array([0, 5]), sample=17)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["disjoint", "name-merged"]))
def test_local_global_round_trip(seed, merge):
    rng = np.random.default_rng(seed)
    reg = build_label_registry([A, B, DatasetDescriptor("C", ("bg", "x", "y", "z"))], merge)
    ds = int(rng.integers(3))
    n = len(reg.datasets[ds].classes)
    local = rng.integers(0, n, (5, 6)).astype(np.uint16)
    local[rng.uniform(size=local.shape) < 0.2] = IGNORE_ID
    np.testing.assert_array_equal(reg.to_local(ds, reg.to_global(ds, local)), local)


# -- generator --------------------------------------------------------------


def small_spec(seed=0, n=6, size=16):
    return benchmark_spec(seed, n, size)


def test_generator_determinism():
    a = generate_synthetic_dataset(small_spec(3))
    b = generate_synthetic_dataset(small_spec(3))
    assert len(a) == len(b) == 12
    assert all(x.equals(y) for x, y in zip(a, b))
    c = generate_synthetic_dataset(small_spec(4))
    assert not all(x.equals(y) for x, y in zip(a, c))


def test_every_image_has_two_classes():
    for s in generate_synthetic_dataset(small_spec(1, 20)):
        assert len(np.unique(s.labels)) >= 2


def test_circle_only_taxonomy():
    tax = Taxonomy("c", (("circle", (("circle", "plain"), ("circle", "stripes"))),))
    other = Taxonomy("d", (("box", (("rect", "plain"),)),))
    spec = SyntheticSpec((tax, other), 16, 10, 3, seed=2)
    reg = spec.registry()
    bg, circle = reg.local_to_global("c")
    for s in generate_synthetic_dataset(spec, reg):
        if s.dataset == 0:
            assert set(np.unique(s.labels)) <= {bg, circle}
            assert (s.labels == circle).any()


def test_class_frequency_within_five_percent():
    target = (0.6, 0.3, 0.1)
    tax = Taxonomy(
        "w",
        (("a", (("circle", "plain"),)), ("b", (("rect", "plain"),)), ("c", (("triangle", "plain"),))),
        weights=target,
    )
    other = Taxonomy("o", (("z", (("rect", "plain"),)),))
    spec = SyntheticSpec((tax, other), 16, 600, 3, seed=5)
    reg = spec.registry()
    lut = reg.local_to_global("w")
    counts = np.zeros(3)
    # one shape per occupied quadrant; count the class each quadrant holds
    for s in generate_synthetic_dataset(spec, reg):
        if s.dataset != 0:
            continue
        for qy in (0, 8):
            for qx in (0, 8):
                ids = set(np.unique(s.labels[qy:qy + 8, qx:qx + 8])) - {lut[0]}
                assert len(ids) <= 1
                for gid in ids:
                    counts[list(lut).index(gid) - 1] += 1
    assert counts.sum() == 600 * 3
    np.testing.assert_allclose(counts / counts.sum(), target, atol=0.05)


def test_small_image_rejected():
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(benchmark_spec(0, 2, 8))


def test_benchmark_has_nine_classes_and_disjoint_splits():
    reg, train, evals = synthetic_splits(small_spec(0, 4), 2)
    assert reg.num_classes == 9
    assert len(train) == 8 and len(evals) == 4
    assert {s.sample_id for s in train}.isdisjoint({s.sample_id for s in evals})


# -- file format ------------------------------------------------------------


def random_sample(rng, h=7, w=5, c=3):
    labels = rng.integers(0, 9, (h, w))
    labels[0, 0] = IGNORE_ID
    return Sample(rng.uniform(size=(h, w, c)), labels, int(rng.integers(0, 3)), int(rng.integers(1000)))


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = random_sample(rng)
    p = tmp_path / f"sample_{s.sample_id:06d}.mdps"
    save_sample(s, p)
    assert load_sample(p).equals(s)


def test_file_size_64():
    rng = np.random.default_rng(1)
    s = random_sample(rng, 64, 64, 3)
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "x.mdps")
        save_sample(s, p)
        header = 4 + 2 + 4 + 4 + 2 + 2  # magic, version, H, W, C, dataset id
        assert os.path.getsize(p) == header + 64 * 64 * 3 * 4 + 64 * 64 * 2 == 57362


def test_bad_magic(tmp_path):
    p = tmp_path / "s.mdps"
    save_sample(random_sample(np.random.default_rng(2)), p)
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic") as exc:
        load_sample(p)
    assert exc.value.offset == 0


def test_truncated_and_trailing(tmp_path):
    p = tmp_path / "s.mdps"
    s = random_sample(np.random.default_rng(3))
    save_sample(s, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated") as exc:
        load_sample(p)
    assert exc.value.offset == len(raw) - 3
    p.write_bytes(raw + b"\0\0")
    with pytest.raises(FormatError, match="trailing") as exc:
        load_sample(p)
    assert exc.value.offset == len(raw)
    p.write_bytes(raw[:10])
    with pytest.raises(FormatError, match="header"):
        load_sample(p)


def test_dataset_dir_round_trip(tmp_path):
    reg, train, _ = synthetic_splits(small_spec(0, 3), 1)
    save_dataset_dir(tmp_path, reg, train)
    reg2, back = load_dataset_dir(tmp_path)
    assert reg2.to_dict() == reg.to_dict()
    assert all(a.equals(b) for a, b in zip(train, back))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9), st.integers(1, 9), st.integers(1, 4))
def test_round_trip_property(seed, h, w, c):
    s = random_sample(np.random.default_rng(seed), h, w, c)
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, f"sample_{s.sample_id}.mdps")
        save_sample(s, p)
        assert load_sample(p).equals(s)
