import numpy as np
import pytest

from fairprune.data import (
    DataConfigError,
    DataFormatError,
    GroupedDataset,
    SyntheticSpec,
    export_csv,
    iterate_batches,
    load_csv,
    synthetic_generate,
)

SMALL = SyntheticSpec(dim=4, num_classes=3, group_sizes=(60, 31, 20), noise=(0.3, 0.5, 0.7),
                      test_fraction=0.25)


@pytest.fixture(scope="module")
def small_split():
    return synthetic_generate(SMALL, seed=11)


def test_requested_sizes_respected(small_split):
    train, test = small_split
    np.testing.assert_array_equal(train.group_sizes() + test.group_sizes(), SMALL.group_sizes)


def test_default_recipe_sizes():
    train, test = synthetic_generate(SyntheticSpec(), seed=0)
    np.testing.assert_array_equal(train.group_sizes() + test.group_sizes(), (4000, 2000, 1000, 500, 250))
    assert train.dim == 20 and train.num_classes == 5 and train.num_groups == 5


def test_same_seed_same_data():
    a = synthetic_generate(SMALL, seed=3)
    b = synthetic_generate(SMALL, seed=3)
    c = synthetic_generate(SMALL, seed=4)
    assert a[0].same_content(b[0]) and a[1].same_content(b[1])
    assert not a[0].same_content(c[0])


def test_stratified_class_balance(small_split):
    for split in small_split:
        for gid in range(split.num_groups):
            counts = np.bincount(split.y[split.g == gid], minlength=split.num_classes)
            assert counts.max() - counts.min() <= 1


def test_group_too_small_for_split():
    spec = SyntheticSpec(dim=2, num_classes=5, group_sizes=(100, 12), noise=(0.1, 0.1))
    with pytest.raises(DataConfigError, match="group 1"):
        synthetic_generate(spec, 0)


def test_low_noise_is_separable():
    from fairprune.model import MlpSpec, init_mlp
    from fairprune.metrics import dataset_group_stats
    from fairprune.training import TrainConfig, run_training

    spec = SyntheticSpec(dim=8, num_classes=3, group_sizes=(200, 100), noise=(1e-3, 1e-3))
    train, _ = synthetic_generate(spec, 0)
    model = init_mlp(MlpSpec(8, (32, 32), 3), 0)
    run_training(model, train, total_epochs=10, seed=0, cfg=TrainConfig(batch_size=16),
                 measure_disparity=False)
    assert dataset_group_stats(model, train).accuracy > 0.99


def test_csv_roundtrip(tmp_path, small_split):
    train, _ = small_split
    path = tmp_path / "d.csv"
    export_csv(train, path)
    back = load_csv(path, group_names=train.group_names, num_classes=train.num_classes)
    assert back.same_content(train)


def test_csv_single_group(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("f0,f1,label,group\n0.5,1,0,a\n1.5,2,1,a\n")
    data = load_csv(path)
    assert data.num_groups == 1 and data.group_names == ("a",) and data.num_classes == 2


def test_csv_group_ids_by_first_appearance(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("f0,label,group\n0,0,zz\n1,1,aa\n2,0,zz\n")
    data = load_csv(path)
    assert data.group_names == ("zz", "aa")
    np.testing.assert_array_equal(data.g, [0, 1, 0])


def test_csv_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,f1,label,group\n0.5,1,0,a\n0.5,oops,1,a\n")
    with pytest.raises(DataFormatError, match=":3:"):
        load_csv(path)


def test_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(DataFormatError, match="empty"):
        load_csv(path)


def test_csv_unknown_test_group(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("f0,label,group\n0,0,a\n1,1,b\n")
    with pytest.raises(DataConfigError, match="'b'"):
        load_csv(path, group_names=("a",))


def test_batches_partition_epoch(small_split):
    train, _ = small_split
    seen = np.concatenate([b.indices for b in iterate_batches(train, 16, 5, 0)])
    np.testing.assert_array_equal(np.sort(seen), np.arange(len(train)))


def test_batch_larger_than_dataset(small_split):
    train, _ = small_split
    batches = list(iterate_batches(train, 10_000, 5, 0))
    assert len(batches) == 1 and len(batches[0]) == len(train)


def test_epochs_reshuffle_reproducibly(small_split):
    train, _ = small_split
    e0 = [b.indices for b in iterate_batches(train, 16, 5, 0)]
    e1 = [b.indices for b in iterate_batches(train, 16, 5, 1)]
    e0_again = [b.indices for b in iterate_batches(train, 16, 5, 0)]
    assert not np.array_equal(np.concatenate(e0), np.concatenate(e1))
    assert all(np.array_equal(a, b) for a, b in zip(e0, e0_again))


def test_group_index_partitions_batch(small_split):
    train, _ = small_split
    for batch in iterate_batches(train, 7, 1, 2):
        for gid, idx in enumerate(batch.group_index):
            brute = [i for i in range(len(batch)) if batch.g[i] == gid]
            assert idx.tolist() == brute
        assert sum(len(i) for i in batch.group_index) == len(batch)
        np.testing.assert_array_equal(batch.y, train.y[batch.indices])


def test_dataset_is_immutable(small_split):
    train, _ = small_split
    with pytest.raises(ValueError):
        train.X[0, 0] = 1.0
    sub = train.subset([0, 1])
    assert len(sub) == 2 and len(train) > 2


def test_invalid_dataset_rejected():
    with pytest.raises(DataConfigError):
        GroupedDataset(np.zeros((2, 1)), [0, 5], [0, 0], ("a",), 2)
