import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckksfed import data as dg


def test_default_split_sizes():
    train, ev = dg.train_eval_split(0)
    assert (len(train), len(ev)) == (8356, 2090)
    assert train.features.shape == (8356, 32)


def test_generation_is_deterministic():
    a = dg.generate_synthetic(500, seed=3)
    b = dg.generate_synthetic(500, seed=3)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.targets, b.targets)
    c = dg.generate_synthetic(500, seed=4)
    assert not np.array_equal(a.targets, c.targets)


def test_noise_free_targets_follow_formula():
    ds = dg.generate_synthetic(300, noise_sigma=0.0, seed=9)
    assert np.array_equal(ds.targets, dg.target_function(ds.features, 9))


def test_targets_are_age_like():
    ds = dg.generate_synthetic(5000, seed=1)
    assert ds.targets.min() >= dg.AGE_MIN
    assert ds.targets.max() <= dg.AGE_MAX
    assert abs(ds.targets.mean() - dg.AGE_CENTER) < 1.0


def test_eval_split_is_disjoint():
    train, ev = dg.train_eval_split(0, train_size=100, eval_size=40)
    rows = {r.tobytes() for r in train.features}
    assert not any(r.tobytes() in rows for r in ev.features)


def test_uniform_sizes_example():
    assert sorted(dg.uniform_sizes(8356, 8)) == [1044] * 4 + [1045] * 4


def test_skewed_sizes_are_geometric():
    sizes = dg.skewed_sizes(8356, 8)
    assert sum(sizes) == 8356
    raw = 0.7 ** np.arange(8)
    assert np.all(np.abs(np.array(sizes) - 8356 * raw / raw.sum()) < 1)
    assert all(a > b for a, b in zip(sizes, sizes[1:]))


def test_scheme_parsing():
    s = dg.PartitionScheme.parse("skewed_noniid")
    assert (s.amount, s.distribution) == (dg.Amount.SKEWED, dg.Distribution.NON_IID)
    assert dg.PartitionScheme.parse("Uniform_Non-IID").name == "uniform_noniid"
    with pytest.raises(ValueError):
        dg.PartitionScheme.parse("lopsided")


@pytest.mark.parametrize("scheme", ["uniform_iid", "uniform_noniid", "skewed_iid", "skewed_noniid"])
def test_partition_covers_dataset(scheme):
    ds = dg.generate_synthetic(1000, seed=2)
    plan = dg.partition(ds, 8, scheme, seed=2)
    joined = np.concatenate(plan.indices)
    assert len(joined) == 1000
    assert np.array_equal(np.sort(joined), np.arange(1000))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.sampled_from(dg.ENVIRONMENTS), st.integers(0, 1000))
def test_partition_properties(n, scheme, seed):
    ds = dg.generate_synthetic(400, seed=seed)
    plan = dg.partition(ds, n, scheme, seed)
    assert sum(plan.sizes) == 400
    if scheme.startswith("uniform"):
        assert max(plan.sizes) - min(plan.sizes) <= 1
    if scheme.endswith("noniid"):
        for a, b in zip(plan.indices, plan.indices[1:]):
            assert ds.targets[a].max() <= ds.targets[b].min()


def test_single_learner_gets_everything():
    ds = dg.generate_synthetic(50, seed=0)
    for scheme in dg.ENVIRONMENTS:
        assert dg.partition(ds, 1, scheme).sizes == (50,)


def test_iid_learner_means_track_global():
    train, _ = dg.train_eval_split(0)
    plan = dg.partition(train, 8, "uniform_iid", seed=0)
    mean = train.targets.mean()
    for ix in plan.indices:
        assert abs(train.targets[ix].mean() - mean) < 0.5


def test_partition_deterministic():
    ds = dg.generate_synthetic(300, seed=5)
    a = dg.partition(ds, 4, "skewed_noniid", seed=5)
    b = dg.partition(ds, 4, "skewed_noniid", seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.indices, b.indices))


def test_partition_rejects_bad_counts():
    ds = dg.generate_synthetic(5, seed=0)
    with pytest.raises(ValueError):
        dg.partition(ds, 0, "uniform_iid")
    with pytest.raises(ValueError):
        dg.partition(ds, 6, "uniform_iid")
    with pytest.raises(ValueError):
        dg.partition(dg.generate_synthetic(20, seed=0), 12, "skewed_noniid")


def test_csv_exports(tmp_path):
    ds = dg.generate_synthetic(10, input_dim=3, seed=0)
    ds.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "x0,x1,x2,age" and len(lines) == 11
    plan = dg.partition(ds, 2, "uniform_iid")
    plan.to_csv(tmp_path / "p.csv")
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 11


def test_dataset_validation():
    with pytest.raises(ValueError):
        dg.LabeledDataset(np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        dg.LabeledDataset(np.zeros((1, 2)), np.array([np.nan]))
    with pytest.raises(ValueError):
        dg.generate_synthetic(0)
