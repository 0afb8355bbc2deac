import numpy as np
import pytest

from fedadg import losses as L
from fedadg import tensor as T
from fedadg.domains import (MOONS_CENTER, DomainSpec, batches, dump_csv, generate_domain, load_csv,
                            make_split, rotation)
from fedadg.metrics import accuracy
from fedadg.networks import Classifier, FeatureExtractor
from fedadg.tensor import Tensor


def moons(angle, seed=0, noise=0.1, samples=500):
    return generate_domain(DomainSpec("rotated_two_moons", angle, samples, noise, seed))


def test_rotation_is_periodic():
    a, b = moons(0.0), moons(360.0)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)


def test_regeneration_is_bit_identical():
    a, b = moons(30.0, seed=4), moons(30.0, seed=4)
    assert a.x.tobytes() == b.x.tobytes()
    np.testing.assert_array_equal(a.train_idx, b.train_idx)


def test_noise_free_class0_on_upper_arc():
    d = moons(30.0, noise=0.0)
    # undo the rotation and centring, then check the unit upper half circle
    raw = d.x @ rotation(30.0) + MOONS_CENTER
    upper = raw[d.y == 0]
    np.testing.assert_allclose(np.hypot(upper[:, 0], upper[:, 1]), 1.0, atol=1e-12)
    assert np.all(upper[:, 1] >= -1e-12)
    lower = raw[d.y == 1]
    np.testing.assert_allclose(np.hypot(lower[:, 0] - 1.0, lower[:, 1] - 0.5), 1.0, atol=1e-12)


def test_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec("rotated_two_moons", 0.0, samples=0)
    with pytest.raises(ValueError):
        DomainSpec("rotated_two_moons", 0.0, samples=3)
    with pytest.raises(ValueError):
        DomainSpec("spirals", 0.0)


def test_split_has_every_class_in_both_parts():
    d = generate_domain(DomainSpec("shifted_gaussian_mixture", 15.0, 200, 0.3, 1, num_classes=4))
    assert set(d.train_idx).isdisjoint(d.test_idx)
    assert len(d.train_idx) + len(d.test_idx) == len(d)
    assert len(d.train_idx) == 140
    for part in ("train", "test"):
        assert set(d.subset(part)[1]) == {0, 1, 2, 3}


def test_label_marginals_match_across_domains():
    split = make_split("shifted_gaussian_mixture", [0, 15, 30, 45], 0, samples=202, num_classes=4, noise=0.3)
    counts = [np.bincount(d.y) for d in split.sources + [split.target]]
    for c in counts[1:]:
        np.testing.assert_array_equal(c, counts[0])


def test_leave_one_out_split():
    split = make_split("rotated_two_moons", [0, 15, 30, 45], 3)
    assert split.K == 3
    assert split.target.spec.angle == 45.0
    ids = [d.domain_id for d in split.sources] + [split.target.domain_id]
    assert sorted(ids) == [0, 1, 2, 3]
    assert all(d.spec.angle != 45.0 for d in split.sources)


def test_every_target_gives_a_distinct_split():
    seen = set()
    for t in range(4):
        s = make_split("rotated_two_moons", [0, 15, 30, 45], t)
        seen.add((s.target.domain_id, tuple(d.domain_id for d in s.sources)))
    assert len(seen) == 4


def test_split_errors():
    with pytest.raises(IndexError):
        make_split("rotated_two_moons", [0, 15, 30, 45], 4)
    with pytest.raises(ValueError):
        make_split("rotated_two_moons", [0, 15], 0)


def test_batches_sizes_permutation_and_seed():
    x = np.arange(10.0).reshape(10, 1)
    y = np.arange(10)
    out = list(batches(x, y, 4, np.random.default_rng(0)))
    assert [len(b[1]) for b in out] == [4, 4, 2]
    assert sorted(np.concatenate([b[1] for b in out])) == list(range(10))
    again = list(batches(x, y, 4, np.random.default_rng(0)))
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(out, again))
    with pytest.raises(ValueError):
        next(batches(x, y, 0, np.random.default_rng(0)))


def test_csv_roundtrip(tmp_path):
    split = make_split("rotated_two_moons", [0, 15, 30], 2, samples=40)
    ds = split.sources + [split.target]
    path = tmp_path / "data.csv"
    dump_csv(path, ds)
    assert path.read_text().splitlines()[0] == "domain_id,split,label,x_0,x_1"
    back = load_csv(path)
    for d in ds:
        x, y, is_train = back[d.domain_id]
        np.testing.assert_array_equal(x, d.x)
        np.testing.assert_array_equal(y, d.y)
        np.testing.assert_array_equal(np.flatnonzero(is_train), d.train_idx)


def _train_central(x, y, seed):
    rng = np.random.default_rng(seed)
    F = FeatureExtractor(2, [64], 32, rng)
    C = Classifier(32, [], 2, rng)
    params = F.parameters() + C.parameters()
    for _ in range(40):
        for xb, yb in batches(x, y, 32, rng):
            L.loss_err(C.probs(F(Tensor(xb))), yb, 0.0).backward()
            T.sgd_step(params, 0.1)
    return F, C


def test_domain_shift_degrades_accuracy_monotonically():
    accs = np.zeros((5, 3))
    for seed in range(5):
        F, C = _train_central(*moons(0.0, seed=seed).subset("train"), seed)
        for j, angle in enumerate((15.0, 30.0, 45.0)):
            accs[seed, j] = accuracy(F, C, *moons(angle, seed=100 + seed).subset("all"))
    mean = accs.mean(axis=0)
    assert mean[0] > mean[1] > mean[2]
