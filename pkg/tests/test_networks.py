import numpy as np
import pytest

from fedadg import tensor as T
from fedadg.networks import (Classifier, Discriminator, DistributionGenerator, FeatureExtractor,
                             IncompatibleParameters, ParameterVector, Segment, decode_parameters,
                             encode_parameters, load_checkpoint, make_projection, one_hot,
                             sample_noise, save_checkpoint)
from fedadg.tensor import Tensor
from gradcheck import check_leaves


def test_zero_extractor_outputs_zero():
    F = FeatureExtractor(3, [5], 4)
    h = F(Tensor(np.random.default_rng(0).normal(size=(7, 3))))
    np.testing.assert_array_equal(h.data, np.zeros((7, 4)))


def test_identity_extractor():
    F = FeatureExtractor(3, [], 3)
    F.layers[0][0].data = np.eye(3)
    x = np.random.default_rng(1).normal(size=(5, 3))
    np.testing.assert_array_equal(F(Tensor(x)).data, x)


def test_extractor_output_shape_and_input_check():
    F = FeatureExtractor(2, [64], 32, np.random.default_rng(0))
    assert F(Tensor(np.ones((8, 2)))).shape == (8, 32)
    with pytest.raises(T.ShapeError):
        F(Tensor(np.ones((8, 3))))
    assert all(p.requires_grad for p in F.parameters())


def test_classifier_probabilities():
    C = Classifier(4, [], 3, np.random.default_rng(0))
    p = C.probs(Tensor(np.random.default_rng(1).normal(size=(6, 4)))).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_one_hot_rows():
    np.testing.assert_array_equal(one_hot(np.full(4, 2), 3), np.tile([0.0, 0.0, 1.0], (4, 1)))
    with pytest.raises(ValueError):
        one_hot(np.array([3]), 3)


def test_generator_zero_weights_and_shapes():
    G = DistributionGenerator(5, 3, 8)
    z = sample_noise(np.random.default_rng(0), 4, 5)
    out = G.generate(z, np.array([0, 1, 2, 2]))
    assert out.shape == (4, 8)
    np.testing.assert_array_equal(out.data, 0.0)
    with pytest.raises(ValueError):
        G.generate(z, np.array([0, 1, 2, 3]))


def test_generator_depends_on_label():
    G = DistributionGenerator(5, 3, 8, np.random.default_rng(3))
    z = sample_noise(np.random.default_rng(0), 4, 5)
    a = G.generate(z, np.zeros(4, dtype=int)).data
    b = G.generate(z, np.full(4, 2)).data
    assert not np.allclose(a, b)
    # fixed z: a deterministic function of (weights, y)
    np.testing.assert_array_equal(a, G.generate(z, np.zeros(4, dtype=int)).data)


def test_unconditional_generator_ignores_label():
    G = DistributionGenerator(5, 3, 8, np.random.default_rng(3), conditional=False)
    z = sample_noise(np.random.default_rng(0), 4, 5)
    np.testing.assert_array_equal(G.generate(z, np.zeros(4, dtype=int)).data,
                                  G.generate(z, np.full(4, 2)).data)


def test_discriminator_zero_weights_scores_half():
    D = Discriminator(make_projection(np.random.default_rng(0), 8, 4), 3)
    s = D.discriminate(Tensor(np.random.default_rng(1).normal(size=(5, 8))), np.array([0, 1, 2, 0, 1]))
    assert s.shape == (5, 1)
    np.testing.assert_array_equal(s.data, 0.5)


def test_discriminator_scores_in_open_interval():
    D = Discriminator(make_projection(np.random.default_rng(0), 8, 4), 3, np.random.default_rng(2))
    s = D.discriminate(Tensor(np.random.default_rng(1).normal(size=(50, 8))), np.arange(50) % 3).data
    assert np.all((s > 0) & (s < 1))


def test_projection_is_frozen():
    proj = make_projection(np.random.default_rng(0), 8, 4)
    D = Discriminator(proj, 3, np.random.default_rng(2))
    h = Tensor(np.random.default_rng(1).normal(size=(5, 8)), requires_grad=True)
    T.mean(D.discriminate(h, np.arange(5) % 3)).backward()
    assert h.grad is not None and np.any(h.grad != 0)
    assert not D.projection.flags.writeable
    names = [p.name for p in D.parameters()]
    assert all(n.startswith("w_d.") for n in names)
    assert not any(p.data is D.projection for p in D.parameters())
    np.testing.assert_array_equal(D.projection, proj)


def test_projection_preserves_squared_norm_on_average():
    rng = np.random.default_rng(5)
    d, k = 32, 16
    ratios = []
    for _ in range(1000):
        x = rng.normal(size=d)
        P = make_projection(rng, d, k)
        ratios.append(np.sum((x @ P) ** 2) / np.sum(x ** 2))
    assert abs(np.mean(ratios) - 1.0) < 0.05


def test_sample_noise_range_determinism_and_mean():
    z = sample_noise(np.random.default_rng(9), 1000, 100)
    assert z.min() >= 0.0 and z.max() < 1.0
    np.testing.assert_array_equal(z, sample_noise(np.random.default_rng(9), 1000, 100))
    assert abs(z.mean() - 0.5) < 0.01


@pytest.mark.parametrize("instance", range(20))
def test_component_gradients(instance):
    rng = np.random.default_rng(500 + instance)
    F = FeatureExtractor(3, [6], 5, rng)
    C = Classifier(5, [], 3, rng)
    G = DistributionGenerator(4, 3, 5, rng)
    D = Discriminator(make_projection(rng, 5, 3), 3, rng)
    x = Tensor(rng.normal(size=(4, 3)))
    y = rng.integers(0, 3, 4)
    z = sample_noise(rng, 4, 4)
    wts = Tensor(rng.normal(size=(4, 3)))
    assert check_leaves(lambda: T.sum(T.mul(C.probs(F(x)), wts)), F.parameters() + C.parameters()) < 1e-4
    assert check_leaves(lambda: T.mean(T.square(D.discriminate(G.generate(z, y), y))),
                        G.parameters() + D.parameters()) < 1e-4
    assert check_leaves(lambda: T.mean(D.discriminate(F(x), y)), F.parameters()) < 1e-4


def test_flatten_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    F = FeatureExtractor(2, [64], 32, rng)
    pv = F.flatten()
    assert len(pv) == sum(int(np.prod(s)) for _, s in pv.layout)
    assert pv.names == ["w_f.0.weight", "w_f.0.bias", "w_f.1.weight", "w_f.1.bias"]
    F2 = FeatureExtractor(2, [64], 32)
    F2.unflatten(pv)
    assert F2.flatten().equals(pv)
    # the vector is a copy: training F does not change pv
    F.layers[0][0].data = F.layers[0][0].data + 1.0
    assert F2.flatten().equals(pv)


def test_unflatten_rejects_renamed_segment():
    F = FeatureExtractor(2, [4], 3, np.random.default_rng(0))
    segs = list(F.flatten().segments)
    segs[0] = Segment("w_f.0.kernel", segs[0].shape, segs[0].values)
    with pytest.raises(IncompatibleParameters, match="format v1"):
        F.unflatten(ParameterVector(segs))


def test_parameter_vector_is_immutable():
    pv = FeatureExtractor(2, [4], 3, np.random.default_rng(0)).flatten()
    with pytest.raises(ValueError):
        pv.segments[0].values[0] = 1.0


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pv = FeatureExtractor(2, [4], 3, rng).flatten() + Classifier(3, [], 2, rng).flatten()
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, pv, seed=7, config_hash="abc")
    head, back = load_checkpoint(path)
    assert back.equals(pv)
    assert head["seed"] == 7 and head["config_hash"] == "abc" and head["format_version"] == 1
    raw = path.read_bytes()
    assert raw[:8] == b"FADGCKPT"
    # payload is little-endian float64 at the end of the file
    np.testing.assert_array_equal(np.frombuffer(raw[-8 * len(pv):], dtype="<f8"), pv.flat())


def test_checkpoint_rejects_bad_version():
    blob = bytearray(encode_parameters(FeatureExtractor(2, [], 2).flatten()))
    blob[8] = 9
    with pytest.raises(IncompatibleParameters, match="version"):
        decode_parameters(bytes(blob))
