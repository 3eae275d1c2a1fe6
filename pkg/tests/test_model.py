import numpy as np
import pytest

from dpcre.mathcore import RngState
from dpcre.model import (
    ClassifierHead,
    ContrastiveHead,
    EncoderParams,
    ModelState,
    classify,
    encode,
    flatten,
    grow_classifier,
    init_model,
    load_checkpoint,
    param_count,
    project,
    save_checkpoint,
    sgd_step,
    unflatten,
)


def build_model(layers, W1, b1, W2, b2, W3, b3):
    return ModelState(
        EncoderParams(tuple(layers)),
        ClassifierHead(np.asarray(W1, float), np.asarray(b1, float)),
        ContrastiveHead(
            np.asarray(W2, float), np.asarray(b2, float), np.asarray(W3, float), np.asarray(b3, float)
        ),
    )


def identity_2d_model(b3=(0.0, 0.0)):
    return build_model(
        [(np.eye(2), np.zeros(2))], np.eye(2), np.zeros(2), np.eye(2), np.zeros(2), np.eye(2), b3
    )


class TestEncode:
    def test_zero_network(self):
        m = build_model(
            [(np.zeros((3, 2)), np.zeros(3))],
            np.zeros((2, 3)), np.zeros(2),
            np.zeros((3, 3)), np.zeros(3), np.zeros((2, 3)), np.zeros(2),
        )
        assert np.array_equal(encode(m, np.array([4.0, -7.0])), np.zeros(3))

    def test_identity_layer(self):
        m = identity_2d_model()
        x = np.array([0.3, -0.9])
        assert np.array_equal(encode(m, x), x)

    def test_hand_two_layer(self):
        m = build_model(
            [(np.eye(2), np.zeros(2)), (np.array([[1.0, 1.0]]), np.zeros(1))],
            np.zeros((1, 1)), np.zeros(1),
            np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros(1),
        )
        assert np.array_equal(encode(m, np.array([-1.0, 2.0])), [2.0])

    def test_dim_mismatch(self):
        m = identity_2d_model()
        with pytest.raises(ValueError, match="input dim"):
            encode(m, np.zeros(3))


class TestClassify:
    def test_zero_weight_passes_bias(self):
        m = build_model(
            [(np.eye(2), np.zeros(2))],
            np.zeros((2, 2)), np.array([0.5, -0.5]),
            np.eye(2), np.zeros(2), np.eye(2), np.zeros(2),
        )
        for z in (np.zeros(2), np.array([3.0, 4.0])):
            assert np.array_equal(classify(m, z), [0.5, -0.5])

    def test_identity(self):
        m = identity_2d_model()
        z = np.array([1.25, -8.0])
        assert np.array_equal(classify(m, z), z)

    def test_hand_product(self):
        m = build_model(
            [(np.eye(2), np.zeros(2))],
            np.array([[2.0, 0.0], [0.0, 3.0]]), np.array([1.0, 1.0]),
            np.eye(2), np.zeros(2), np.eye(2), np.zeros(2),
        )
        assert np.array_equal(classify(m, np.array([1.0, 1.0])), [3.0, 4.0])


class TestProject:
    def test_constant_head_normalizes_to_itself(self):
        m = build_model(
            [(np.eye(2), np.zeros(2))],
            np.eye(2), np.zeros(2),
            np.eye(2), np.zeros(2), np.zeros((2, 2)), np.array([1.0, 0.0]),
        )
        assert np.array_equal(project(m, np.array([9.0, -2.0])), [1.0, 0.0])

    def test_normalization_by_five(self):
        m = build_model(
            [(np.eye(2), np.zeros(2))],
            np.eye(2), np.zeros(2),
            np.eye(2), np.zeros(2), np.zeros((2, 2)), np.array([3.0, 4.0]),
        )
        assert np.allclose(project(m, np.zeros(2)), [0.6, 0.8], atol=1e-15)

    def test_hand_pass_through_relu(self):
        m = identity_2d_model()
        assert np.array_equal(project(m, np.array([1.0, -1.0])), [1.0, 0.0])

    def test_zero_vector_passthrough(self):
        m = identity_2d_model()
        assert np.array_equal(project(m, np.zeros(2)), np.zeros(2))

    def test_unnormalized_toggle(self):
        m = build_model(
            [(np.eye(2), np.zeros(2))],
            np.eye(2), np.zeros(2),
            np.eye(2), np.zeros(2), np.zeros((2, 2)), np.array([3.0, 4.0]),
        )
        assert np.array_equal(project(m, np.zeros(2), normalize=False), [3.0, 4.0])

    def test_unit_norm_property(self):
        rng = RngState(88)
        m = init_model(6, (10,), 5, 4, 3, rng)
        m = unflatten(m, 0.5 * rng.substream("v").normal(param_count(m)))
        for i in range(30):
            z = rng.substream("z", i).normal(5)
            h = project(m, z)
            assert abs(np.linalg.norm(h) - 1.0) < 1e-10

    def test_purity(self):
        rng = RngState(3)
        m = init_model(4, (6,), 4, 3, 2, rng)
        x = rng.substream("x").normal(4)
        z1, z2 = encode(m, x), encode(m, x)
        assert np.array_equal(z1, z2)
        assert np.array_equal(classify(m, z1), classify(m, z1))
        assert np.array_equal(project(m, z1), project(m, z1))


class TestFlatten:
    def test_roundtrip_exact(self):
        m = init_model(5, (7, 6), 4, 3, 9, RngState(11))
        m2 = unflatten(m, flatten(m))
        assert np.array_equal(flatten(m), flatten(m2))

    def test_single_weight_difference(self):
        m = init_model(3, (4,), 3, 2, 2, RngState(1))
        v = flatten(m)
        v2 = v.copy()
        v2[17] += 1.0
        diff = np.flatnonzero(flatten(unflatten(m, v2)) != v)
        assert diff.tolist() == [17]

    def test_param_count_hand_check(self):
        # 4 -> 8 -> 4 encoder, 2-class head, contrastive head 4 -> 4 -> 2
        m = init_model(4, (8,), 4, 2, 2, RngState(0))
        expected = (8 * 4 + 8) + (4 * 8 + 4) + (2 * 4 + 2) + (4 * 4 + 4) + (2 * 4 + 2)
        assert param_count(m) == expected == flatten(m).size

    def test_unflatten_length_check(self):
        m = init_model(3, (4,), 3, 2, 2, RngState(1))
        with pytest.raises(ValueError, match="expected"):
            unflatten(m, np.zeros(param_count(m) + 1))


class TestSgdStep:
    def test_zero_gradient_no_change(self):
        m = init_model(3, (4,), 3, 2, 2, RngState(2))
        m2 = sgd_step(m, np.zeros(param_count(m)), 0.1)
        assert np.array_equal(flatten(m), flatten(m2))

    def test_definitional_update(self):
        m = init_model(2, (2,), 2, 2, 2, RngState(3))
        g = np.zeros(param_count(m))
        g[0] = 0.5
        m2 = sgd_step(m, g, 1.0)
        assert flatten(m2)[0] == flatten(m)[0] - 0.5
        assert np.array_equal(flatten(m2)[1:], flatten(m)[1:])

    def test_two_steps_add_for_constant_gradients(self):
        # pure parameter arithmetic: constant (linear-loss) gradients compose
        m = init_model(2, (3,), 2, 2, 2, RngState(4))
        rng = RngState(9)
        g1 = rng.substream(1).normal(param_count(m))
        g2 = rng.substream(2).normal(param_count(m))
        two = sgd_step(sgd_step(m, g1, 0.1), g2, 0.1)
        one = sgd_step(m, g1 + g2, 0.1)
        assert np.allclose(flatten(two), flatten(one), atol=1e-15)

    def test_nonfinite_gradient_rejected(self):
        m = init_model(2, (2,), 2, 2, 2, RngState(5))
        g = np.zeros(param_count(m))
        g[3] = np.nan
        with pytest.raises(FloatingPointError):
            sgd_step(m, g, 0.1)

    def test_snapshot_survives_steps(self):
        m = init_model(3, (5,), 4, 3, 3, RngState(6))
        snap = m.snapshot()
        frozen = flatten(snap).copy()
        rng = RngState(10)
        live = m
        for i in range(5):
            live = sgd_step(live, rng.substream(i).normal(param_count(m)), 0.05)
        assert np.array_equal(flatten(snap), frozen)
        assert not np.array_equal(flatten(live), frozen)


class TestGrowClassifier:
    def test_old_rows_bit_equal(self):
        m = init_model(3, (4,), 3, 2, 2, RngState(7))
        grown = grow_classifier(m, 3, RngState(8))
        assert grown.num_classes == 5
        assert np.array_equal(grown.cls_head.W1[:2], m.cls_head.W1)
        assert np.array_equal(grown.cls_head.b1[:2], m.cls_head.b1)
        assert np.array_equal(grown.cls_head.b1[2:], np.zeros(3))

    def test_encoder_untouched(self):
        m = init_model(3, (4,), 3, 2, 2, RngState(7))
        grown = grow_classifier(m, 1, RngState(8))
        assert grown.encoder is m.encoder
        assert grown.con_head is m.con_head


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = init_model(5, (6,), 4, 3, 7, RngState(12))
        m = unflatten(m, RngState(13).normal(param_count(m)))
        path = tmp_path / "model.json"
        save_checkpoint(m, path, seed_provenance="seed=12/13")
        loaded = load_checkpoint(path)
        assert np.array_equal(flatten(loaded), flatten(m))
        assert loaded.num_classes == 7


class TestValidation:
    def test_layer_chain_checked(self):
        with pytest.raises(ValueError, match="chain"):
            EncoderParams(((np.zeros((3, 2)), np.zeros(3)), (np.zeros((2, 4)), np.zeros(2))))

    def test_head_dims_checked(self):
        with pytest.raises(ValueError, match="classifier head"):
            ModelState(
                EncoderParams(((np.eye(2), np.zeros(2)),)),
                ClassifierHead(np.zeros((2, 3)), np.zeros(2)),
                ContrastiveHead(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2)),
            )

    def test_arrays_read_only(self):
        m = init_model(2, (2,), 2, 2, 2, RngState(1))
        with pytest.raises(ValueError):
            m.cls_head.W1[0, 0] = 99.0
