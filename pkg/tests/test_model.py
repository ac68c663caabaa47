import numpy as np
import pytest

from dualinc.checkpoint import load_checkpoint, model_arrays, model_meta, restore_model, save_checkpoint
from dualinc.engine import backward, sum_all
from dualinc.errors import ConfigError, DataError, ShapeError
from dualinc.model import PRESETS, Model, init_model, preset


@pytest.fixture(scope="module")
def tiny():
    return Model(preset("tiny"), 5, 2, seed=3)


def images(n, side=16, seed=0):
    return np.random.default_rng(seed).random((n, 3, side, side)).astype(np.float32)


def test_same_seed_same_parameters():
    a, b = init_model(preset("tiny"), 4, 2, 7), init_model(preset("tiny"), 4, 2, 7)
    for (ka, ta), (kb, tb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert ka == kb and ta.data.tobytes() == tb.data.tobytes()


def test_different_seed_differs():
    a, b = Model(preset("tiny"), 4, 2, 0), Model(preset("tiny"), 4, 2, 1)
    assert not np.array_equal(a.backbone[0].weight.data, b.backbone[0].weight.data)


def test_cifar_preset_feature_map():
    m = Model(PRESETS["cifar"], 50, 4, seed=0)
    out = m.forward(images(2, side=32), "eval")
    assert out.features.shape == (2, 64, 8, 8)
    assert out.image_logits.shape == (2, 50)
    assert out.orientation_logits.shape == (2, 4)


def test_head_shapes(tiny):
    out = tiny.forward(images(6), "eval")
    assert out.image_logits.shape == (6, 5)
    assert out.orientation_logits.shape == (6, 2)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("resnet")


def test_wrong_input_shape(tiny):
    with pytest.raises(ShapeError):
        tiny.forward(np.zeros((1, 3, 12, 12), np.float32), "eval")


def test_eval_is_stateless():
    m = Model(preset("tiny"), 3, 2, seed=1)
    x = images(4)
    before = {k: s.running_mean.copy() for k, s in m.batchnorm_states().items()}
    a = m.predict_logits(x)
    b = m.predict_logits(x)
    assert a.tobytes() == b.tobytes()
    for k, s in m.batchnorm_states().items():
        np.testing.assert_array_equal(s.running_mean, before[k])


def test_eval_rows_independent():
    m = Model(preset("tiny"), 3, 2, seed=1)
    x = images(4)
    np.testing.assert_allclose(m.predict_logits(x)[1:2], m.predict_logits(x[1:2]), rtol=1e-5, atol=1e-6)


def test_train_mode_updates_running_stats():
    m = Model(preset("tiny"), 3, 2, seed=1)
    m.forward(images(4), "train", with_orientation=False)
    assert not np.allclose(m.backbone[0].bn.running_mean, 0)
    assert np.allclose(m.orientation_blocks[0].bn.running_mean, 0)


def test_both_heads_reach_backbone():
    m = Model(preset("tiny"), 3, 2, seed=2)
    out = m.forward(images(4), "train")
    backward(sum_all(out.orientation_logits))
    assert m.backbone[0].weight.grad is not None
    assert m.image_weight.grad is None


class TestExpand:
    def test_preserves_old_columns(self):
        m = Model(preset("tiny"), 50, 2, seed=0)
        w, b = m.image_weight.data.copy(), m.image_bias.data.copy()
        m.expand_image_head(10)
        assert m.class_count == 60
        assert m.image_weight.data[:, :50].tobytes() == w.tobytes()
        assert m.image_bias.data[:50].tobytes() == b.tobytes()

    def test_old_logits_unchanged(self):
        m = Model(preset("tiny"), 4, 2, seed=0)
        x = images(3)
        before = m.predict_logits(x)
        m.expand_image_head(2)
        after = m.predict_logits(x)
        assert after[:, :4].tobytes() == before.tobytes()

    def test_one_at_a_time(self):
        m = Model(preset("tiny"), 50, 2, seed=0)
        for _ in range(50):
            m.expand_image_head(1)
        assert m.class_count == 100

    def test_orientation_head_fixed(self):
        m = Model(preset("tiny"), 4, 3, seed=0)
        m.expand_image_head(4)
        assert m.orientation_weight.shape[1] == 3

    def test_zero_is_error(self):
        with pytest.raises(ConfigError):
            Model(preset("tiny"), 4, 2, seed=0).expand_image_head(0)


class TestSnapshot:
    def test_matches_model_then_isolated(self):
        m = Model(preset("tiny"), 4, 2, seed=5)
        x = images(3)
        snap = m.snapshot()
        np.testing.assert_array_equal(snap.predict_logits(x), m.predict_logits(x))
        m.backbone[0].weight.data += 1.0
        m.backbone[0].bn.running_mean += 1.0
        m.expand_image_head(2)
        assert snap.class_count == 4
        assert not np.allclose(snap.predict_logits(x), m.predict_logits(x)[:, :4])

    def test_read_only(self):
        snap = Model(preset("tiny"), 4, 2, seed=5).snapshot()
        with pytest.raises(ValueError):
            snap._weight[0, 0] = 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = Model(preset("tiny"), 4, 2, seed=9)
        m.forward(images(4), "train")
        m.expand_image_head(2)
        save_checkpoint(tmp_path / "m.ckpt", model_arrays(m), model_meta(m))
        arrays, meta = load_checkpoint(tmp_path / "m.ckpt")
        r = restore_model(arrays, meta)
        x = images(3)
        assert r.predict_logits(x).tobytes() == m.predict_logits(x).tobytes()
        assert r.class_count == 6

    def test_byte_stable(self, tmp_path):
        m = Model(preset("tiny"), 4, 2, seed=9)
        save_checkpoint(tmp_path / "a", model_arrays(m), {"k": [1, 2]})
        save_checkpoint(tmp_path / "b", model_arrays(m), {"k": [1, 2]})
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "x")

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "nope")
