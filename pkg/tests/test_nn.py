import numpy as np
import pytest

from ltdistill.autodiff import Tensor
from ltdistill.nn import (
    MODE_CAPTURE,
    MODE_INFER,
    MODE_TRAIN,
    BatchNormLayer,
    CheckpointFormatError,
    ConvNetSpec,
    build_model,
    checkpoint_bytes,
    forward,
    load_checkpoint,
    save_checkpoint,
)


def spec228():
    return ConvNetSpec(depth=2, width=6, in_shape=(3, 8, 8), num_classes=2)


class TestSpecAndBuild:
    def test_depth3_has_three_bn_layers(self):
        spec = ConvNetSpec(depth=3, width=64, in_shape=(3, 16, 16), num_classes=10)
        model = build_model(spec, 0)
        assert model.num_bn_layers == 3

    def test_same_seed_bitwise_identical(self):
        a = build_model(spec228(), 5)
        b = build_model(spec228(), 5)
        assert a.state_bytes() == b.state_bytes()
        c = build_model(spec228(), 6)
        assert a.state_bytes() != c.state_bytes()

    @pytest.mark.parametrize(
        "bad",
        [
            dict(depth=0, width=8, in_shape=(3, 8, 8), num_classes=2),
            dict(depth=2, width=0, in_shape=(3, 8, 8), num_classes=2),
            dict(depth=2, width=8, in_shape=(3, 8, 8), num_classes=1),
            dict(depth=2, width=8, in_shape=(3, 8, 8), num_classes=2, bn_eps=0.0),
            dict(depth=2, width=8, in_shape=(3, 0, 8), num_classes=2),
            dict(depth=4, width=8, in_shape=(3, 8, 8), num_classes=2),  # 8 / 2^4 < 1
        ],
    )
    def test_invalid_specs_rejected(self, bad):
        with pytest.raises(ValueError):
            build_model(ConvNetSpec(**bad), 0)

    def test_bn_running_stats_start_at_identity(self):
        model = build_model(spec228(), 0)
        for bn in model.bns:
            assert np.array_equal(bn.running_mean, np.zeros(6, dtype=np.float32))
            assert np.array_equal(bn.running_var, np.ones(6, dtype=np.float32))


class TestForwardModes:
    def test_shape_mismatch_and_empty_batch(self, rng):
        model = build_model(spec228(), 0)
        with pytest.raises(ValueError, match="shape"):
            model.forward(Tensor(rng.random((2, 3, 9, 9), dtype=np.float32)), MODE_TRAIN)
        with pytest.raises(ValueError, match="empty"):
            model.forward(
                Tensor(np.empty((0, 3, 8, 8), dtype=np.float32)), MODE_CAPTURE
            )
        with pytest.raises(ValueError, match="mode"):
            model.forward(Tensor(rng.random((2, 3, 8, 8), dtype=np.float32)), "warmup")

    def test_frozen_capture_never_mutates_state(self, rng):
        model = build_model(spec228(), 1)
        x = rng.random((4, 3, 8, 8), dtype=np.float32)
        before = model.state_bytes()
        model.forward(Tensor(x), MODE_CAPTURE)
        assert model.state_bytes() == before
        model.forward(Tensor(x), MODE_INFER)
        assert model.state_bytes() == before
        model.forward(Tensor(x), MODE_TRAIN)
        assert model.state_bytes() != before  # running stats moved

    def test_forward_deterministic(self, rng):
        model = build_model(spec228(), 1)
        x = rng.random((4, 3, 8, 8), dtype=np.float32)
        a = model.forward(Tensor(x), MODE_CAPTURE)
        b = model.forward(Tensor(x), MODE_CAPTURE)
        assert np.array_equal(a.logits.data, b.logits.data)
        for (m1, v1), (m2, v2) in zip(a.batch_stats(), b.batch_stats()):
            assert np.array_equal(m1, m2) and np.array_equal(v1, v2)

    def test_constant_channel_input_normalizes_to_zero(self):
        bn = BatchNormLayer(
            np.ones(3, np.float32), np.zeros(3, np.float32),
            np.zeros(3, np.float32), np.ones(3, np.float32), 1e-5,
        )
        x = Tensor(np.full((4, 3, 5, 5), 0.7, dtype=np.float32))
        out, _, var = bn.forward(x, MODE_TRAIN)
        assert np.array_equal(var.data, np.zeros(3, dtype=np.float32))
        assert np.array_equal(out.data, np.zeros((4, 3, 5, 5), dtype=np.float32))

    def test_inference_at_stored_mean_gives_zero(self, rng):
        mean = rng.normal(size=3).astype(np.float32)
        bn = BatchNormLayer(
            np.ones(3, np.float32), np.zeros(3, np.float32),
            mean, np.ones(3, np.float32), 1e-5,
        )
        x = Tensor(np.broadcast_to(mean[None, :, None, None], (2, 3, 4, 4)).copy())
        out, _, _ = bn.forward(x, MODE_INFER)
        assert np.abs(out.data).max() < 1e-7

    def test_captured_stats_match_direct_recompute(self, rng):
        model = build_model(spec228(), 2)
        x = rng.random((5, 3, 8, 8), dtype=np.float32)
        res = model.forward(Tensor(x), MODE_CAPTURE)
        for bn_in, (m, v) in zip(res.bn_inputs, res.batch_stats()):
            acts = bn_in.data
            assert np.abs(acts.mean(axis=(0, 2, 3)) - m).max() < 1e-5
            assert np.abs(acts.var(axis=(0, 2, 3)) - v).max() < 1e-5

    def test_spec_level_forward_returns_stat_pairs(self, rng):
        model = build_model(spec228(), 2)
        logits, stats = forward(model, rng.random((3, 3, 8, 8), dtype=np.float32), MODE_INFER)
        assert logits.shape == (3, 2)
        assert len(stats) == 2 and all(m.shape == (6,) for m, _ in stats)


class TestCheckpointIO:
    def test_round_trip_is_byte_identical(self, tmp_path, rng):
        model = build_model(spec228(), 3)
        model.forward(Tensor(rng.random((4, 3, 8, 8), dtype=np.float32)), MODE_TRAIN)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, meta={"role": "observer"})
        loaded, heads, meta = load_checkpoint(path)
        assert heads is None and meta == {"role": "observer"}
        assert loaded.state_bytes() == model.state_bytes()
        assert checkpoint_bytes(loaded, None, meta) == checkpoint_bytes(model, None, meta)

    def test_bad_magic_rejected(self, tmp_path):
        model = build_model(spec228(), 3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        model = build_model(spec228(), 3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)
