import numpy as np
import pytest

from duospec import tensor as T
from duospec.layers import (BatchNorm2d, Conv2d, ModalityBatchNorm, Module,
                            ProjectionHead)
from duospec.tensor import ShapeError


class TestBatchNorm:
    def test_eval_identity_with_unit_stats(self):
        bn = BatchNorm2d(3)  # gamma 1, beta 0, running mean 0, var 1
        x = T.Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
        out = bn(x, training=False)
        # identity up to the epsilon stabilizer: x / sqrt(1 + 1e-5)
        assert np.abs(out.data - x.data).max() < 1e-4
        assert not np.array_equal(out.data, x.data)  # the stabilizer is real

    def test_zero_gamma_makes_channel_constant_beta(self):
        bn = BatchNorm2d(2)
        bn.gamma.data[0, 0] = 0.0
        bn.beta.data[0, 0] = 0.7
        x = T.Tensor(np.random.default_rng(1).standard_normal((2, 2, 4, 4)))
        out = bn(x, training=True)
        assert np.allclose(out.data[:, 0], 0.7)
        assert out.data[:, 1].std() > 0

    def test_train_mode_normalizes_and_updates_running_stats(self):
        bn = BatchNorm2d(2, momentum=0.1)
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.standard_normal((4, 2, 8, 8)) * 3 + 1)
        out = bn(x, training=True)
        normalized = (out.data - bn.beta.data) / bn.gamma.data
        assert np.abs(normalized.mean(axis=(0, 2, 3))).max() < 1e-10
        batch_mean = x.data.mean(axis=(0, 2, 3))
        assert np.allclose(bn.running_mean, 0.1 * batch_mean)

    def test_eval_mode_does_not_touch_running_stats(self):
        bn = BatchNorm2d(2)
        before = bn.running_mean.copy(), bn.running_var.copy()
        bn(T.Tensor(np.random.default_rng(3).standard_normal((2, 2, 4, 4))),
           training=False)
        assert np.array_equal(bn.running_mean, before[0])
        assert np.array_equal(bn.running_var, before[1])

    def test_single_element_batch_rejected_in_train_mode(self):
        bn = BatchNorm2d(2)
        with pytest.raises(ShapeError, match="zero variance"):
            bn(T.Tensor(np.ones((1, 2, 1, 1))), training=True)

    def test_channel_count_checked(self):
        bn = BatchNorm2d(3)
        with pytest.raises(ShapeError):
            bn(T.Tensor(np.zeros((1, 2, 2, 2))), training=False)


class TestModalityBatchNorm:
    def test_slots_are_disjoint_storage(self):
        mbn = ModalityBatchNorm(2)
        x = T.Tensor(np.random.default_rng(4).standard_normal((2, 2, 4, 4)) + 5)
        mbn(x, "ir", training=True)
        assert np.array_equal(mbn.bn_eo.running_mean, np.zeros(2))
        assert not np.array_equal(mbn.bn_ir.running_mean, np.zeros(2))

    def test_unknown_modality(self):
        mbn = ModalityBatchNorm(2)
        with pytest.raises(ValueError, match="modality"):
            mbn(T.Tensor(np.zeros((2, 2, 2, 2))), "uv", training=False)

    def test_gamma_values_are_copies(self):
        mbn = ModalityBatchNorm(3)
        g = mbn.gamma_values("eo")
        g[0] = 99.0
        assert mbn.bn_eo.gamma.data[0, 0, 0, 0] == 1.0


class TestModuleRegistry:
    def test_named_parameters_cover_nested_children_and_lists(self):
        class Block(Module):
            def __init__(self, rng):
                super().__init__()
                self.conv = Conv2d(2, 2, 1, rng)
                self.heads = [ProjectionHead(2, 3, rng) for _ in range(2)]

        block = Block(np.random.default_rng(5))
        names = {name for name, _ in block.named_parameters()}
        assert "conv.weight" in names
        assert "heads.0.conv1.weight" in names and "heads.1.conv2.bias" in names

    def test_buffer_round_trip(self):
        bn = BatchNorm2d(2)
        snap = bn.buffer_snapshot()
        bn.running_mean += 3.0
        bn.restore_buffers(snap)
        assert np.array_equal(bn.running_mean, np.zeros(2))

    def test_state_arrays_round_trip(self):
        rng = np.random.default_rng(6)
        a, b = ProjectionHead(2, 3, rng), ProjectionHead(2, 3, rng)
        params, buffers = a.state_arrays()
        b.load_state_arrays(params, buffers)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_load_rejects_name_mismatch(self):
        rng = np.random.default_rng(7)
        head = ProjectionHead(2, 3, rng)
        params, buffers = head.state_arrays()
        del params["conv1.weight"]
        with pytest.raises(ValueError, match="name mismatch"):
            head.load_state_arrays(params, buffers)


class TestConvLayer:
    def test_kaiming_bound(self):
        rng = np.random.default_rng(8)
        conv = Conv2d(4, 8, 3, rng)
        bound = np.sqrt(6.0 / (4 * 9))
        assert np.abs(conv.weight.data).max() <= bound
        assert np.array_equal(conv.bias.data, np.zeros((1, 8, 1, 1)))

    def test_positive_channel_validation(self):
        with pytest.raises(ValueError):
            Conv2d(0, 4, 3, np.random.default_rng(9))
