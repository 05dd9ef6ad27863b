import numpy as np
import pytest

from magnet import tensor as T
from magnet.errors import ConfigError, ShapeError
from magnet.gradcheck import check_gradients
from magnet.metrics import combined_loss, one_hot
from magnet.model import (
    AttentionGate,
    Bottleneck,
    ClassificationHead,
    DecoderBlock,
    EncoderBlock,
    MAGNet,
    ModelConfig,
    SeparableConv,
    _Init,
    count_parameters,
    reduction_ratio,
    separable_conv,
    separable_conv_parameters,
    standard_conv_parameters,
)
from magnet.tensor import Tensor


def init(seed=0):
    return _Init(seed, np.float64)


def brute_count(module):
    """Independent oracle: walk every parameter element one by one."""
    total = 0
    for _, t in module.named_parameters():
        for _ in np.nditer(t.data):
            total += 1
    return total


def small_config(size=16, **kw):
    base = dict(input_height=size, input_width=size, encoder_channels=[4, 8], bottleneck_channels=8,
                head_hidden=[6], attention_reduction=2)
    base.update(kw)
    return ModelConfig(**base)


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


class TestSeparableConv:
    def test_parameter_count(self):
        assert SeparableConv(16, 32, 3, init()).num_parameters() == 656
        assert standard_conv_parameters(3, 16, 32) == 4608
        assert 656 / 4608 == pytest.approx(1 / 32 + 1 / 9, abs=1e-15)

    def test_zero_input(self):
        assert np.all(separable_conv(Tensor(np.zeros((1, 6, 6, 3))), 5, 4).data == 0)

    def test_shape(self):
        assert separable_conv(rand((2, 6, 6, 3)), 3, 7).shape == (2, 6, 6, 7)

    def test_unsupported_kernel(self):
        with pytest.raises(ConfigError):
            SeparableConv(2, 2, 7, init())

    def test_equals_composed_standard_conv(self):
        # separable == standard conv whose kernel is depthwise (x) pointwise
        layer = SeparableConv(3, 4, 3, init(1))
        x = rand((1, 5, 5, 3), 2)
        k = layer.depthwise.data[..., None] * layer.pointwise.data[0, 0][None, None]
        np.testing.assert_allclose(layer(x).data, T.conv2d(x, Tensor(k)).data, rtol=1e-12, atol=1e-12)


class TestReductionRatio:
    def test_examples(self):
        assert reduction_ratio(3, 16, 32) == pytest.approx(0.142361, abs=1e-6)
        assert reduction_ratio(5, 7, 100) == pytest.approx(0.05, abs=1e-15)
        assert reduction_ratio(3, 8, 10 ** 6) == pytest.approx(1 / 9, abs=1e-5)

    def test_pointwise_is_undefined(self):
        with pytest.raises(ConfigError):
            reduction_ratio(1, 4, 4)

    @pytest.mark.parametrize("f", [3, 5])
    def test_measured_ratio_is_closed_form(self, f):
        for cin in (1, 3, 16):
            for cout in (1, 7, 32, 64):
                measured = SeparableConv(cin, cout, f, init()).num_parameters() / standard_conv_parameters(f, cin, cout)
                assert measured == pytest.approx(1 / cout + 1 / f ** 2, rel=1e-14)


class TestEncoder:
    def test_shapes(self):
        features, pooled = EncoderBlock(1, 32, init())(rand((1, 64, 64, 1)))
        assert features.shape == (1, 64, 64, 32) and pooled.shape == (1, 32, 32, 32)

    def test_zero_input(self):
        features, pooled = EncoderBlock(2, 4, init())(Tensor(np.zeros((1, 8, 8, 2))))
        assert np.all(features.data == 0) and np.all(pooled.data == 0)

    def test_parameter_count(self):
        block = EncoderBlock(1, 64, init())
        assert brute_count(block) == 611 == count_parameters(block).total

    def test_odd_dims(self):
        with pytest.raises(ShapeError):
            EncoderBlock(1, 2, init())(rand((1, 5, 6, 1)))


class TestBottleneck:
    def test_shape(self):
        assert Bottleneck(256, 512, init())(Tensor(np.ones((1, 4, 4, 256)))).shape == (1, 4, 4, 512)

    def test_zero_input(self):
        assert np.all(Bottleneck(3, 5, init())(Tensor(np.zeros((1, 4, 4, 3)))).data == 0)

    @pytest.mark.parametrize("cin,cout", [(1, 1), (3, 5), (16, 32), (64, 128)])
    def test_parameter_count(self, cin, cout):
        assert brute_count(Bottleneck(cin, cout, init())) == 35 * cin + 3 * cin * cout + 6 * cout


class TestAttentionGate:
    def test_codomain(self):
        gate = AttentionGate(6, 2, init())
        a = gate.coefficients(rand((2, 5, 5, 6), 1), rand((2, 5, 5, 6), 2)).data
        assert np.all((a > 0) & (a < 1))

    def test_saturation(self):
        gate = AttentionGate(4, 2, init())
        skip, g = rand((1, 3, 3, 4), 1), rand((1, 3, 3, 4), 2)
        gate.psi_bias.data[:] = 60.0
        np.testing.assert_allclose(gate(skip, g).data, skip.data, rtol=1e-12)
        gate.psi_bias.data[:] = -60.0
        assert np.max(np.abs(gate(skip, g).data)) < 1e-20

    def test_never_amplifies(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            c = int(rng.integers(1, 9))
            gate = AttentionGate(c, int(rng.integers(1, 4)), init(seed))
            skip = Tensor(rng.standard_normal((2, 4, 4, c)) * rng.uniform(0.1, 10))
            out = gate(skip, Tensor(rng.standard_normal((2, 4, 4, c)) * rng.uniform(0.1, 10)))
            assert np.all(np.abs(out.data) <= np.abs(skip.data))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            AttentionGate(4, 2, init())(rand((1, 4, 4, 4)), rand((1, 2, 2, 4)))


class TestDecoder:
    def test_shape(self):
        out = DecoderBlock(128, 64, 64, 2, init())(rand((1, 16, 16, 128)), rand((1, 32, 32, 64)))
        assert out.shape == (1, 32, 32, 64)

    def test_zero_input(self):
        out = DecoderBlock(4, 3, 3, 2, init())(Tensor(np.zeros((1, 2, 2, 4))), Tensor(np.zeros((1, 4, 4, 3))))
        assert np.all(out.data == 0)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            DecoderBlock(4, 3, 3, 2, init())(rand((1, 2, 2, 4)), rand((1, 2, 2, 3)))


class TestClassificationHead:
    def test_rows_sum_to_one(self):
        p = ClassificationHead(8, [5, 4], 3, init())(rand((4, 3, 3, 8))).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_final_layer_is_uniform(self):
        head = ClassificationHead(8, [5], 3, init())
        w, b = head.layers[-1]
        w.data[:] = 0
        b.data[:] = 0
        np.testing.assert_allclose(head(rand((2, 3, 3, 8))).data, 1 / 3, rtol=1e-15)

    def test_argmax_shift_invariant(self):
        head = ClassificationHead(8, [5], 3, init())
        x = rand((6, 3, 3, 8))
        before = head(x).data.argmax(axis=1)
        head.layers[-1][1].data += 123.0
        assert np.array_equal(head(x).data.argmax(axis=1), before)

    def test_dense_parameter_count(self):
        assert count_parameters(ClassificationHead(10, [], 3, init())).total == 33


class TestMAGNet:
    def test_default_forward_shapes(self):
        model = MAGNet(ModelConfig(), dtype=np.float32)
        with T.no_grad():
            mask, cls = model.forward(np.random.default_rng(0).random((2, 64, 64, 1)))
        assert mask.shape == (2, 64, 64, 1) and cls.shape == (2, 3)
        assert np.all((mask.data > 0) & (mask.data < 1))
        np.testing.assert_allclose(cls.data.sum(axis=1), 1.0, atol=1e-6)

    def test_identical_rows_identical_outputs(self):
        model = MAGNet(small_config(32))
        x = np.random.default_rng(1).random((1, 32, 32, 1))
        mask, cls = model.forward(np.concatenate([x, x]))
        assert np.array_equal(mask.data[0], mask.data[1]) and np.array_equal(cls.data[0], cls.data[1])
        again, _ = model.forward(np.concatenate([x, x]))
        assert np.array_equal(again.data, mask.data)

    def test_wrong_input_size(self):
        with pytest.raises(ShapeError):
            MAGNet(small_config(16)).forward(np.zeros((1, 32, 32, 1)))

    def test_same_seed_same_parameters(self):
        a, b = MAGNet(small_config(), seed=3), MAGNet(small_config(), seed=3)
        for (n1, t1), (n2, t2) in zip(a.named_parameters(), b.named_parameters()):
            assert n1 == n2 and np.array_equal(t1.data, t2.data)

    def test_parameter_names_unique_and_counted(self):
        model = MAGNet(small_config())
        names = [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        count = count_parameters(model)
        assert count.total == brute_count(model) == sum(count.blocks.values())

    def test_default_parameter_budget(self):
        total = count_parameters(MAGNet(ModelConfig(), dtype=np.float32)).total
        assert 5_200_000 <= total <= 5_600_000

    def test_all_separable_layers_obey_ratio(self):
        model = MAGNet(small_config())
        for _, layer in model.separable_layers():
            f, cin, cout = layer.kernel_size, layer.cin, layer.cout
            measured = layer.num_parameters() / standard_conv_parameters(f, cin, cout)
            assert layer.num_parameters() == separable_conv_parameters(f, cin, cout)
            assert measured == pytest.approx(1 / cout + 1 / f ** 2, rel=1e-14)

    @pytest.mark.parametrize("bad", [dict(input_height=18), dict(num_classes=1), dict(encoder_channels=[]),
                                     dict(seg_threshold=1.0), dict(head_hidden=[0])])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            small_config(**bad)

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="colour"):
            ModelConfig.from_dict({"colour": 1})

    def test_config_round_trip(self):
        cfg = small_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ----------------------------------------------------------------------
# gradient checks


def projected(out, seed=7):
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tensor_sum(T.mul(out, Tensor(r)))


def module_params(module):
    return [t for _, t in module.named_parameters()]


LAYER_CASES = {
    "separable_conv_3": lambda rng: (SeparableConv(3, 4, 3, _Init(rng.integers(1e9), np.float64)), (1, 6, 6, 3)),
    "separable_conv_5": lambda rng: (SeparableConv(2, 3, 5, _Init(rng.integers(1e9), np.float64)), (1, 6, 6, 2)),
    "encoder_block": lambda rng: (EncoderBlock(2, 3, _Init(rng.integers(1e9), np.float64)), (1, 6, 6, 2)),
    "bottleneck": lambda rng: (Bottleneck(3, 4, _Init(rng.integers(1e9), np.float64)), (1, 4, 4, 3)),
    "classification_head": lambda rng: (ClassificationHead(4, [5], 3, _Init(rng.integers(1e9), np.float64)),
                                        (2, 3, 3, 4)),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients(name):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        layer, shape = LAYER_CASES[name](rng)
        x = Tensor(rng.standard_normal(shape), requires_grad=True)

        def loss():
            out = layer(x)
            return projected(out[0] if isinstance(out, tuple) else out)

        err = check_gradients(loss, [x] + module_params(layer), eps=1e-5, max_entries=12, rng=rng)
        assert err < 1e-4, f"{name} seed {seed}: {err:.2e}"


def test_attention_gate_gradients():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        gate = AttentionGate(4, 2, _Init(seed, np.float64))
        skip = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
        g = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
        err = check_gradients(lambda: projected(gate(skip, g)), [skip, g] + module_params(gate), rng=rng)
        assert err < 1e-4, f"seed {seed}: {err:.2e}"


def test_decoder_gradients():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        block = DecoderBlock(3, 2, 3, 2, _Init(seed, np.float64))
        x = Tensor(rng.standard_normal((1, 2, 2, 3)), requires_grad=True)
        skip = Tensor(rng.standard_normal((1, 4, 4, 2)), requires_grad=True)
        err = check_gradients(lambda: projected(block(x, skip)), [x, skip] + module_params(block),
                              max_entries=12, rng=rng)
        assert err < 1e-4, f"seed {seed}: {err:.2e}"


def end_to_end_gradient_error(seed: int) -> float:
    """Worst relative error of d(loss)/d(parameter) on a 16x16 single-sample model."""
    rng = np.random.default_rng(seed)
    model = MAGNet(small_config(16), seed=seed, dtype=np.float64)
    image = rng.random((1, 16, 16, 1))
    mask = (rng.random((1, 16, 16, 1)) > 0.5).astype(float)
    label = one_hot([int(rng.integers(3))], 3)

    def loss():
        m, c = model.forward(image)
        return combined_loss(m, mask, c, label)

    return check_gradients(loss, module_params(model), eps=1e-5, max_entries=4, rng=rng)


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradients(seed):
    assert end_to_end_gradient_error(seed) < 1e-3
