import numpy as np
import pytest

from conftest import toy_chain, toy_resnet
from softprune import ops
from softprune.errors import ConfigurationError, DimensionError, StateError
from softprune.network import ModelSpec, backward, build_model, enumerate_prunable, forward


class TestModelSpec:
    @pytest.mark.parametrize("depth", [8, 20, 32, 56, 110])
    def test_valid_resnet_depths(self, depth):
        spec = ModelSpec(architecture="resnet-basic", depth=depth)
        assert spec.blocks_per_stage == (depth - 2) // 6
        assert spec.num_layers == depth

    @pytest.mark.parametrize("depth", [None, 7, 18, 21])
    def test_invalid_resnet_depths(self, depth):
        with pytest.raises(ConfigurationError):
            ModelSpec(architecture="resnet-basic", depth=depth)

    def test_unknown_architecture(self):
        with pytest.raises(ConfigurationError, match="plain-chain"):
            ModelSpec(architecture="vgg")

    def test_chain_lengths_must_agree(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(widths=(4, 4), strides=(1,))

    def test_dict_round_trip(self):
        spec = ModelSpec(architecture="resnet-basic", depth=20, prune_blocks="first")
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestBuild:
    def test_same_seed_same_weights(self):
        a, b = toy_chain(seed=5), toy_chain(seed=5)
        for k, v in a.state_arrays().items():
            np.testing.assert_array_equal(v, b.state_arrays()[k])

    def test_resnet20_layout(self):
        model = build_model(ModelSpec(architecture="resnet-basic", depth=20, input_shape=(3, 33, 33)))
        ids = [layer.layer_id for layer in model.conv_layers()]
        assert ids[0] == "stem"
        assert sum(1 for i in ids if i.endswith("shortcut")) == 2
        assert len(ids) == 19 + 2
        assert not model.layer("s1.b1.conv2").compactable
        assert model.layer("s1.b1.conv1").compactable
        assert not model.layer("s2.b1.shortcut").prunable

    def test_prune_blocks_mask(self):
        model = toy_resnet(prune_blocks="first", prune_stem=False)
        prunable = {lid for lid, _ in enumerate_prunable(model)}
        assert prunable == {"s1.b1.conv1", "s2.b1.conv1", "s3.b1.conv1"}

    def test_non_integer_extent_rejected(self):
        with pytest.raises(ConfigurationError):
            toy_resnet(input_shape=(3, 8, 8))


class TestForwardBackward:
    def test_logit_shape(self, rng):
        model = toy_chain()
        x = rng.standard_normal((5, 1, 13, 13)).astype(np.float32)
        assert forward(model, x).shape == (5, 10)

    def test_wrong_input_shape(self):
        with pytest.raises(DimensionError):
            forward(toy_chain(), np.zeros((1, 3, 13, 13), np.float32))

    def test_eval_forward_is_pure(self, rng):
        model = toy_resnet().eval()
        x = rng.standard_normal((4, 3, 9, 9)).astype(np.float32)
        before = {k: v.copy() for k, v in model.buffers().items()}
        np.testing.assert_array_equal(forward(model, x), forward(model, x))
        for k, v in model.buffers().items():
            np.testing.assert_array_equal(v, before[k])

    def test_backward_requires_train_mode(self, rng):
        model = toy_chain().eval()
        with pytest.raises(StateError):
            backward(model, np.zeros((2, 1, 13, 13), np.float32), np.array([0, 1]))

    @pytest.mark.parametrize("maker", [toy_chain, toy_resnet])
    def test_gradients_match_finite_differences(self, maker, rng):
        kwargs = {"input_shape": (1, 7, 7)} if maker is toy_chain else {"input_shape": (2, 5, 5)}
        if maker is toy_chain:
            kwargs.update(widths=(3, 4), strides=(1, 2))
        else:
            kwargs.update(stage_widths=(2, 3, 3))
        model = maker(dtype=np.float64, seed=2, **kwargs)
        x = rng.standard_normal((3, *model.spec.input_shape))
        y = np.array([0, 1, 2])
        _, grads = backward(model, x, y)
        params = model.params()
        names = list(params)

        def loss(*_):
            logits = model._run(x, training=True)
            return ops.softmax_cross_entropy(logits, y)[0]

        # running stats move on every call but do not affect train-mode output
        err = ops.grad_check(loss, [params[n] for n in names], [grads[n] for n in names], epsilon=1e-6)
        assert err < 1e-4

    def test_zero_filter_receives_gradient(self, rng):
        model = toy_chain(seed=1)
        layer = model.layer("conv2")
        layer.filters[3] = 0
        layer.bn_beta[3] = 0
        x = rng.standard_normal((8, 1, 13, 13)).astype(np.float32)
        _, grads = backward(model, x, np.arange(8) % 10)
        assert np.abs(grads["conv2.weight"][3]).sum() > 0

    def test_parameter_count(self):
        model = toy_chain(widths=(2,), strides=(1,), input_shape=(1, 5, 5))
        # conv 2*1*9 + bn 2*2 + fc 10*2 + 10
        assert model.parameter_count() == 18 + 4 + 20 + 10

    def test_astype_copies(self):
        model = toy_chain()
        m64 = model.astype(np.float64)
        assert m64.layer("conv1").filters.dtype == np.float64
        assert model.layer("conv1").filters.dtype == np.float32
