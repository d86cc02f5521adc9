import numpy as np
import pytest

from percsal import data, model, tensor_core as tc
from percsal.model import (LayerSet, Network, NetworkSpec, SpecError,
                           TrainingDiverged, WeightFormatError, act, bn, conv,
                           dense, flat, forward_arrays, forward_full,
                           init_network, load_network, load_weights, minivgg,
                           minivgg_detector, pool, randomize_from, save_weights,
                           train)
from percsal.tensor_core import Tensor


class TestNetworkSpec:
    def test_minivgg_has_five_relus(self):
        spec = minivgg(4)
        assert spec.relu_count == 5
        # ordinals enumerate exactly the relu layers, in order
        positions = [p for p, ld in enumerate(spec.layers) if ld.kind == "relu"]
        assert spec.relu_index == dict(enumerate(positions))

    def test_single_label_must_end_in_matching_linear(self):
        with pytest.raises(SpecError):
            NetworkSpec(layers=(flat(), dense(3)), input_shape=(3, 32, 32),
                        num_classes=4)

    def test_detector_ends_in_per_class_conv(self):
        spec = minivgg_detector(4)
        assert spec.layers[-1].kind == "conv2d"
        assert spec.layers[-1].out_channels == 4
        assert spec.layer_shapes[-1] == (4, 8, 8)

    def test_json_round_trip(self):
        spec = minivgg(3, input_hw=32, width=8)
        again = NetworkSpec.from_dict(spec.to_dict())
        assert again == spec

    def test_rejects_odd_pool_input(self):
        with pytest.raises(SpecError):
            NetworkSpec(layers=(conv(4), act(), pool(), pool(), pool(), pool(),
                                pool(), pool(), flat(), dense(2)),
                        input_shape=(3, 32, 32), num_classes=2)


class TestLayerSet:
    def test_range_and_bool(self):
        ls = LayerSet.of_range(1, 4)
        assert tuple(ls) == (1, 2, 3)
        assert ls
        assert not LayerSet.empty()

    def test_validate_against_network(self):
        spec = minivgg(4)
        LayerSet.of_range(0, 5).validate_against(spec)
        with pytest.raises(SpecError):
            LayerSet.of_range(3, 6).validate_against(spec)


class TestInitAndForward:
    def test_zero_weight_network_gives_zero_logits_and_activations(self):
        spec = minivgg(4, width=8)
        net = init_network(spec, 0)
        zeroed = {k: Tensor.zeros(v.shape) if k[1] in ("weight", "bias", "gamma", "beta")
                  else v for k, v in net.params.items()}
        # keep batchnorm var=1/mean=0 so the normalization stays well-defined
        for (pos, name), v in net.params.items():
            if name in ("mean", "var"):
                zeroed[(pos, name)] = v
        net0 = Network(spec=spec, params=zeroed)
        fp = forward_full(net0, np.zeros((3, 32, 32)))
        assert np.all(fp.logits.array == 0.0)
        for a in fp.activations.values():
            assert np.all(a.array == 0.0)

    def test_single_linear_layer_equals_linear_op(self):
        spec = NetworkSpec(layers=(flat(), dense(2)), input_shape=(1, 2, 2),
                           num_classes=2)
        net = init_network(spec, 3)
        x = np.arange(4.0).reshape(1, 2, 2)
        fp = forward_full(net, x)
        expected = tc.linear(Tensor(x.reshape(-1)),
                             net.params[(1, "weight")], net.params[(1, "bias")])
        np.testing.assert_array_equal(fp.logits.array, expected.array)

    def test_activations_are_non_negative(self, tiny_net):
        rng = np.random.default_rng(0)
        fp = forward_full(tiny_net, rng.random((3, 32, 32)))
        for a in fp.activations.values():
            assert np.all(a.array >= 0.0)

    def test_forward_reproducible(self, tiny_net):
        x = np.random.default_rng(1).random((3, 32, 32))
        a = forward_arrays(tiny_net, x)
        b = forward_arrays(tiny_net, x)
        assert np.array_equal(a, b)
        fp = forward_full(tiny_net, x)
        assert np.array_equal(fp.logits.array, a)

    def test_rejects_wrong_input_shape(self, tiny_net):
        with pytest.raises(tc.ShapeError):
            forward_arrays(tiny_net, np.zeros((1, 32, 32)))

    def test_detector_runs_on_other_sizes(self, tiny_detector):
        x = np.random.default_rng(2).random((3, 48, 48))
        logits = forward_arrays(tiny_detector, x)
        assert logits.shape == (4, 12, 12)


class TestTrain:
    def test_linearly_separable_toy_reaches_full_accuracy(self):
        spec = NetworkSpec(layers=(flat(), dense(2)), input_shape=(1, 2, 2),
                           num_classes=2)

        class Item:
            def __init__(self, image, label):
                self.image = Tensor(image)
                self.label = label

        rng = np.random.default_rng(0)
        items = []
        for _ in range(40):
            v = rng.normal(size=(1, 2, 2))
            items.append(Item(v + 1.0, 0))
            items.append(Item(v - 1.0, 1))
        net = train(spec, items, epochs=50, lr=0.05, seed=0)
        assert net.train_accuracy == 1.0

    def test_zero_epochs_returns_fresh_init(self):
        spec = minivgg(4, width=8)
        ds = data.gen_shapes(4, 32, 4, 0.0, seed=0)
        net = train(spec, ds, epochs=0, lr=0.01, seed=9)
        fresh = init_network(spec, 9)
        for k in net.params:
            assert np.array_equal(net.params[k].array, fresh.params[k].array)

    def test_same_seed_is_bit_identical(self):
        spec = minivgg(4, width=8)
        ds = data.gen_shapes(12, 32, 4, 0.0, seed=0)
        a = train(spec, ds, epochs=2, lr=0.01, seed=5)
        b = train(spec, ds, epochs=2, lr=0.01, seed=5)
        for k in a.params:
            assert np.array_equal(a.params[k].array, b.params[k].array)

    def test_divergence_aborts(self):
        spec = minivgg(4, width=8)
        ds = data.gen_shapes(8, 32, 4, 0.0, seed=0)
        with pytest.raises(TrainingDiverged):
            train(spec, ds, epochs=8, lr=500.0, seed=0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(minivgg(4), [], epochs=1, lr=0.01, seed=0)

    def test_trained_net_fits_training_set(self, tiny_net):
        assert tiny_net.train_accuracy >= 0.8


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path, tiny_net):
        path = tmp_path / "net.wts"
        save_weights(tiny_net, path)
        again = load_weights(tiny_net.spec, path)
        for k in tiny_net.params:
            assert np.array_equal(tiny_net.params[k].array, again.params[k].array)
        assert again.train_accuracy == tiny_net.train_accuracy

    def test_load_network_uses_stored_spec(self, tmp_path, tiny_net):
        path = tmp_path / "net.wts"
        save_weights(tiny_net, path)
        again = load_network(path)
        assert again.spec == tiny_net.spec

    def test_wrong_spec_rejected(self, tmp_path, tiny_net):
        path = tmp_path / "net.wts"
        save_weights(tiny_net, path)
        with pytest.raises(WeightFormatError):
            load_weights(minivgg(4, width=8), path)

    def test_truncated_file_rejected(self, tmp_path, tiny_net):
        path = tmp_path / "net.wts"
        save_weights(tiny_net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-1])
        with pytest.raises(WeightFormatError):
            load_weights(tiny_net.spec, path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "net.wts"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(WeightFormatError):
            load_network(path)


class TestRandomizeFrom:
    def test_past_last_layer_is_identity(self, tiny_net):
        n = randomize_from(tiny_net, len(tiny_net.spec.layers), seed=1)
        for k in tiny_net.params:
            assert np.array_equal(n.params[k].array, tiny_net.params[k].array)

    def test_position_zero_equals_fresh_init(self, tiny_net):
        n = randomize_from(tiny_net, 0, seed=11)
        fresh = init_network(tiny_net.spec, 11)
        for k in n.params:
            assert np.array_equal(n.params[k].array, fresh.params[k].array)

    def test_earlier_layers_untouched(self, tiny_net):
        cut = tiny_net.spec.relu_index[2]  # randomize from the third relu on
        n = randomize_from(tiny_net, cut, seed=3)
        changed = 0
        for (pos, name), v in tiny_net.params.items():
            if pos < cut:
                assert np.array_equal(n.params[(pos, name)].array, v.array)
            elif name == "weight":
                changed += int(not np.array_equal(n.params[(pos, name)].array, v.array))
        assert changed >= 2
