import math

import numpy as np
import pytest

from percsal import saliency
from percsal.model import LayerSet
from percsal.saliency import (SaliencyMap, blur_array, build, gaussian_blur,
                              gaussian_kernel, guided_map, load_map, normalize01,
                              raw_map, save_map, write_pgm)
from percsal.tensor_core import ShapeError, Tensor

from oracles import gauss_kernel_2d_ref, raw_map_ref


class TestRawMap:
    def test_identical_images_give_zero_map(self):
        x = np.random.default_rng(0).random((3, 8, 8))
        np.testing.assert_array_equal(raw_map(x, x).array, np.zeros((8, 8)))

    def test_single_channel_delta(self):
        x = np.zeros((3, 4, 4))
        xp = x.copy()
        xp[1, 2, 3] = 0.6
        m = raw_map(x, xp).array
        assert m[2, 3] == pytest.approx(0.36 / 3, abs=1e-15)
        assert np.count_nonzero(m) == 1

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, xp = rng.random((3, 6, 6)), rng.random((3, 6, 6))
        np.testing.assert_allclose(raw_map(x, xp).array, raw_map_ref(x, xp),
                                   atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            raw_map(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestNormalize01:
    def test_linear_rescale(self):
        np.testing.assert_allclose(normalize01(np.array([[0.0, 2.0, 4.0]])).array,
                                   [[0.0, 0.5, 1.0]])

    def test_constant_map_becomes_zeros(self):
        np.testing.assert_array_equal(normalize01(np.full((3, 3), 7.0)).array,
                                      np.zeros((3, 3)))

    def test_output_range(self):
        rng = np.random.default_rng(2)
        m = normalize01(rng.random((5, 5)) * 13 - 4).array
        assert m.min() == 0.0 and m.max() == 1.0

    def test_argmax_preserved(self):
        rng = np.random.default_rng(3)
        raw = rng.random((6, 6))
        assert np.argmax(normalize01(raw).array) == np.argmax(raw)


class TestGaussianBlur:
    def test_sigma_zero_is_identity(self):
        rng = np.random.default_rng(4)
        m = rng.random((5, 7))
        np.testing.assert_array_equal(gaussian_blur(m, 0.0).array, m)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            gaussian_blur(np.zeros((3, 3)), -1.0)

    def test_impulse_response_matches_analytic_kernel(self):
        m = np.zeros((9, 9))
        m[4, 4] = 1.0
        out = gaussian_blur(m, 1.0).array
        k2 = gauss_kernel_2d_ref(1.0)
        assert out[4, 4] == pytest.approx(k2[3, 3], abs=1e-15)
        np.testing.assert_allclose(out[1:8, 1:8], k2, atol=1e-15)
        assert out.sum() == pytest.approx(1.0, abs=1e-9)

    def test_border_impulse_loses_mass_with_zero_padding(self):
        m = np.zeros((9, 9))
        m[0, 0] = 1.0
        assert gaussian_blur(m, 1.5).array.sum() < 1.0

    def test_uniform_map_interior_exceeds_border(self):
        out = gaussian_blur(np.ones((11, 11)), 1.0).array
        assert out[5, 5] > out[0, 5]
        assert out[5, 5] > out[5, 0]

    def test_kernel_radius_and_normalization(self):
        for sigma in (0.5, 1.0, 2.5):
            k = gaussian_kernel(sigma)
            assert len(k) == 2 * math.ceil(3 * sigma) + 1
            assert k.sum() == pytest.approx(1.0, rel=1e-12)

    def test_nonnegative_input_stays_nonnegative(self):
        rng = np.random.default_rng(5)
        out = gaussian_blur(rng.random((8, 8)), 2.0).array
        assert np.all(out >= 0)


class TestGuidedMap:
    def test_zero_gradient_gives_zero_map(self, tiny_net):
        from percsal.model import Network
        from percsal.tensor_core import Tensor as T
        zeroed = dict(tiny_net.params)
        for (pos, name), v in tiny_net.params.items():
            if name in ("weight", "bias", "gamma", "beta"):
                zeroed[(pos, name)] = T.zeros(v.shape)
        dead = Network(spec=tiny_net.spec, params=zeroed)
        raw = np.random.default_rng(6).random((32, 32))
        out = guided_map(raw, np.random.default_rng(7).random((3, 32, 32)), dead, 0)
        np.testing.assert_array_equal(out.array, np.zeros((32, 32)))

    def test_multiplier_is_normalized_gradient(self, tiny_net, eval_samples):
        s = eval_samples[0]
        raw = np.random.default_rng(8).random((32, 32))
        out = guided_map(raw, s.image, tiny_net, s.label).array
        ratio = np.where(raw > 0, out / raw, 0.0)
        assert ratio.max() == pytest.approx(1.0, rel=1e-9)
        assert np.all(ratio >= 0) and np.all(ratio <= 1.0 + 1e-12)

    def test_elementwise_against_direct_computation(self, tiny_net, eval_samples):
        import percsal.tensor_core as tc
        from percsal.model import forward_full
        s = eval_samples[0]
        raw = np.random.default_rng(9).random((32, 32))
        fp = forward_full(tiny_net, s.image)
        grads = fp.graph.backward(tc.pick(fp.logits, s.label))
        g = np.abs(grads[fp.input.node_id].array).mean(axis=0)
        expected = raw * (g / g.max())
        np.testing.assert_allclose(guided_map(raw, s.image, tiny_net, s.label).array,
                                   expected, atol=1e-15)


class TestBuild:
    def test_plain_build_equals_raw_map(self, tiny_net, eval_samples):
        s = eval_samples[0]
        xp = np.clip(s.image.array + 0.01, 0, 1)
        smap = build(s.image, xp, tiny_net, s.label, sigma=0.0)
        np.testing.assert_array_equal(smap.array, raw_map(s.image, xp).array)
        assert smap.sigma == 0.0 and not smap.guided

    def test_shape_preserved_for_any_sigma(self, tiny_net, eval_samples):
        s = eval_samples[0]
        xp = np.clip(s.image.array + 0.02, 0, 1)
        for sigma in (0.0, 1.0, 4.0, 20.0):
            smap = build(s.image, xp, tiny_net, s.label, sigma=sigma)
            assert smap.array.shape == (32, 32)

    def test_provenance_recorded(self, tiny_net, eval_samples):
        s = eval_samples[0]
        ls = LayerSet.of_range(1, 4)
        smap = build(s.image, s.image, tiny_net, s.label, sigma=2.0, guided=True,
                     normalize_first=True, layer_set=ls)
        assert smap.layer_set == ls and smap.guided and smap.sigma == 2.0

    def test_full_scale_saturation_constants(self):
        assert saliency.FULL_SCALE_LOCALIZATION_SIGMA == 20.0
        assert saliency.FULL_SCALE_INSERTION_SIGMA == 4.0

    def test_negative_values_rejected(self):
        with pytest.raises(ValueError):
            SaliencyMap(values=Tensor([[-1.0, 0.0]]), sigma=0.0, guided=False)


class TestPersistence:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(10)
        smap = SaliencyMap(values=Tensor(rng.random((16, 16))), sigma=2.5,
                           guided=True, layer_set=LayerSet.of_range(0, 2))
        save_map(smap, tmp_path / "m")
        again = load_map(tmp_path / "m")
        assert np.array_equal(again.array, smap.array)
        assert again.sigma == 2.5 and again.guided
        assert again.layer_set == smap.layer_set
        assert (tmp_path / "m.pgm").exists()

    def test_pgm_is_16bit_max_scaled(self, tmp_path):
        m = np.array([[0.0, 0.5], [0.25, 1.0]])
        write_pgm(m, tmp_path / "x.pgm")
        blob = (tmp_path / "x.pgm").read_bytes()
        assert blob.startswith(b"P5\n2 2\n65535\n")
        vals = np.frombuffer(blob[len(b"P5\n2 2\n65535\n"):], dtype=">u2")
        np.testing.assert_array_equal(vals, [0, 32768, 16384, 65535])
