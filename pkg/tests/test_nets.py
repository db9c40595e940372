"""MLP heads, sphere initialization, the hypernetwork, and the decoders."""

import numpy as np
import pytest

from fieldsim import autodiff as ad
from fieldsim.nets import (FieldHead, HyperNet, IntensityNet, Mlp, RgbDecoder,
                           sphere_init_)


class TestMlp:
    def test_forward_matches_manual_two_layer(self, rng):
        mlp = Mlp("m", [3, 4, 2], rng)
        x = rng.normal(size=(5, 3))
        out = mlp.forward(ad.constant(x)).value
        h = np.maximum(x @ mlp.weights[0] + mlp.biases[0], 0.0)
        np.testing.assert_allclose(out, h @ mlp.weights[1] + mlp.biases[1],
                                   atol=1e-12)

    def test_param_names(self, rng):
        mlp = Mlp("enc", [3, 8, 8, 2], rng)
        assert set(mlp.params()) == {"enc.w0", "enc.b0", "enc.w1", "enc.b1",
                                     "enc.w2", "enc.b2"}

    def test_binding_dict_overrides_stored_weights(self, rng):
        mlp = Mlp("m", [2, 3, 1], rng)
        x = rng.normal(size=(4, 2))
        base = mlp.forward(ad.constant(x)).value
        p = {"m.w0": ad.constant(np.zeros_like(mlp.weights[0]))}
        zeroed = mlp.forward(ad.constant(x), p).value
        assert not np.allclose(base, zeroed)
        expect = np.maximum(mlp.biases[0], 0) @ mlp.weights[1] + mlp.biases[1]
        np.testing.assert_allclose(zeroed, np.tile(expect, (4, 1)))

    def test_sigmoid_final_bounds_output(self, rng):
        mlp = Mlp("m", [2, 4, 1], rng, final="sigmoid")
        out = mlp.forward(ad.constant(rng.normal(size=(100, 2)) * 10)).value
        assert np.all((out > 0) & (out < 1))

    def test_zero_final_layer(self, rng):
        mlp = Mlp("m", [2, 4, 3], rng).zero_final_layer()
        out = mlp.forward(ad.constant(rng.normal(size=(6, 2)))).value
        np.testing.assert_array_equal(out, np.zeros((6, 3)))


class TestSphereInit:
    def test_sdf_sign_pattern(self, rng):
        """After sphere init the first output behaves like |x| - r."""
        feat_in = 8
        mlp = Mlp("geo", [feat_in + 3, 32, 32, 16], rng)
        sphere_init_(mlp, rng, radius=0.5)
        feats = np.zeros((1, feat_in))

        def s(x):
            xin = np.concatenate([feats, np.asarray(x)[None, :]], axis=1)
            return float(mlp.forward(ad.constant(xin)).value[0, 0])

        assert s([0.0, 0.0, 0.0]) < 0          # center inside
        assert s([0.9, 0.0, 0.0]) > 0          # outside along an axis
        assert s([0.0, 0.9, 0.0]) > 0
        assert abs(s([0.5, 0.0, 0.0])) < 0.25  # near zero at the radius

    def test_monotone_along_ray(self, rng):
        mlp = Mlp("geo", [11, 32, 32, 16], rng)
        sphere_init_(mlp, rng, radius=0.5)
        ts = np.linspace(0.0, 0.95, 20)
        d = np.array([1.0, 1.0, 1.0]) / np.sqrt(3)
        xin = np.concatenate([np.zeros((20, 8)), ts[:, None] * d], axis=1)
        s = mlp.forward(ad.constant(xin)).value[:, 0]
        assert np.all(np.diff(s) > 0)


class TestFieldHead:
    def test_geometry_output_shapes(self, rng):
        head = FieldHead("bg", feat_in=8, rng=rng)
        feats = ad.constant(rng.normal(size=(10, 8)) * 1e-4)
        s, h = head.geometry(feats, rng.uniform(-1, 1, size=(10, 3)))
        assert s.value.shape == (10, 1)
        assert h.value.shape == (10, head.geo_hidden_out)

    def test_descriptor_shape(self, rng):
        head = FieldHead("bg", feat_in=8, rng=rng, n_f=8)
        h = ad.constant(rng.normal(size=(10, head.geo_hidden_out)))
        d = rng.normal(size=(10, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        f = head.descriptor(h, d)
        assert f.value.shape == (10, 8)

    def test_too_few_channels_raises(self, rng):
        with pytest.raises(ValueError, match="at least 3"):
            FieldHead("bg", feat_in=8, rng=rng, n_f=2)

    def test_param_namespacing(self, rng):
        head = FieldHead("actor", feat_in=4, rng=rng)
        assert all(k.startswith("actor.") for k in head.params())


class TestHyperNet:
    def test_fresh_net_emits_zero_tables(self, rng):
        hn = HyperNet("hn", z_dim=8, levels=2, table_size=64, feature_dim=2,
                      rng=rng)
        for t in hn.grid_tables(rng.normal(size=8)):
            assert t.value.shape == (64, 2)
            np.testing.assert_array_equal(t.value, 0.0)

    def test_equal_latents_give_identical_tables(self, rng):
        hn = HyperNet("hn", z_dim=8, levels=2, table_size=64, feature_dim=2,
                      rng=rng)
        # give the zero head real weights so the map is nontrivial
        hn.net.weights[-1] = rng.normal(size=hn.net.weights[-1].shape)
        z = rng.normal(size=8)
        a = hn.grid_tables(z.copy())
        b = hn.grid_tables(z.copy())
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.value, tb.value)

    def test_distinct_latents_differ(self, rng):
        hn = HyperNet("hn", z_dim=8, levels=1, table_size=32, feature_dim=2,
                      rng=rng)
        hn.net.weights[-1] = rng.normal(size=hn.net.weights[-1].shape)
        a = hn.grid_tables(rng.normal(size=8))[0].value
        b = hn.grid_tables(rng.normal(size=8))[0].value
        assert np.abs(a - b).max() > 0

    def test_latent_dim_mismatch_raises(self, rng):
        hn = HyperNet("hn", z_dim=8, levels=1, table_size=32, feature_dim=2,
                      rng=rng)
        with pytest.raises(ValueError, match="latent dim"):
            hn.grid_tables(np.zeros(5))

    def test_gradients_reach_latent(self, rng):
        hn = HyperNet("hn", z_dim=4, levels=1, table_size=16, feature_dim=2,
                      rng=rng)
        hn.net.weights[-1] = rng.normal(size=hn.net.weights[-1].shape)
        tape = ad.Tape()
        z = tape.leaf(rng.normal(size=4), "z")
        p = {"z": z}
        tables = hn.grid_tables(z, p)
        tape.backward(ad.tsum(ad.square(tables[0])))
        assert z.grad is not None and np.abs(z.grad).max() > 0


class TestRgbDecoder:
    def test_output_shape_with_upsample(self, rng):
        dec = RgbDecoder("dec", n_f=8, rng=rng, upsample=2)
        out = dec.forward(ad.constant(rng.normal(size=(8, 12, 16)))).value
        assert out.shape == (3, 24, 32)

    def test_output_shape_without_upsample(self, rng):
        dec = RgbDecoder("dec", n_f=8, rng=rng, upsample=1)
        out = dec.forward(ad.constant(rng.normal(size=(8, 12, 16)))).value
        assert out.shape == (3, 12, 16)

    def test_output_in_unit_interval(self, rng):
        dec = RgbDecoder("dec", n_f=4, rng=rng)
        out = dec.forward(ad.constant(rng.normal(size=(4, 6, 6)) * 5)).value
        assert np.all((out > 0) & (out < 1))

    def test_bad_upsample_raises(self, rng):
        with pytest.raises(ValueError, match="upsample"):
            RgbDecoder("dec", n_f=4, rng=rng, upsample=3)


class TestIntensityNet:
    def test_fresh_net_predicts_half(self, rng):
        net = IntensityNet("inten", n_f=8, rng=rng)
        out = net.forward(ad.constant(rng.normal(size=(20, 8)))).value
        np.testing.assert_allclose(out, 0.5, atol=1e-12)

    def test_output_bounded(self, rng):
        net = IntensityNet("inten", n_f=8, rng=rng)
        net.net.weights[-1] = rng.normal(size=net.net.weights[-1].shape) * 10
        out = net.forward(ad.constant(rng.normal(size=(50, 8)))).value
        assert np.all((out > 0) & (out < 1))
