import numpy as np
import pytest

from disentlab import autodiff as ad
from disentlab import losses as L
from disentlab.model import (
    CheckpointError,
    EncoderConfig,
    LinearProbe,
    ProbeConfig,
    ProjectionConfig,
    encode,
    init_params,
    load_checkpoint,
    probe_accuracy,
    probe_train,
    project,
    save_checkpoint,
    split_sub,
)

TINY_ENC = EncoderConfig(channels=(2, 3, 4), rep_dim=4, image_size=8)
TINY_PROJ = ProjectionConfig(head_count=2, out_dim=2, hidden_dim=3)


def _images(n=2, size=8, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, size, size, 3))


class TestEncoder:
    def test_shapes_and_determinism(self):
        p = init_params(EncoderConfig(), ProjectionConfig(), seed=3)
        x = _images(3, 64)
        r1, r2 = encode(p, x).data, encode(p, x).data
        assert r1.shape == (3, 64)
        assert np.array_equal(r1, r2)
        assert np.all(np.isfinite(r1))

    def test_init_deterministic_per_seed(self):
        a = init_params(TINY_ENC, TINY_PROJ, 5).arrays()
        b = init_params(TINY_ENC, TINY_PROJ, 5).arrays()
        c = init_params(TINY_ENC, TINY_PROJ, 6).arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["enc.fc.w"], c["enc.fc.w"])

    @pytest.mark.parametrize("arch", ["small-conv", "mlp"])
    def test_zero_final_layer(self, arch):
        enc = EncoderConfig(arch=arch, channels=(2, 3, 4), hidden=5, rep_dim=4, image_size=8)
        p = init_params(enc, TINY_PROJ, 0)
        last = "enc.fc.w" if arch == "small-conv" else "enc.fc1.w"
        p.tensors[last].data[:] = 0.0
        assert np.array_equal(encode(p, _images()).data, np.zeros((2, 4)))

    def test_wrong_image_size(self):
        p = init_params(TINY_ENC, TINY_PROJ, 0)
        with pytest.raises(ad.ShapeError, match="8, 8, 3"):
            encode(p, _images(2, 9))

    def test_odd_rep_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            EncoderConfig(rep_dim=7)

    def test_out_init_scales_only_final_layer(self):
        base = init_params(TINY_ENC, TINY_PROJ, 3).arrays()
        small = init_params(EncoderConfig(**{**TINY_ENC.__dict__, "out_init": 0.1}), TINY_PROJ, 3).arrays()
        for name, arr in base.items():
            expect = 0.1 * arr if name == "enc.fc.w" else arr
            np.testing.assert_allclose(small[name], expect, rtol=1e-15, atol=0)
        with pytest.raises(ValueError, match="out_init"):
            EncoderConfig(out_init=0.0)
        with pytest.raises(ValueError, match="odd"):
            EncoderConfig(kernel=2)

    def test_kernel_size_changes_conv_shape(self):
        p = init_params(EncoderConfig(**{**TINY_ENC.__dict__, "kernel": 5}), TINY_PROJ, 0)
        assert p["enc.conv0.w"].shape[:2] == (5, 5)
        assert encode(p, _images(2, 8)).shape == (2, TINY_ENC.rep_dim)

    @pytest.mark.parametrize("arch,heads", [("small-conv", 2), ("small-conv", 1), ("mlp", 2)])
    def test_pipeline_gradient_matches_finite_differences(self, arch, heads):
        enc = EncoderConfig(arch=arch, channels=(2, 3, 4), hidden=5, rep_dim=4, image_size=8)
        proj = ProjectionConfig(head_count=heads, out_dim=2, hidden_dim=3)
        p = init_params(enc, proj, 11)
        for t in p.tensors.values():
            # move biases off zero so relu kinks are not sitting on the grid
            if t.data.ndim == 1:
                t.data[:] = np.random.default_rng(1).normal(0, 0.1, t.data.shape)
        x = _images(2, 8, seed=4)

        def loss():
            z, _, _ = project(p, encode(p, x))
            return L.infomax(L.ContrastiveBatch.from_view_pairs(z, 0.5))

        grads = {t.name: g for t, g in ad.backward(loss()).items()}
        for name, t in p.tensors.items():
            orig = t.data

            def f(a, t=t):
                t.data = a
                return loss().item()

            fd = ad.finite_diff_grad(f, orig)
            t.data = orig
            assert ad.max_relative_error(grads[name], fd) < 1e-5, name


class TestProjection:
    def test_two_head_width(self):
        p = init_params(EncoderConfig(), ProjectionConfig(2, 8, 64), 0)
        z, z0, z1 = project(p, np.ones((5, 64)))
        assert z.shape == (5, 16) and z0.shape == (5, 8) and z1.shape == (5, 8)

    def test_one_head_concat_is_exact(self):
        p = init_params(EncoderConfig(), ProjectionConfig(1, 8, 64), 0)
        z, z0, z1 = project(p, np.random.default_rng(0).normal(size=(5, 64)))
        assert np.array_equal(np.concatenate([z0.data, z1.data], axis=1), z.data)

    def test_identity_heads(self):
        enc = EncoderConfig(rep_dim=8)
        p = init_params(enc, ProjectionConfig(2, 4, 4), 0)
        for h in range(2):
            p.tensors[f"head{h}.fc0.w"].data = np.eye(4)
            p.tensors[f"head{h}.fc1.w"].data = np.eye(4)
        r = np.random.default_rng(2).uniform(size=(3, 8))  # non-negative, so relu is the identity
        z, z0, z1 = project(p, r)
        assert np.array_equal(z0.data, r[:, :4]) and np.array_equal(z1.data, r[:, 4:])

    def test_width_mismatch(self):
        p = init_params(EncoderConfig(), ProjectionConfig(), 0)
        with pytest.raises(ad.ShapeError, match="width 64"):
            project(p, np.ones((2, 10)))

    def test_z0_loss_ignores_head1(self):
        p = init_params(TINY_ENC, TINY_PROJ, 2)
        _, z0, _ = project(p, encode(p, _images()))
        grads = {t.name: g for t, g in ad.backward(ad.sum(ad.square(z0))).items()}
        for name in ("head1.fc0.w", "head1.fc0.b", "head1.fc1.w", "head1.fc1.b"):
            assert name not in grads or not np.any(grads[name])


class TestSplit:
    def test_examples(self):
        a, b = split_sub(np.array([[1, 2, 3, 4]]), 2)
        assert a.tolist() == [[1, 2]] and b.tolist() == [[3, 4]]
        v = np.arange(12.0).reshape(2, 6)
        assert np.array_equal(np.concatenate(split_sub(v, 3), axis=1), v)
        assert split_sub(v, 1)[0] is v

    def test_indivisible(self):
        with pytest.raises(ValueError, match="divisible"):
            split_sub(np.ones((2, 5)), 2)

    def test_tensor_slices(self):
        t = ad.Tensor(np.arange(8.0).reshape(2, 4))
        s0, s1 = split_sub(t, 2)
        assert np.array_equal(s1.data, [[2, 3], [6, 7]])


class TestProbe:
    def test_separable_blobs(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(-3, 0.5, (100, 2)), rng.normal(3, 0.5, (100, 2))])
        y = np.repeat([0, 1], 100)
        probe = probe_train(x, y, 2)
        assert probe_accuracy(probe, x, y) == 1.0

    def test_permuted_labels_at_chance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4000, 16))
        y = rng.integers(0, 10, 4000)
        probe = probe_train(x[:2000], rng.permutation(y[:2000]), 10)
        assert abs(probe_accuracy(probe, x[2000:], y[2000:]) - 0.1) < 0.03

    def test_zero_embeddings_predict_majority(self):
        y = np.array([0] * 60 + [1] * 25 + [2] * 15)
        probe = probe_train(np.zeros((100, 4)), y, 3)
        assert probe_accuracy(probe, np.zeros((100, 4)), y) == pytest.approx(0.6)

    def test_label_range_checked(self):
        with pytest.raises(ValueError, match=r"\[0, 3\)"):
            probe_train(np.ones((4, 2)), np.array([0, 1, 2, 3]), 3)
        probe = LinearProbe(np.zeros((3, 2)), np.zeros(3))
        with pytest.raises(ValueError, match="3 classes"):
            probe_accuracy(probe, np.ones((2, 2)), np.array([0, 5]))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(300, 6)), rng.integers(0, 4, 300)
        a, b = probe_train(x, y, 4), probe_train(x, y, 4)
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)

    def test_normalize_flag(self):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(200, 3)), rng.integers(0, 2, 200)
        probe = probe_train(x, y, 2, ProbeConfig(normalize=True))
        scaled = probe.predict(10.0 * x)
        assert np.array_equal(scaled, probe.predict(x))

    def test_probe_leaves_params_untouched(self):
        p = init_params(TINY_ENC, TINY_PROJ, 0)
        before = {k: v.copy() for k, v in p.arrays().items()}
        r = encode(p, _images(20)).data
        probe_train(r, np.arange(20) % 3, 3)
        assert all(np.array_equal(before[k], v) for k, v in p.arrays().items())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_params(TINY_ENC, TINY_PROJ, 9)
        state = {"t": np.array(3.0), "m/enc.fc.w": np.ones((4, 4))}
        save_checkpoint(tmp_path / "a.dlck", p, state, {"note": "x", "perm": (1, 0)})
        q, s, meta = load_checkpoint(tmp_path / "a.dlck")
        assert q.encoder == p.encoder and q.projection == p.projection and q.seed == 9
        assert all(np.array_equal(q.arrays()[k], v) for k, v in p.arrays().items())
        assert np.array_equal(s["m/enc.fc.w"], state["m/enc.fc.w"]) and float(s["t"]) == 3.0
        assert meta == {"note": "x", "perm": [1, 0]}

    def test_byte_stable(self, tmp_path):
        p = init_params(TINY_ENC, TINY_PROJ, 9)
        save_checkpoint(tmp_path / "a.dlck", p)
        save_checkpoint(tmp_path / "b.dlck", p)
        assert (tmp_path / "a.dlck").read_bytes() == (tmp_path / "b.dlck").read_bytes()

    def test_corrupt(self, tmp_path):
        path = tmp_path / "a.dlck"
        save_checkpoint(path, init_params(TINY_ENC, TINY_PROJ, 0))
        raw = bytearray(path.read_bytes())
        raw[40] ^= 1
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)
        path.write_bytes(b"nope")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
