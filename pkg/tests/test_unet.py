import numpy as np
import pytest

from lesionprior.unet import (
    UNetConfig,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

TINY = UNetConfig(in_channels=2, n_classes=3, levels=2, base_width=4,
                  groups=2, dropout=0.0)


class TestConfig:
    def test_widths_double(self):
        cfg = UNetConfig()
        assert cfg.widths() == [8, 16, 32]
        assert cfg.spatial_divisor == 4

    def test_groups_must_divide(self):
        with pytest.raises(ValueError):
            UNetConfig(base_width=6, groups=4)


class TestShapes:
    def test_fused_input_shape(self):
        cfg = UNetConfig(in_channels=13, n_classes=4, levels=3, base_width=8)
        params = init_params(cfg, seed=0)
        x = np.zeros((1, 13, 32, 32, 32), np.float32)
        logits, _ = forward(cfg, params, x)
        assert logits.shape == (1, 4, 32, 32, 32)

    def test_baseline_input_shape(self):
        cfg = UNetConfig(in_channels=4, n_classes=4, levels=3, base_width=8)
        params = init_params(cfg, seed=0)
        x = np.zeros((1, 4, 16, 16, 16), np.float32)
        logits, _ = forward(cfg, params, x)
        assert logits.shape == (1, 4, 16, 16, 16)

    def test_indivisible_dims_rejected(self):
        params = init_params(TINY, seed=0)
        with pytest.raises(ValueError, match="divisible"):
            forward(TINY, params, np.zeros((1, 2, 7, 8, 8), np.float32))

    def test_wrong_channels_rejected(self):
        params = init_params(TINY, seed=0)
        with pytest.raises(ValueError, match="input"):
            forward(TINY, params, np.zeros((1, 3, 8, 8, 8), np.float32))


class TestInit:
    def test_same_seed_identical(self):
        a = init_params(TINY, seed=42)
        b = init_params(TINY, seed=42)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_different_seeds_differ(self):
        a = init_params(TINY, seed=1)
        b = init_params(TINY, seed=2)
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_he_variance(self):
        cfg = UNetConfig(in_channels=16, n_classes=2, levels=1, base_width=64,
                         groups=4)
        params = init_params(cfg, seed=0)
        w = params["enc0.conv1.w"]  # fan_in = 16*27 = 432, 64 filters
        fan_in = 16 * 27
        assert abs(w.var() - 2.0 / fan_in) < 0.2 * 2.0 / fan_in

    def test_gn_init(self):
        params = init_params(TINY, seed=0)
        assert np.all(params["enc0.gn1.g"] == 1)
        assert np.all(params["enc0.gn1.b"] == 0)


class TestGradients:
    def test_end_to_end_spot_check(self, rng):
        params = init_params(TINY, seed=3, dtype=np.float64)
        x = rng.normal(size=(1, 2, 8, 8, 8))
        w = rng.normal(size=(1, 3, 8, 8, 8))

        logits, cache = forward(TINY, params, x)
        grads = backward(TINY, params, cache, w)

        eps = 1e-5
        checked = 0
        for name in ("enc0.conv1.w", "enc1.gn2.g", "dec0.conv2.w", "head.w",
                     "enc0.conv2.b", "dec0.gn1.b"):
            arr = params[name]
            for flat_idx in rng.choice(arr.size, size=2, replace=False):
                idx = np.unravel_index(flat_idx, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + eps
                fp = float((forward(TINY, params, x)[0] * w).sum())
                arr[idx] = orig - eps
                fm = float((forward(TINY, params, x)[0] * w).sum())
                arr[idx] = orig
                fd = (fp - fm) / (2 * eps)
                an = grads[name][idx]
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom < 1e-3, name
                checked += 1
        assert checked == 12

    def test_input_gradient_shape(self, rng):
        params = init_params(TINY, seed=0, dtype=np.float64)
        x = rng.normal(size=(2, 2, 8, 8, 8))
        logits, cache = forward(TINY, params, x)
        grads = backward(TINY, params, cache, np.ones_like(logits))
        assert set(grads) == set(params)
        for k in grads:
            assert grads[k].shape == params[k].shape


class TestDeterminism:
    def test_eval_forward_rng_independent(self, rng):
        cfg = UNetConfig(in_channels=2, n_classes=3, levels=2, base_width=4,
                         groups=2, dropout=0.3)
        params = init_params(cfg, seed=0)
        x = rng.normal(size=(1, 2, 8, 8, 8)).astype(np.float32)
        y1, _ = forward(cfg, params, x, train=False)
        y2, _ = forward(cfg, params, x, train=False,
                        rng=np.random.default_rng(99))
        assert np.array_equal(y1, y2)

    def test_train_forward_uses_dropout(self, rng):
        cfg = UNetConfig(in_channels=2, n_classes=3, levels=2, base_width=4,
                         groups=2, dropout=0.5)
        params = init_params(cfg, seed=0)
        x = rng.normal(size=(1, 2, 8, 8, 8)).astype(np.float32)
        y1, _ = forward(cfg, params, x, train=True, rng=np.random.default_rng(1))
        y2, _ = forward(cfg, params, x, train=False)
        assert not np.array_equal(y1, y2)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        params = init_params(TINY, seed=11)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, TINY, params)
        cfg2, params2 = load_checkpoint(path)
        assert cfg2 == TINY
        assert list(params2) == list(params)
        for k in params:
            assert params2[k].dtype == np.float32
            assert params[k].tobytes() == params2[k].tobytes()

    def test_rejects_float64(self, tmp_path):
        params = init_params(TINY, seed=0, dtype=np.float64)
        with pytest.raises(TypeError):
            save_checkpoint(tmp_path / "bad.ckpt", TINY, params)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTANET!" + b"\x00" * 64)
        with pytest.raises(IOError, match="magic"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        params = init_params(TINY, seed=0)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, TINY, params)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(IOError, match="truncated"):
            load_checkpoint(path)
