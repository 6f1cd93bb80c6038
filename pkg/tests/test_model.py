"""Model-level contracts: shapes, channel accounting, toggles, checkpoints."""

import itertools

import numpy as np
import pytest

from lesionseg.model import (CheckpointError, CrossLevelContextNet,
                             ModelConfig, instantiate_ablation)
from lesionseg.tensor import ShapeError, Tape, Tensor, backward, no_grad
from lesionseg.metrics import dice_loss

ALL_ROWS = list(itertools.product((0, 1), repeat=3))

SMALL = dict(width_factor=0.125, input_size=(32, 32))


def small_model(row=(1, 1, 1), seed=0, **extra):
    kw = dict(SMALL)
    kw.update(extra)
    return instantiate_ablation(row, seed=seed, **kw)


def rand_image(n=1, hw=(32, 32), seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((n, 1) + hw).astype(np.float32))


class TestForwardContracts:
    @pytest.mark.parametrize("row", ALL_ROWS)
    def test_output_shape_and_range(self, row):
        model = small_model(row)
        x = rand_image(2)
        with no_grad():
            y = model(x, "train")
        assert y.shape == (2, 1, 32, 32)
        assert np.all(y.data > 0.0) and np.all(y.data < 1.0)

    def test_full_resolution_shape(self):
        model = instantiate_ablation((1, 1, 1), width_factor=0.125)
        x = rand_image(1, (224, 176), seed=3)
        with no_grad():
            y = model(x, "eval")
        assert y.shape == (1, 1, 224, 176)

    def test_rejects_non_divisible_input(self):
        model = small_model()
        with pytest.raises(ShapeError):
            model(rand_image(1, (30, 32)))

    def test_rejects_multichannel_input(self):
        model = small_model()
        x = Tensor(np.zeros((1, 2, 32, 32), dtype=np.float32))
        with pytest.raises(ShapeError):
            model(x)

    def test_eval_mode_deterministic_wrt_batch(self):
        # eval mode uses running stats, so each sample's output must not
        # depend on what it is batched with
        model = small_model(seed=5)
        x = rand_image(2, seed=9)
        with no_grad():
            both = model(x, "eval")
            one = model(Tensor(x.data[:1].copy()), "eval")
        np.testing.assert_array_equal(both.data[:1], one.data)


class TestChannelAccounting:
    def test_prefusion_channels_nine_branches(self):
        cfg = ModelConfig(width_factor=0.25, input_size=(32, 32))
        model = CrossLevelContextNet(cfg, seed=0)
        with no_grad():
            model(rand_image())
        b = cfg.branch_channels
        assert cfg.branch_count() == 9
        assert model.last_prefusion_channels == 9 * b

    def test_prefusion_channels_without_clf(self):
        cfg = ModelConfig(width_factor=0.25, use_clf=False, input_size=(32, 32))
        model = CrossLevelContextNet(cfg, seed=0)
        with no_grad():
            model(rand_image())
        assert cfg.branch_count() == 5
        assert model.last_prefusion_channels == 5 * cfg.branch_channels

    def test_no_adapter_params_without_clf(self):
        model = small_model((1, 0, 1))
        names = list(model.store.params)
        assert not any("clf_adapter" in n for n in names)
        assert not any("clf_tap" in n for n in names)

    def test_no_lstm_params_without_inference(self):
        model = small_model((1, 1, 0))
        assert not any("lstm" in n for n in model.store.params)

    def test_level_width_doubling_and_cap(self):
        cfg = ModelConfig()
        assert cfg.widths == [32, 64, 128, 256]
        assert cfg.bottleneck_width == 256
        capped = ModelConfig(width_cap=128)
        assert capped.bottleneck_width == 128


class TestParameterMonotonicity:
    @pytest.mark.parametrize("toggle", range(3))
    def test_each_toggle_adds_parameters(self, toggle):
        for row in itertools.product((0, 1), repeat=2):
            off = list(row)
            off.insert(toggle, 0)
            on = list(row)
            on.insert(toggle, 1)
            n_off = small_model(tuple(off)).parameter_count()
            n_on = small_model(tuple(on)).parameter_count()
            assert n_on > n_off, (off, on)

    def test_seed_changes_weights_not_count(self):
        a = small_model(seed=0)
        b = small_model(seed=1)
        assert a.parameter_count() == b.parameter_count()
        k = "encoder.level0.conv1.kernel"
        assert not np.array_equal(a.store.params[k].data,
                                  b.store.params[k].data)


class TestGradientCoverage:
    @pytest.mark.parametrize("row", [(1, 1, 1), (0, 0, 0), (1, 0, 1)])
    def test_every_parameter_receives_gradient(self, row):
        model = small_model(row, seed=2)
        x = rand_image(2, seed=4)
        rng = np.random.default_rng(11)
        target = Tensor((rng.random((2, 1, 32, 32)) > 0.7)
                        .astype(np.float32))
        with Tape() as tape:
            pred = model(x, "train")
            loss = dice_loss(pred, target)
            backward(loss, tape)
        dead = [n for n, p in model.store.params.items()
                if p.grad is None or not np.any(p.grad)]
        assert dead == []


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = small_model(seed=7)
        x = rand_image(1, seed=7)
        with no_grad():
            before = model(x, "eval").data.copy()
        model.save_checkpoint(str(tmp_path / "ck"))
        loaded = CrossLevelContextNet.load_checkpoint(str(tmp_path / "ck"))
        with no_grad():
            after = loaded(x, "eval").data
        np.testing.assert_array_equal(before, after)
        assert loaded.config == model.config

    def test_roundtrip_preserves_toggles(self, tmp_path):
        model = small_model((1, 0, 0), seed=1)
        model.save_checkpoint(str(tmp_path / "ck"))
        loaded = CrossLevelContextNet.load_checkpoint(str(tmp_path / "ck"))
        assert loaded.config.use_clf is False
        assert loaded.config.use_inference is False

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            CrossLevelContextNet.load_checkpoint(str(tmp_path / "nope"))

    def test_name_mismatch_raises(self, tmp_path):
        model = small_model()
        d = tmp_path / "ck"
        model.save_checkpoint(str(d))
        manifest = d / "manifest.txt"
        text = manifest.read_text()
        text = text.replace("param.head.kernel", "param.head.kernel_typo", 1)
        manifest.write_text(text)
        with pytest.raises(CheckpointError, match="name mismatch"):
            CrossLevelContextNet.load_checkpoint(str(d))

    def test_shape_mismatch_raises(self, tmp_path):
        model = small_model()
        d = tmp_path / "ck"
        model.save_checkpoint(str(d))
        manifest = d / "manifest.txt"
        lines = manifest.read_text().splitlines()
        out = []
        for line in lines:
            if line.startswith("param.head.kernel="):
                line = "param.head.kernel=2,4,1,1"
            out.append(line)
        manifest.write_text("\n".join(out) + "\n")
        with pytest.raises(CheckpointError, match="shape mismatch"):
            CrossLevelContextNet.load_checkpoint(str(d))


class TestConfigSerialization:
    def test_dict_roundtrip(self):
        cfg = ModelConfig(width_factor=0.25, use_clf=False,
                          aspp_rates=(1, 2, 3), input_size=(64, 48))
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg
