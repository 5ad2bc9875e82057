"""Model assembly, losses, parameter counting, checkpoint round-trips."""

from pathlib import Path

import numpy as np
import pytest

from arcaps import tensor as T
from arcaps.errors import ConfigurationError, InputDataError
from arcaps.model import (ArCapsNet, ConvCapsSpec, ModelConfig, count_parameters,
                          margin_loss, normalized_length, reconstruction_loss,
                          standard_stack)
from arcaps.train import load_model, save_model
from arcaps.config import RunConfig


MNIST_CONFIG = ModelConfig()
CIFAR_CONFIG = ModelConfig(input_width=32, input_height=32, input_channels=3,
                           conv_caps=standard_stack(4, 32, 8), out_dim=32)


class TestBuild:
    def test_mnist_forward_shapes(self, rng):
        net = ArCapsNet(MNIST_CONFIG, seed=0)
        images = rng.random((2, 28, 28, 1), dtype=np.float32)
        result = net.forward(images)
        assert result.scores.shape == (2, 10)
        assert result.capsules.shape == (2, 32, 10)
        assert result.reconstruction.shape == (2, 784)

    def test_equal_seeds_build_identical_parameters(self):
        a = ArCapsNet(MNIST_CONFIG, seed=7)
        b = ArCapsNet(MNIST_CONFIG, seed=7)
        for (n1, t1), (n2, t2) in zip(a.store.items(), b.store.items()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)
        c = ArCapsNet(MNIST_CONFIG, seed=8)
        assert not np.array_equal(a.store["stem0.kernel"].data,
                                  c.store["stem0.kernel"].data)

    def test_cifar_residual_config_builds_and_runs(self, rng):
        net = ArCapsNet(CIFAR_CONFIG, seed=0)
        images = rng.random((2, 32, 32, 3), dtype=np.float32)
        result = net.forward(images)
        assert result.scores.shape == (2, 10)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigurationError, match="classes"):
            ModelConfig(classes=0).validate()
        with pytest.raises(ConfigurationError, match="residual"):
            ModelConfig(conv_caps=(
                ConvCapsSpec(dim=32, channels=8, stride=2, residual=True),
            )).validate()
        with pytest.raises(ConfigurationError, match="stem_width"):
            ModelConfig(stem_width=0).validate()

    def test_train_mode_requires_labels(self, rng):
        net = ArCapsNet(ModelConfig(input_width=8, input_height=8, stem_width=2,
                                    primary_dim=2, primary_channels=2,
                                    conv_caps=(), out_dim=3, classes=2,
                                    decoder_widths=(4,)), seed=0)
        with pytest.raises(ConfigurationError):
            net.forward(rng.random((1, 8, 8, 1), dtype=np.float32), train=True)


class TestNormalizedLength:
    def test_maximal_capsule_scores_one(self):
        caps = np.zeros((1, 32, 10), dtype=np.float32)
        caps[0, :, 3] = 1.0
        scores = normalized_length(T.leaf(caps)).data
        assert abs(scores[0, 3] - 1.0) < 1e-6

    def test_zero_capsule_scores_zero(self):
        scores = normalized_length(T.leaf(np.zeros((1, 16, 4), dtype=np.float32))).data
        assert np.all(scores == 0)

    def test_matches_norm_oracle(self, rng):
        caps = rng.standard_normal((3, 8, 5))
        scores = normalized_length(T.leaf(caps)).data
        for b in range(3):
            for n in range(5):
                norm = float(np.sqrt(sum(caps[b, d, n] ** 2 for d in range(8))))
                assert abs(scores[b, n] - norm / np.sqrt(8)) < 1e-6

    def test_scores_in_unit_interval_via_tanh_bound(self, rng):
        net = ArCapsNet(ModelConfig(input_width=8, input_height=8, stem_width=3,
                                    primary_dim=3, primary_channels=2,
                                    conv_caps=(), out_dim=4, classes=3,
                                    decoder_widths=(4,)), seed=1)
        result = net.forward(rng.random((4, 8, 8, 1), dtype=np.float32))
        assert np.all(result.scores.data >= 0)
        assert np.all(result.scores.data <= 1)

    def test_argmax_invariant_to_positive_scaling(self, rng):
        caps = rng.standard_normal((4, 8, 5))
        a = normalized_length(T.leaf(caps)).data
        b = normalized_length(T.leaf(caps * 3.7)).data
        assert np.array_equal(np.argmax(a, axis=1), np.argmax(b, axis=1))


class TestMarginLoss:
    def _loss(self, scores, labels, classes=4):
        return margin_loss(T.leaf(np.asarray(scores, dtype=np.float64)),
                           np.asarray(labels), classes).item()

    def test_zero_at_margins(self):
        scores = [[0.9, 0.1, 0.1, 0.1]]
        assert self._loss(scores, [0]) == 0.0

    def test_true_class_below_margin(self):
        scores = [[0.4, 0.0, 0.0, 0.0]]
        assert abs(self._loss(scores, [0]) - 0.25) < 1e-12

    def test_all_zero_scores(self):
        scores = [[0.0, 0.0, 0.0, 0.0]]
        assert abs(self._loss(scores, [2]) - 0.81) < 1e-12

    def test_zero_iff_margins_satisfied(self, rng):
        good = rng.uniform(0.9, 1.0, size=(3, 4))
        labels = np.array([0, 1, 2])
        mask = np.ones((3, 4), dtype=bool)
        mask[np.arange(3), labels] = False
        good[mask] = rng.uniform(0.0, 0.1, size=9)
        assert self._loss(good, labels) == 0.0
        bad = good.copy()
        bad[0, 0] = 0.89
        assert self._loss(bad, labels) > 0.0
        bad = good.copy()
        bad[1, 3] = 0.11
        assert self._loss(bad, labels) > 0.0

    def test_label_out_of_range_rejected(self):
        with pytest.raises(InputDataError):
            self._loss([[0.5, 0.5, 0.5, 0.5]], [4])


class TestReconstructionLoss:
    def test_perfect_reconstruction_is_zero(self, rng):
        img = rng.random((2, 16)).astype(np.float32)
        assert reconstruction_loss(T.leaf(img), img).item() == 0.0

    def test_constant_offset(self, rng):
        img = rng.random((2, 16))
        out = np.clip(img + 0.1, 0, 2)  # stay in range, exact +0.1
        out = img + 0.1
        loss = reconstruction_loss(T.leaf(out), img).item()
        assert abs(loss - 0.01) < 1e-9

    def test_scale_conversion_footnote(self):
        # sum-of-squares weighting 0.0005 over 784 pixels equals the
        # mean-of-squares weighting 0.392
        assert 0.392 == 0.0005 * 784

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(InputDataError):
            reconstruction_loss(T.leaf(rng.random((2, 16))), rng.random((2, 15)))


class TestDecode:
    @pytest.fixture
    def small_net(self):
        return ArCapsNet(ModelConfig(input_width=8, input_height=8, stem_width=2,
                                     primary_dim=2, primary_channels=2,
                                     conv_caps=(), out_dim=4, classes=3,
                                     decoder_widths=(6, 6)), seed=2)

    def test_zero_capsules_give_bias_chain_constant(self, small_net, rng):
        caps = np.zeros((2, 4, 3), dtype=np.float32)
        out = small_net.decode(T.leaf(caps), np.array([0, 1])).data
        assert np.array_equal(out[0], out[1])

    def test_masking_ignores_non_target_capsules(self, small_net, rng):
        caps = rng.random((1, 4, 3)).astype(np.float32)
        other = caps.copy()
        other[0, :, 2] += 0.5  # non-target channel
        a = small_net.decode(T.leaf(caps), np.array([0])).data
        b = small_net.decode(T.leaf(other), np.array([0])).data
        assert np.array_equal(a, b)
        c = small_net.decode(T.leaf(other), np.array([2])).data
        assert not np.array_equal(a, c)

    def test_output_pixels_in_unit_interval(self, small_net, rng):
        caps = rng.standard_normal((3, 4, 3)).astype(np.float32) * 5
        out = small_net.decode(T.leaf(caps), np.array([0, 1, 2])).data
        assert np.all(out > 0) and np.all(out < 1)


class TestCountParameters:
    def test_default_config_hits_expected_total(self):
        total, rows = count_parameters(MNIST_CONFIG)
        assert abs(total - 5.31e6) / 5.31e6 < 0.02
        assert sum(n for _, n in rows) == total

    def test_cifar_grid_rows(self):
        t0, _ = count_parameters(ModelConfig(
            input_width=32, input_height=32, input_channels=3,
            conv_caps=(), out_dim=16))
        assert abs(t0 - 7.3e6) / 7.3e6 < 0.05
        t4, _ = count_parameters(CIFAR_CONFIG)
        assert abs(t4 - 9.6e6) / 9.6e6 < 0.05

    @pytest.mark.parametrize("cfg", [
        ModelConfig(input_width=8, input_height=8, stem_width=3, primary_dim=3,
                    primary_channels=2,
                    conv_caps=(ConvCapsSpec(dim=4, channels=3, stride=2),),
                    out_dim=4, classes=3, decoder_widths=(8, 8)),
        ModelConfig(input_width=10, input_height=10, stem_width=4, primary_dim=2,
                    primary_channels=3,
                    conv_caps=standard_stack(2, 4, 3),
                    out_dim=5, classes=4, decoder_widths=(8,)),
        MNIST_CONFIG,
    ])
    def test_arithmetic_count_matches_built_store(self, cfg):
        total, _ = count_parameters(cfg)
        net = ArCapsNet(cfg, seed=0)
        assert net.store.count_trainable() == total


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng, tiny_config, tiny_run_config):
        run_cfg = tiny_run_config
        net = ArCapsNet(tiny_config, seed=0)
        # dirty the running stats so non-trainable state is exercised
        net.loss(rng.random((4, 8, 8, 1), dtype=np.float32), np.array([0, 1, 2, 0]),
                 train=True, rng=np.random.default_rng(0))
        path = tmp_path / "model.ckpt"
        save_model(path, net, run_cfg)
        first = Path(path).read_bytes()

        loaded, _, _ = load_model(path)
        for name, t in net.store.items():
            assert np.array_equal(t.data, loaded.store[name].data), name

        path2 = tmp_path / "again.ckpt"
        save_model(path2, loaded, run_cfg)
        assert first == Path(path2).read_bytes()

    def test_mismatched_config_rejected_at_save(self, tmp_path, tiny_config):
        net = ArCapsNet(tiny_config, seed=0)
        with pytest.raises(ConfigurationError, match="does not describe"):
            save_model(tmp_path / "bad.ckpt", net, RunConfig())

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTACAPS" + b"\x00" * 32)
        with pytest.raises(InputDataError, match="magic"):
            load_model(p)

    def test_truncated_rejected(self, tmp_path, tiny_config, tiny_run_config):
        net = ArCapsNet(tiny_config, seed=0)
        p = tmp_path / "model.ckpt"
        save_model(p, net, tiny_run_config)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 7])
        with pytest.raises(InputDataError, match="truncated"):
            load_model(p)

    def test_forward_identical_after_round_trip(self, tmp_path, rng, tiny_config, tiny_run_config):
        net = ArCapsNet(tiny_config, seed=4)
        images = rng.random((2, 8, 8, 1), dtype=np.float32)
        before = net.forward(images).scores.data
        path = tmp_path / "model.ckpt"
        save_model(path, net, tiny_run_config)
        loaded, _, _ = load_model(path)
        after = loaded.forward(images).scores.data
        assert np.array_equal(before, after)


def test_total_loss_nonnegative(rng, tiny_config):
    net = ArCapsNet(tiny_config, seed=0)
    images = rng.random((3, 8, 8, 1), dtype=np.float32)
    total, margin, recon, _ = net.loss(images, np.array([0, 1, 2]))
    assert total.item() >= 0
    assert margin.item() >= 0
    assert recon.item() >= 0
    assert abs(total.item() - (margin.item() + 0.3 * recon.item())) < 1e-6
