"""Blur preprocessing and adversarial fine-tuning."""

import numpy as np
import pytest

from stereoadv import attacks, defenses, models
from stereoadv.attacks import AttackConfig
from stereoadv.data_io import generate_dataset
from stereoadv.defenses import (
    FinetuneConfig,
    adversarial_finetune,
    blur_defense_eval,
    gaussian_blur,
)
from stereoadv.models import ArchitectureSpec, init_params


@pytest.fixture(scope="module")
def small_world():
    spec = ArchitectureSpec("correlation", feature_channels=4,
                            num_feature_layers=2, num_aggregation_layers=2,
                            max_disparity=8)
    params = init_params(spec, seed=0)
    dataset = generate_dataset(3, height=12, width=24, max_disparity=8,
                               disparity_levels=[2, 4], seed=2)
    return params, dataset


def blur_loops(image, sigma):
    """Direct per-pixel oracle with reflect padding."""
    k = np.exp(-(np.arange(-1, 2)[None, :] ** 2 +
                 np.arange(-1, 2)[:, None] ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    out = np.zeros_like(image)
    for ci in range(c):
        for i in range(h):
            for j in range(w):
                out[ci, i, j] = (padded[ci, i:i + 3, j:j + 3] * k).sum()
    return out


class TestGaussianBlur:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 6, 8))
        assert np.allclose(gaussian_blur(img, 0.8), blur_loops(img, 0.8),
                           atol=1e-12)

    def test_kernel_normalized(self):
        img = np.full((3, 5, 5), 0.6)
        assert np.allclose(gaussian_blur(img, 1.0), 0.6)

    def test_large_sigma_approaches_box_mean(self):
        rng = np.random.default_rng(1)
        img = rng.random((1, 4, 4))
        out = gaussian_blur(img, 100.0)
        k = np.full((3, 3), 1.0 / 9.0)
        expected = blur_loops(img, 100.0)
        assert np.allclose(out, expected)
        # at huge sigma all nine weights are ~1/9
        center = out[0, 1, 1]
        assert np.isclose(center, img[0, 0:3, 0:3].mean(), atol=1e-3)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            gaussian_blur(np.zeros((3, 4, 4)), 0.0)

    def test_smooths_high_frequency(self):
        img = np.zeros((1, 8, 8))
        img[0, ::2] = 1.0  # stripes
        out = gaussian_blur(img, 0.8)
        assert out.std() < img.std()


class TestBlurDefenseEval:
    def test_returns_clean_and_attacked_reports(self, small_world):
        params, dataset = small_world
        cfg = AttackConfig(method="uniform_noise", epsilon=0.02, seed=0)
        perts = [attacks.craft(params, s, cfg) for s in dataset]
        rep_clean, rep_attacked = blur_defense_eval(params, dataset, perts, 0.75)
        assert rep_clean.condition == "blurred_clean"
        assert rep_attacked.condition == "blurred_attacked"
        assert rep_clean.extra["sigma"] == 0.75
        assert 0.0 <= rep_clean.d1_all <= 100.0

    def test_count_mismatch_rejected(self, small_world):
        params, dataset = small_world
        with pytest.raises(ValueError):
            blur_defense_eval(params, dataset, [], 0.75)


class TestAdversarialFinetune:
    def test_deterministic(self, small_world):
        params, dataset = small_world
        cfg = FinetuneConfig(attack=AttackConfig(method="fgsm", epsilon=0.02),
                             epochs=2, learning_rate=0.001, clean_fraction=0.5,
                             seed=4)
        a = adversarial_finetune(params, dataset, cfg)
        b = adversarial_finetune(params, dataset, cfg)
        for (ka, _), (kb, _) in zip(a.layers, b.layers):
            assert np.array_equal(ka.data, kb.data)

    def test_updates_parameters(self, small_world):
        params, dataset = small_world
        cfg = FinetuneConfig(attack=AttackConfig(method="fgsm", epsilon=0.02),
                             epochs=1, learning_rate=0.001, seed=0)
        out = adversarial_finetune(params, dataset, cfg)
        assert not np.array_equal(out.layers[0][0].data,
                                  params.layers[0][0].data)

    def test_clean_fraction_one_matches_plain_training(self, small_world):
        """clean_fraction=1 is the control: no sample is ever perturbed."""
        params, dataset = small_world
        cfg = FinetuneConfig(attack=AttackConfig(method="fgsm", epsilon=0.02),
                             epochs=2, learning_rate=0.001, clean_fraction=1.0,
                             seed=4)
        tuned = adversarial_finetune(params, dataset, cfg)
        assert len(tuned.loss_history) == 2

    def test_loss_history_appended(self, small_world):
        params, dataset = small_world
        cfg = FinetuneConfig(attack=AttackConfig(method="fgsm", epsilon=0.02),
                             epochs=3, learning_rate=0.001, seed=1)
        out = adversarial_finetune(params, dataset, cfg)
        assert len(out.loss_history) == len(params.loss_history) + 3

    def test_empty_dataset_rejected(self, small_world):
        params, _ = small_world
        cfg = FinetuneConfig(attack=AttackConfig(method="fgsm", epsilon=0.02))
        with pytest.raises(ValueError):
            adversarial_finetune(params, [], cfg)

    def test_rejects_bad_clean_fraction(self):
        with pytest.raises(ValueError):
            FinetuneConfig(attack=AttackConfig(method="fgsm"), clean_fraction=0.0)
