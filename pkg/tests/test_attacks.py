"""Perturbation crafting: budgets, collapse identities, file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereoadv import attacks, models
from stereoadv.attacks import (
    AttackConfig,
    Perturbation,
    apply,
    craft,
    default_alpha,
    diverse_transform,
    load_perturbation,
    save_perturbation,
)
from stereoadv.data_io import SceneSpec, generate_rds
from stereoadv.metrics import DisparityMap
from stereoadv.models import ArchitectureSpec, init_params


@pytest.fixture(scope="module")
def tiny_setup():
    """A small untrained model and one RDS sample, shared by attack tests."""
    spec = ArchitectureSpec("correlation", feature_channels=4,
                            num_feature_layers=2, num_aggregation_layers=2,
                            max_disparity=8)
    params = init_params(spec, seed=0)
    sample = generate_rds(SceneSpec(height=12, width=24, max_disparity=8,
                                    disparity_levels=[2, 4], seed=5))
    return params, sample


class TestDefaultAlpha:
    def test_large_epsilon_fraction(self):
        assert default_alpha(0.02) == pytest.approx(0.002)
        assert default_alpha(0.05) == pytest.approx(0.005)

    def test_small_epsilon_divided_by_steps(self):
        assert default_alpha(0.002, steps=40) == pytest.approx(0.002 / 40)


class TestAttackConfig:
    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError):
            AttackConfig(method="pgd")

    def test_rejects_alpha_above_epsilon(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.01, alpha=0.02)

    def test_rejects_bad_target(self):
        with pytest.raises(ValueError):
            AttackConfig(target="up_only")

    def test_alpha_defaults_from_epsilon(self):
        cfg = AttackConfig(method="ifgsm", epsilon=0.02)
        assert cfg.alpha == pytest.approx(0.002)


class TestPerturbationInvariants:
    def test_budget_enforced_at_construction(self):
        with pytest.raises(ValueError):
            Perturbation(np.full((3, 2, 2), 0.05), np.zeros((3, 2, 2)), 0.02)

    def test_target_side_must_be_zero(self):
        v = np.full((3, 2, 2), 0.01)
        with pytest.raises(ValueError):
            Perturbation(v, v, 0.02, target="left_only")

    @pytest.mark.parametrize("method", attacks.METHODS)
    def test_budget_exact_for_every_method(self, method, tiny_setup):
        params, sample = tiny_setup
        cfg = AttackConfig(method=method, epsilon=0.02, steps=3, seed=1)
        p = craft(params, sample, cfg)
        assert np.abs(p.v_left).max() <= 0.02
        assert np.abs(p.v_right).max() <= 0.02

    @pytest.mark.parametrize("target,zero_side", [("left_only", "v_right"),
                                                  ("right_only", "v_left")])
    def test_single_image_targets(self, target, zero_side, tiny_setup):
        params, sample = tiny_setup
        cfg = AttackConfig(method="fgsm", epsilon=0.02, target=target, seed=1)
        p = craft(params, sample, cfg)
        assert not np.any(getattr(p, zero_side))


class TestApply:
    def test_clamps_to_unit_interval(self, tiny_setup):
        _, sample = tiny_setup
        v = Perturbation(np.full_like(sample.left, 0.5),
                         np.full_like(sample.right, -0.5), 0.5)
        out = apply(v, sample)
        assert out.left.max() <= 1.0 and out.left.min() >= 0.0
        assert out.right.max() <= 1.0 and out.right.min() >= 0.0

    def test_ground_truth_untouched(self, tiny_setup):
        _, sample = tiny_setup
        v = Perturbation.zeros_like(sample, 0.02)
        out = apply(v, sample)
        assert out.gt is sample.gt

    def test_zero_perturbation_is_identity(self, tiny_setup):
        _, sample = tiny_setup
        out = apply(Perturbation.zeros_like(sample, 0.02), sample)
        assert np.array_equal(out.left, sample.left)

    def test_shape_mismatch_rejected(self, tiny_setup):
        _, sample = tiny_setup
        v = Perturbation(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), 0.02)
        with pytest.raises(ValueError):
            apply(v, sample)


class TestCollapseIdentities:
    """Degenerate parameter settings must reduce methods to one another."""

    def test_single_step_iterative_equals_fgsm(self, tiny_setup):
        params, sample = tiny_setup
        fg = craft(params, sample, AttackConfig(method="fgsm", epsilon=0.02, seed=9))
        it = craft(params, sample, AttackConfig(method="ifgsm", epsilon=0.02,
                                                alpha=0.02, steps=1, seed=9))
        assert np.array_equal(fg.v_left, it.v_left)
        assert np.array_equal(fg.v_right, it.v_right)

    def test_zero_momentum_equals_iterative(self, tiny_setup):
        params, sample = tiny_setup
        base = AttackConfig(method="ifgsm", epsilon=0.02, steps=4, seed=9)
        mi = AttackConfig(method="mifgsm", epsilon=0.02, steps=4,
                          momentum_beta=0.0, seed=9)
        a = craft(params, sample, base)
        b = craft(params, sample, mi)
        assert np.array_equal(a.v_left, b.v_left)
        assert np.array_equal(a.v_right, b.v_right)

    def test_zero_transform_prob_equals_iterative(self, tiny_setup):
        params, sample = tiny_setup
        a = craft(params, sample, AttackConfig(method="ifgsm", epsilon=0.02,
                                               steps=4, seed=9))
        b = craft(params, sample, AttackConfig(method="di2fgsm", epsilon=0.02,
                                               steps=4, transform_prob=0.0,
                                               seed=9))
        assert np.array_equal(a.v_left, b.v_left)
        assert np.array_equal(a.v_right, b.v_right)

    def test_zero_transform_prob_momentum_equals_momentum(self, tiny_setup):
        params, sample = tiny_setup
        a = craft(params, sample, AttackConfig(method="mifgsm", epsilon=0.02,
                                               steps=4, seed=9))
        b = craft(params, sample, AttackConfig(method="mdi2fgsm", epsilon=0.02,
                                               steps=4, transform_prob=0.0,
                                               seed=9))
        assert np.array_equal(a.v_left, b.v_left)
        assert np.array_equal(a.v_right, b.v_right)


class TestDeterminism:
    @pytest.mark.parametrize("method", ["fgsm", "mifgsm", "mdi2fgsm",
                                        "gaussian_noise"])
    def test_same_seed_same_perturbation(self, method, tiny_setup):
        params, sample = tiny_setup
        cfg = AttackConfig(method=method, epsilon=0.02, steps=3, seed=4)
        a = craft(params, sample, cfg)
        b = craft(params, sample, cfg)
        assert np.array_equal(a.v_left, b.v_left)
        assert np.array_equal(a.v_right, b.v_right)

    def test_noise_seeds_differ(self, tiny_setup):
        params, sample = tiny_setup
        a = craft(params, sample, AttackConfig(method="uniform_noise",
                                               epsilon=0.02, seed=1))
        b = craft(params, sample, AttackConfig(method="uniform_noise",
                                               epsilon=0.02, seed=2))
        assert not np.array_equal(a.v_left, b.v_left)


class TestNoiseBaselines:
    def test_uniform_within_bounds(self, tiny_setup):
        params, sample = tiny_setup
        p = craft(params, sample, AttackConfig(method="uniform_noise",
                                               epsilon=0.02, seed=0))
        assert np.abs(p.v_left).max() <= 0.02

    def test_gaussian_scale(self, tiny_setup):
        """Sampled std should be near eps/4 (clipping is rare at 4 sigma)."""
        params, sample = tiny_setup
        p = craft(params, sample, AttackConfig(method="gaussian_noise",
                                               epsilon=0.2, seed=0))
        assert p.v_left.std() == pytest.approx(0.05, rel=0.15)


class TestDiverseTransform:
    def test_identity_at_unit_scale(self, tiny_setup):
        _, sample = tiny_setup
        img, gt = diverse_transform(sample.left, sample.gt, 1.0, 1.0, (0, 0))
        assert np.array_equal(img, sample.left)
        assert np.array_equal(gt.values, sample.gt.values)
        assert np.array_equal(gt.valid, sample.gt.valid)

    def test_width_scale_halves_disparity(self, tiny_setup):
        _, sample = tiny_setup
        _, gt = diverse_transform(sample.left, sample.gt, 1.0, 0.5, (0, 0))
        inside = gt.valid
        assert inside.any()
        scaled = set(np.unique(gt.values[inside]))
        original = {0.5 * v for v in np.unique(sample.gt.values[sample.gt.valid])}
        assert scaled <= original

    def test_padding_marked_invalid(self, tiny_setup):
        _, sample = tiny_setup
        _, gt = diverse_transform(sample.left, sample.gt, 0.5, 0.5, (0, 0))
        h, w = sample.gt.shape
        assert not gt.valid[h // 2 + 1:, :].any()
        assert not gt.valid[:, w // 2 + 1:].any()

    def test_bad_offsets_rejected(self, tiny_setup):
        _, sample = tiny_setup
        with pytest.raises(ValueError):
            diverse_transform(sample.left, sample.gt, 0.9, 0.9,
                              (sample.height, 0))

    def test_field_adjoint_dot_product_identity(self, tiny_setup):
        # gradients are mapped back through the transpose of the
        # resize-and-pad operator, so <T x, y> must equal <x, T^T y>
        _, sample = tiny_setup
        rng = np.random.default_rng(4)
        x = rng.standard_normal(sample.left.shape)
        y = rng.standard_normal(sample.left.shape)
        h, w, off = 0.8, 0.9, (1, 2)
        lhs = np.sum(attacks._transform_field(x, h, w, off) * y)
        rhs = np.sum(x * attacks._transform_adjoint(y, h, w, off))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestPerturbationFile:
    def make(self, rng, eps=0.02):
        v = rng.uniform(-eps, eps, size=(2, 3, 6, 9))
        return Perturbation(v[0], v[1], eps, method="ifgsm", target="both")

    def test_roundtrip_bitwise(self, tmp_path):
        p = self.make(np.random.default_rng(0))
        path = tmp_path / "p.spgn"
        save_perturbation(p, path)
        q = load_perturbation(path)
        assert np.array_equal(p.v_left, q.v_left)
        assert np.array_equal(p.v_right, q.v_right)
        assert q.epsilon == p.epsilon
        assert q.method == "ifgsm" and q.target == "both"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.spgn"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(ValueError):
            load_perturbation(path)

    def test_truncation_rejected_at_any_length(self, tmp_path):
        p = self.make(np.random.default_rng(1))
        path = tmp_path / "p.spgn"
        save_perturbation(p, path)
        blob = path.read_bytes()
        cut = tmp_path / "cut.spgn"
        for n in (5, 10, len(blob) // 2, len(blob) - 1):
            cut.write_bytes(blob[:n])
            with pytest.raises(ValueError):
                load_perturbation(cut)

    def test_trailing_bytes_rejected(self, tmp_path):
        p = self.make(np.random.default_rng(2))
        path = tmp_path / "p.spgn"
        save_perturbation(p, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ValueError):
            load_perturbation(path)

    def test_corrupt_method_code_rejected(self, tmp_path):
        p = self.make(np.random.default_rng(3))
        path = tmp_path / "p.spgn"
        save_perturbation(p, path)
        blob = bytearray(path.read_bytes())
        blob[5] = 250  # method code past the table
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError):
            load_perturbation(path)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=20, deadline=None)
    def test_random_byte_flip_never_crashes_unhandled(self, seed):
        """Corrupted files either load or raise ValueError, nothing else."""
        import os
        import tempfile
        rng = np.random.default_rng(seed)
        p = self.make(rng)
        fd, path = tempfile.mkstemp(suffix=".spgn")
        os.close(fd)
        try:
            save_perturbation(p, path)
            with open(path, "rb") as f:
                blob = bytearray(f.read())
            pos = int(rng.integers(0, len(blob)))
            blob[pos] = int(rng.integers(0, 256))
            with open(path, "wb") as f:
                f.write(bytes(blob))
            try:
                load_perturbation(path)
            except ValueError:
                pass
        finally:
            os.unlink(path)
