"""Synthetic stereo data generation and file round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereoadv import data_io
from stereoadv.data_io import (
    SceneSpec,
    StereoSample,
    generate_dataset,
    generate_rds,
    load_dataset,
    load_report,
    save_report,
    save_sample,
)
from stereoadv.metrics import DisparityMap, EvalReport


class TestSceneSpec:
    def test_rejects_level_at_max_disparity(self):
        with pytest.raises(ValueError):
            SceneSpec(max_disparity=8, disparity_levels=[4, 8])

    def test_rejects_negative_level(self):
        with pytest.raises(ValueError):
            SceneSpec(disparity_levels=[-1, 4])

    def test_rejects_bad_density(self):
        with pytest.raises(ValueError):
            SceneSpec(dot_density=0.0)

    def test_rejects_narrow_image(self):
        with pytest.raises(ValueError):
            SceneSpec(width=8, max_disparity=32, disparity_levels=[4, 8])


class TestGenerateRds:
    def make(self, seed=0, **kw):
        kw.setdefault("height", 24)
        kw.setdefault("width", 48)
        kw.setdefault("max_disparity", 16)
        kw.setdefault("disparity_levels", [4, 8, 12])
        return generate_rds(SceneSpec(seed=seed, **kw))

    def test_covisibility_is_bitwise_exact(self):
        """Every valid pixel matches its right-image counterpart exactly."""
        for seed in range(5):
            s = self.make(seed=seed)
            disp = s.gt.values.astype(int)
            for i in range(s.height):
                for j in range(s.width):
                    if s.gt.valid[i, j]:
                        t = j - disp[i, j]
                        assert t >= 0
                        assert np.array_equal(s.left[:, i, j], s.right[:, i, t])

    def test_values_on_8bit_grid(self):
        s = self.make(seed=1)
        for img in (s.left, s.right):
            assert np.array_equal(img, np.round(img * 255) / 255)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_disparity_field_uses_requested_levels(self):
        s = self.make(seed=2)
        assert set(np.unique(s.gt.values)) <= {4.0, 8.0, 12.0}

    def test_deterministic_per_seed(self):
        a, b = self.make(seed=3), self.make(seed=3)
        assert np.array_equal(a.left, b.left)
        assert np.array_equal(a.right, b.right)
        assert np.array_equal(a.gt.values, b.gt.values)
        assert np.array_equal(a.gt.valid, b.gt.valid)

    def test_different_seeds_differ(self):
        assert not np.array_equal(self.make(seed=4).left, self.make(seed=5).left)

    def test_occlusions_marked_invalid(self):
        """Pixels hidden behind a nearer surface must be excluded from gt."""
        s = self.make(seed=6)
        assert not s.gt.valid.all()
        assert s.gt.valid.mean() > 0.5  # but most of the scene is visible

    def test_left_margin_invalid(self):
        # a pixel at column j < d cannot appear in the right image
        s = self.make(seed=7)
        disp = s.gt.values.astype(int)
        js = np.arange(s.width)[None, :]
        assert not s.gt.valid[js < disp].any()

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=10, deadline=None)
    def test_covisibility_property(self, seed):
        s = self.make(seed=seed)
        disp = s.gt.values.astype(int)
        i, j = np.nonzero(s.gt.valid)
        assert np.array_equal(s.left[:, i, j], s.right[:, i, j - disp[i, j]])


class TestGenerateDataset:
    def test_count_ids_and_shapes(self):
        ds = generate_dataset(3, height=16, width=32, max_disparity=8,
                              disparity_levels=[2, 4], seed=0)
        assert [s.id for s in ds] == ["rds_00000", "rds_00001", "rds_00002"]
        assert all(s.left.shape == (3, 16, 32) for s in ds)

    def test_samples_independent(self):
        ds = generate_dataset(2, height=16, width=32, max_disparity=8,
                              disparity_levels=[2, 4], seed=0)
        assert not np.array_equal(ds[0].left, ds[1].left)

    def test_seed_reproducibility(self):
        a = generate_dataset(2, height=16, width=32, max_disparity=8,
                             disparity_levels=[2, 4], seed=7)
        b = generate_dataset(2, height=16, width=32, max_disparity=8,
                             disparity_levels=[2, 4], seed=7)
        assert np.array_equal(a[1].right, b[1].right)


class TestStereoSample:
    def test_shape_validation(self):
        gt = DisparityMap(np.zeros((4, 4)), np.ones((4, 4), dtype=bool))
        with pytest.raises(ValueError):
            StereoSample(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), gt)
        with pytest.raises(ValueError):
            StereoSample(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), gt)


class TestSampleRoundTrip:
    def test_rds_roundtrip_bitwise(self, tmp_path):
        src = generate_rds(SceneSpec(height=16, width=32, max_disparity=8,
                                     disparity_levels=[2, 4], seed=11))
        save_sample(src, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 1
        got = loaded[0]
        assert got.id == src.id
        assert np.array_equal(got.left, src.left)
        assert np.array_equal(got.right, src.right)
        assert np.array_equal(got.gt.valid, src.gt.valid)
        # disparity PNG stores value*256 as uint16: exact for our integers
        assert np.array_equal(got.gt.values[got.gt.valid],
                              src.gt.values[src.gt.valid])

    def test_next_frame_roundtrip(self, tmp_path):
        a = generate_rds(SceneSpec(height=16, width=32, max_disparity=8,
                                   disparity_levels=[2, 4], seed=1))
        b = generate_rds(SceneSpec(height=16, width=32, max_disparity=8,
                                   disparity_levels=[2, 4], seed=2))
        b.id = a.id
        a.next_frame = b
        save_sample(a, tmp_path)
        got = load_dataset(tmp_path)[0]
        assert got.next_frame is not None
        assert np.array_equal(got.next_frame.left, b.left)

    def test_load_empty_root_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")


class TestKittiLoader:
    def _write_fake_kitti(self, tmp_path, h=20, w=40):
        rng = np.random.default_rng(0)
        sample = StereoSample(
            rng.integers(0, 256, (3, h, w)) / 255.0,
            rng.integers(0, 256, (3, h, w)) / 255.0,
            DisparityMap(rng.integers(1, 32, (h, w)).astype(float),
                         rng.random((h, w)) > 0.1),
            id="fake",
        )
        data_io._write_image(tmp_path / "l.png", sample.left)
        data_io._write_image(tmp_path / "r.png", sample.right)
        data_io._write_disparity(tmp_path / "d.png", sample.gt)
        return sample

    def test_loads_full_resolution(self, tmp_path):
        src = self._write_fake_kitti(tmp_path)
        got = data_io.load_kitti_sample(tmp_path / "l.png", tmp_path / "r.png",
                                        tmp_path / "d.png")
        assert np.array_equal(got.left, src.left)
        assert np.array_equal(got.gt.values[got.gt.valid],
                              src.gt.values[src.gt.valid])

    def test_resize_scales_disparity_by_width_ratio(self, tmp_path):
        self._write_fake_kitti(tmp_path, h=20, w=40)
        got = data_io.load_kitti_sample(tmp_path / "l.png", tmp_path / "r.png",
                                        tmp_path / "d.png", target_size=(10, 20))
        assert got.left.shape == (3, 10, 20)
        # disparities are pixel offsets: halving the width halves them
        assert got.gt.values[got.gt.valid].max() <= 16.0


class TestReportCsv:
    def make_report(self, i):
        return EvalReport(condition="attacked", model="corrnet", method="fgsm",
                          epsilon=0.01 * i, target="both", d1_all=1.5 * i,
                          epe=0.1 * i, l1_left=1e-3 * i, l1_right=2e-3 * i,
                          linf_left=0.01, linf_right=0.01)

    def test_roundtrip_preserves_floats_exactly(self, tmp_path):
        reports = [self.make_report(i) for i in range(1, 4)]
        path = tmp_path / "report.csv"
        save_report(reports, path)
        got = load_report(path)
        assert len(got) == 3
        for a, b in zip(reports, got):
            assert a == b

    def test_header_stable(self, tmp_path):
        path = tmp_path / "report.csv"
        save_report([self.make_report(1)], path)
        header = path.read_text().splitlines()[0]
        assert header == ",".join(data_io.REPORT_HEADER)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "report.csv"
        path.write_text("foo,bar\n1,2\n")
        with pytest.raises(ValueError):
            load_report(path)
