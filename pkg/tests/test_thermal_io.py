import numpy as np
import pytest

from thermodet import thermal_io as tio
from thermodet.errors import ConfigError, DimensionError, FormatError, ValidationError


def _frame(temps, index=0):
    return tio.ThermalFrame(temps=np.asarray(temps, dtype=np.float64), index=index)


def _const_frame(value, index=0):
    return _frame(np.full((24, 32), value), index)


class TestTiff:
    def test_raw_u16_is_centidegrees(self, tmp_path):
        temps = np.full((24, 32), 20.0)
        temps[3, 7] = 26.50
        path = tmp_path / "f.tiff"
        tio.write_frame(_frame(temps), path)
        frame = tio.read_frame(path)
        assert frame.temps[3, 7] == 26.50

    def test_zero_pixel(self, tmp_path):
        temps = np.full((24, 32), 10.0)
        temps[0, 0] = 0.0
        path = tmp_path / "f.tiff"
        tio.write_frame(_frame(temps), path)
        assert tio.read_frame(path).temps[0, 0] == 0.0

    def test_roundtrip_bit_identical(self, tmp_path, rng):
        # write(read(f)) must reproduce f byte for byte
        raw = rng.integers(0, 30001, size=(24, 32)).astype(np.uint16)
        path = tmp_path / "f.tiff"
        tio.write_frame(_frame(raw.astype(np.float64) / 100.0), path)
        first = path.read_bytes()
        frame = tio.read_frame(path)
        path2 = tmp_path / "g.tiff"
        tio.write_frame(frame, path2)
        assert path2.read_bytes() == first

    def test_malformed_tiff(self, tmp_path):
        path = tmp_path / "bad.tiff"
        path.write_bytes(b"MM\x00\x2a" + b"\x00" * 64)
        with pytest.raises(FormatError):
            tio.read_frame(path)

    def test_truncated_tiff(self, tmp_path):
        path = tmp_path / "short.tiff"
        tio.write_frame(_const_frame(20.0), path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(FormatError):
            tio.read_frame(path)

    def test_wrong_dimensions(self, tmp_path):
        path = tmp_path / "f.tiff"
        tio.write_frame(_const_frame(20.0), path)
        blob = bytearray(path.read_bytes())
        # ImageWidth entry value lives right after the strip; easier to
        # write a frame-sized file with patched width tag
        idx = blob.find((256).to_bytes(2, "little") + (4).to_bytes(2, "little"))
        blob[idx + 8 : idx + 12] = (16).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises((DimensionError, FormatError)):
            tio.read_frame(path)

    def test_negative_temps_not_representable(self, tmp_path):
        with pytest.raises(ValidationError):
            tio.write_frame(_const_frame(-1.0), tmp_path / "f.tiff")


class TestNormalize:
    def test_bounds(self):
        f = _const_frame(15.0)
        assert np.all(tio.normalize(f, 15.0, 40.0) == 0.0)
        f = _const_frame(40.0)
        assert np.all(tio.normalize(f, 15.0, 40.0) == 1.0)

    def test_midpoint(self):
        f = _const_frame(27.5)
        assert np.allclose(tio.normalize(f, 15.0, 40.0), 0.5)

    def test_clamps_outside_window(self):
        f = _const_frame(5.0)
        assert np.all(tio.normalize(f, 15.0, 40.0) == 0.0)
        f = _const_frame(60.0)
        assert np.all(tio.normalize(f, 15.0, 40.0) == 1.0)

    def test_monotone(self, rng):
        temps = rng.uniform(0, 60, size=200)
        vals = [
            float(tio.normalize(_const_frame(t), 15.0, 40.0)[0, 0])
            for t in temps
        ]
        order = np.argsort(temps)
        assert np.all(np.diff(np.array(vals)[order]) >= 0)

    def test_bad_window(self):
        with pytest.raises(ConfigError):
            tio.normalize(_const_frame(20.0), 40.0, 15.0)


class TestDiffImage:
    def test_self_difference_is_zero(self, rng):
        img = rng.random((24, 32), dtype=np.float32)
        assert np.all(tio.diff_image(img, img) == 0.0)

    def test_constant_case(self):
        cur = np.full((24, 32), 1.0, dtype=np.float32)
        past = np.full((24, 32), 0.25, dtype=np.float32)
        assert np.allclose(tio.diff_image(cur, past), 0.75)

    def test_matches_elementwise_oracle(self, rng):
        a = rng.random((24, 32), dtype=np.float32)
        b = rng.random((24, 32), dtype=np.float32)
        expect = np.array(
            [[a[i, j] - b[i, j] for j in range(32)] for i in range(24)]
        )
        assert np.allclose(tio.diff_image(a, b), expect)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tio.diff_image(np.zeros((24, 32)), np.zeros((12, 16)))


class TestSynth:
    def test_empty_scene_is_constant_ambient(self):
        cfg = tio.SyntheticSceneConfig(
            n_frames=5, n_persons=0, n_imposters=0, noise_sigma=0.0, seed=1
        )
        frames, boxes = tio.synth_sequence(cfg)
        assert boxes == []
        for f in frames:
            assert np.all(f.temps == cfg.ambient_c)

    def test_deterministic_per_seed(self):
        cfg = tio.SyntheticSceneConfig(n_frames=8, n_persons=2, n_imposters=1, seed=7)
        f1, b1 = tio.synth_sequence(cfg)
        f2, b2 = tio.synth_sequence(cfg)
        assert b1 == b2
        for a, b in zip(f1, f2):
            assert np.array_equal(a.temps, b.temps)

    def test_box_contains_hottest_pixel(self):
        cfg = tio.SyntheticSceneConfig(
            n_frames=20, n_persons=1, n_imposters=0, noise_sigma=0.1, seed=3
        )
        frames, boxes = tio.synth_sequence(cfg)
        by_frame = {b.frame_index: b for b in boxes}
        assert set(by_frame) == set(range(20))
        for f in frames:
            b = by_frame[f.index]
            i, j = np.unravel_index(np.argmax(f.temps), f.temps.shape)
            assert b.x <= j < b.x + b.w
            assert b.y <= i < b.y + b.h

    def test_static_sigma_zero_scene_is_constant_video(self):
        cfg = tio.SyntheticSceneConfig(
            n_frames=6, n_persons=2, n_imposters=1, noise_sigma=0.0, speed=0.0, seed=2
        )
        frames, _ = tio.synth_sequence(cfg)
        for f in frames[1:]:
            assert np.array_equal(f.temps, frames[0].temps)

    def test_annotations_reference_existing_frames(self):
        cfg = tio.SyntheticSceneConfig(n_frames=15, n_persons=3, seed=9)
        frames, boxes = tio.synth_sequence(cfg)
        indices = {f.index for f in frames}
        assert all(b.frame_index in indices for b in boxes)

    def test_person_cooler_than_ambient_rejected(self):
        with pytest.raises(ConfigError):
            tio.SyntheticSceneConfig(ambient_c=30.0, person_c=(25.0, 28.0))


class TestAnnotations:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_text("")
        assert tio.read_annotations(path) == []

    def test_roundtrip_canonical(self, tmp_path):
        boxes = [
            tio.GroundTruthBox(frame_index=1, x=3, y=4, w=5, h=6),
            tio.GroundTruthBox(frame_index=0, x=0, y=0, w=2, h=2),
            tio.GroundTruthBox(frame_index=0, x=10, y=8, w=4, h=3),
        ]
        path = tmp_path / "a.jsonl"
        tio.write_annotations(path, boxes)
        first = path.read_text()
        again = tmp_path / "b.jsonl"
        tio.write_annotations(again, tio.read_annotations(path))
        assert again.read_text() == first

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValidationError):
            tio.GroundTruthBox(frame_index=0, x=1, y=1, w=0, h=3)

    def test_out_of_bounds_box_rejected(self):
        with pytest.raises(ValidationError):
            tio.GroundTruthBox(frame_index=0, x=30, y=1, w=5, h=3)

    def test_bad_json_line(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_text('{"frame_index": 0, "x": 1}\n')
        with pytest.raises(FormatError):
            tio.read_annotations(path)


class TestSequenceIo:
    def test_write_read_sequence(self, tmp_path):
        cfg = tio.SyntheticSceneConfig(n_frames=6, n_persons=1, seed=4)
        frames, boxes = tio.synth_sequence(cfg)
        tio.write_sequence(tmp_path / "seq", frames, boxes)
        frames2, boxes2 = tio.read_sequence(tmp_path / "seq")
        assert len(frames2) == 6
        assert sorted(boxes2, key=lambda b: b.frame_index) == sorted(
            boxes, key=lambda b: b.frame_index
        )
        # u16 centidegree storage quantizes to 0.01 degC
        assert np.abs(frames2[0].temps - frames[0].temps).max() <= 0.005 + 1e-9
