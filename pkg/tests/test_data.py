import json

import numpy as np
import pytest

from ffdet.data import (
    CropConfig,
    DataError,
    Sample,
    crop_and_resize,
    load_dataset,
    pad_to_multiple,
    random_crop,
    read_image,
    resize_shorter_side,
    synth_generate,
    synth_image,
    SynthConfig,
)


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    cfg = SynthConfig(n=6, seed=3)
    return cfg, synth_generate(cfg, tmp_path_factory.mktemp("synth"))


class TestSynth:
    def test_counts(self, small_set):
        cfg, root = small_set
        assert len(list((root / "images").glob("*.pgm"))) == 6
        assert len((root / "annotations.jsonl").read_text().splitlines()) == 6

    def test_byte_identical(self, small_set, tmp_path):
        cfg, root = small_set
        other = synth_generate(cfg, tmp_path)
        for f in sorted((root / "images").iterdir()):
            assert f.read_bytes() == (other / "images" / f.name).read_bytes()
        assert (root / "annotations.jsonl").read_bytes() == (other / "annotations.jsonl").read_bytes()

    def test_box_sizes_bounded(self):
        cfg = SynthConfig(n=40)
        for i in range(cfg.n):
            _, boxes = synth_image(cfg, i)
            areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
            assert np.all(areas >= 12**2) and np.all(areas <= 96**2)
            assert 1 <= len(boxes) <= 5
            assert np.all(boxes >= 0) and np.all(boxes <= 128)

    def test_round_trip_lossless(self, small_set):
        cfg, root = small_set
        samples = load_dataset(root)
        for i, s in enumerate(samples):
            pixels, boxes = synth_image(cfg, i)
            np.testing.assert_array_equal(s.boxes, boxes)
            np.testing.assert_array_equal(read_image(root / s.source), pixels[None])

    def test_color(self, tmp_path):
        root = synth_generate(SynthConfig(n=1, channels=3), tmp_path)
        assert load_dataset(root)[0].image.shape == (3, 128, 128)


class TestLoad:
    def write(self, tmp_path, lines):
        synth_generate(SynthConfig(n=1), tmp_path)
        (tmp_path / "annotations.jsonl").write_text("\n".join(json.dumps(x) if not isinstance(x, str) else x for x in lines) + "\n")
        return tmp_path

    def test_empty_boxes_accepted(self, tmp_path):
        root = self.write(tmp_path, [{"image": "images/000000.pgm", "boxes": []}])
        assert load_dataset(root)[0].boxes.shape == (0, 4)

    def test_degenerate_box_diagnostic(self, tmp_path):
        root = self.write(tmp_path, [{"image": "images/000000.pgm", "boxes": []},
                                     {"image": "images/000000.pgm", "boxes": [[5, 5, 5, 9]]}])
        with pytest.raises(DataError, match=r"annotations.jsonl:2: degenerate box"):
            load_dataset(root)

    def test_malformed_json(self, tmp_path):
        root = self.write(tmp_path, ["{not json"])
        with pytest.raises(DataError, match=":1: malformed JSON"):
            load_dataset(root)

    def test_missing_image(self, tmp_path):
        root = self.write(tmp_path, [{"image": "images/nope.pgm", "boxes": []}])
        with pytest.raises(DataError, match="missing image"):
            load_dataset(root)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "absent")


class TestTransforms:
    def test_resize_example(self):
        img = np.random.default_rng(0).random((1, 100, 200))
        out, boxes, scale = resize_shorter_side(img, np.array([[10, 10, 20, 20.0]]), 50)
        assert out.shape == (1, 50, 100) and scale == 0.5
        np.testing.assert_array_equal(boxes, [[5, 5, 10, 10]])

    def test_resize_identity(self):
        img = np.random.default_rng(0).random((1, 64, 80))
        out, _, scale = resize_shorter_side(img, np.zeros((0, 4)), 64)
        assert scale == 1.0 and out.tobytes() == img.tobytes()

    def test_pad(self):
        assert pad_to_multiple(np.ones((1, 100, 130))).shape == (1, 128, 256)

    def test_centered_half_crop_doubles(self):
        s = Sample(np.zeros((1, 128, 128)), np.array([[56, 56, 72, 72.0]]), "x")
        out = crop_and_resize(s, 32, 32, 64, 128)
        np.testing.assert_allclose(out.boxes, [[48, 48, 80, 80]])

    def test_centre_outside_dropped(self):
        s = Sample(np.zeros((1, 128, 128)), np.array([[0, 0, 20, 20], [60, 60, 80, 80.0]]), "x")
        out = crop_and_resize(s, 50, 50, 64, 128)
        assert len(out.boxes) == 1

    def test_full_crop_unchanged(self):
        img = np.random.default_rng(1).random((1, 128, 128))
        s = Sample(img, np.array([[3, 4, 30, 40.0]]), "x")
        out = crop_and_resize(s, 0, 0, 128, 128)
        assert out.image.tobytes() == img.tobytes()
        np.testing.assert_array_equal(out.boxes, s.boxes)

    def test_augmentation_valid_and_deterministic(self):
        cfg = SynthConfig(n=20)
        crop = CropConfig(prob=1.0)
        for i in range(cfg.n):
            pixels, boxes = synth_image(cfg, i)
            s = Sample(pixels[None] / 255.0, boxes, str(i))
            a = random_crop(s, crop, np.random.default_rng([1, i]))
            b = random_crop(s, crop, np.random.default_rng([1, i]))
            assert a.image.tobytes() == b.image.tobytes() and a.boxes.tobytes() == b.boxes.tobytes()
            assert a.image.shape == (1, 128, 128)
            assert np.all(a.boxes[:, 2] > a.boxes[:, 0]) and np.all(a.boxes[:, 3] > a.boxes[:, 1])
            assert np.all(a.boxes >= 0) and np.all(a.boxes <= 128)

    def test_crop_config_validation(self):
        with pytest.raises(ValueError):
            CropConfig(prob=2.0)
