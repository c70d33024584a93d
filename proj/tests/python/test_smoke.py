import numpy as np
import pytest

import glandseg


def test_synthetic_and_targets():
    image, mask = glandseg.synthetic_sample("s", 64, 80, 3)
    assert image.shape == (64, 80, 3) and image.dtype == np.uint8
    assert mask.shape == (64, 80) and mask.dtype == np.int32
    assert 1 <= mask.max() <= 6
    gland, contour = glandseg.derive_targets(mask, 2)
    assert np.array_equal(gland, (mask > 0).astype(np.uint8))
    assert contour.max() == 1


def test_split_merge_round_trip():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(70, 45, 3), dtype=np.uint8)
    patches, grid = glandseg.split(image, 32, "reflect")
    assert patches.shape == (grid["rows"] * grid["cols"], 32, 32, 3)
    assert np.array_equal(glandseg.merge(patches, grid), image)
    gray = rng.random((40, 33), dtype=np.float32)
    p, g = glandseg.split(gray, 32, "zero")
    assert np.array_equal(glandseg.merge(p, g), gray)


def test_fuse_and_metrics():
    gland = np.full((40, 60), 0.05, np.float32)
    contour = np.full((40, 60), 0.05, np.float32)
    gland[10:30, 8:51] = 0.9
    contour[10:30, 28:31] = 0.9
    labels = glandseg.fuse(gland, contour, min_object_px=0)
    assert labels.max() == 2
    assert glandseg.object_f1(labels, labels)["f1"] == 1.0
    assert glandseg.object_dice(labels, labels) == 1.0
    assert glandseg.pixel_dice((labels > 0).astype(np.uint8), (labels > 0).astype(np.uint8)) == 1.0


def test_model_predict_shapes(tmp_path):
    model = glandseg.Model.random({"depth": 2, "base_filters": 4, "input_size": 32}, seed=1)
    image, _ = glandseg.synthetic_sample("m", 50, 70, 2)
    gland, contour = model.predict(image, batch_size=2)
    assert gland.shape == (50, 70) and contour.shape == (50, 70)
    assert 0.0 < gland.min() and gland.max() < 1.0
    model.save(tmp_path / "m.gsck")
    again = glandseg.Model.load(tmp_path / "m.gsck")
    assert again.config == model.config
    g2, _ = again.predict(image, batch_size=3)
    assert np.array_equal(g2, gland)


def test_errors_become_python_exceptions(tmp_path):
    with pytest.raises(ValueError):
        glandseg.split(np.zeros((10, 10), np.uint8), 16)
    with pytest.raises(ValueError):
        glandseg.Model.load(tmp_path / "missing.gsck")
    with pytest.raises(ValueError):
        glandseg.Model.random({"depth": 0})


def test_cli_entry_point(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"output_dir = {tmp_path / 'out'}\nsynth_n = 3\nsynth_height = 48\nsynth_width = 48\n")
    assert glandseg.main(["synth", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "train_1.png").exists()
    assert glandseg.main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2
