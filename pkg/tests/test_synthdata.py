import dataclasses

import numpy as np
import pytest

from splitfed import synthdata as sd
from splitfed.errors import FormatError, UnsupportedVersionError, ValidationError


def test_generation_is_deterministic():
    spec = sd.DEFAULT_SPECS[1]
    assert sd.generate_domain(spec, 5, 3, 11) == sd.generate_domain(spec, 5, 3, 11)
    assert sd.generate_domain(spec, 5, 3, 11) != sd.generate_domain(spec, 5, 3, 12)


def test_single_sample_regenerates_from_its_stream():
    spec = sd.DEFAULT_SPECS[0]
    split = sd.generate_domain(spec, 4, 2, 3)
    assert sd.render_sample(spec, sd.stream(3, "D1", "train", 2)) == split.train[2]
    assert sd.render_sample(spec, sd.stream(3, "D1", "test", 1)) == split.test[1]


def test_noiseless_single_blob_is_two_valued_and_matches_mask():
    spec = sd.DomainSpec("clean", noise_std=0.0, blob_count_range=(1, 1))
    for s in sd.generate_domain(spec, 10, 1, 0).train:
        values = np.unique(s.image)
        assert len(values) == 2
        np.testing.assert_array_equal(s.image > values.mean(), s.mask > 0)


def test_mask_fraction_and_value_ranges():
    for split in sd.default_centres(0, scale=0.1):
        for s in split.train + split.test:
            assert s.image.dtype == np.float32 and s.image.shape == (1, 32, 32)
            assert 0 <= s.image.min() and s.image.max() <= 1
            assert set(np.unique(s.mask)) <= {0.0, 1.0}
            assert 0 < s.mask.mean() < sd.MAX_FOREGROUND


def test_background_shift_is_measurable():
    a = dataclasses.replace(sd.DomainSpec("a"), background_level=0.2)
    b = dataclasses.replace(sd.DomainSpec("b"), background_level=0.5)
    ma = np.mean([s.image.mean() for s in sd.generate_domain(a, 100, 1, 0).train])
    mb = np.mean([s.image.mean() for s in sd.generate_domain(b, 100, 1, 0).train])
    assert mb - ma >= 0.2


def test_nearest_neighbour_separates_d1_from_d2():
    d1, d2 = sd.DEFAULT_SPECS[0], sd.DEFAULT_SPECS[1]

    def feats(split):
        return np.array([[s.image.mean(), s.image.var()] for s in split])

    train = np.vstack([feats(sd.generate_domain(d1, 50, 1, 1).train), feats(sd.generate_domain(d2, 50, 1, 1).train)])
    labels = np.array([0] * 50 + [1] * 50)
    test = np.vstack([feats(sd.generate_domain(d1, 1, 50, 2).test), feats(sd.generate_domain(d2, 1, 50, 2).test)])
    truth = np.array([0] * 50 + [1] * 50)
    nearest = np.argmin(((test[:, None] - train[None]) ** 2).sum(-1), axis=1)
    assert np.mean(labels[nearest] == truth) >= 0.9


def test_default_centres_sizes_and_distinct_specs():
    centres = sd.default_centres(0)
    sizes = [(c.domain_id, len(c.train), len(c.test)) for c in centres]
    assert sizes == [("D1", 400, 100), ("D2", 10, 10), ("D3", 260, 46), ("D4", 83, 15)]
    assert min(centres, key=lambda c: len(c.train)).domain_id == "D2"
    specs = sd.default_specs()
    for i in range(4):
        for j in range(i + 1, 4):
            a, b = dataclasses.asdict(specs[i]), dataclasses.asdict(specs[j])
            assert sum(a[k] != b[k] for k in a if k != "domain_id") >= 2


def test_degenerate_specs_rejected():
    with pytest.raises(ValidationError):
        sd.generate_domain(sd.DomainSpec("x", blob_radius_range=(5.0, 2.0)), 1, 1, 0)
    with pytest.raises(ValidationError):
        sd.generate_domain(sd.DomainSpec("x", blob_count_range=(0, 2)), 1, 1, 0)
    with pytest.raises(ValidationError):
        sd.generate_domain(sd.DomainSpec("x"), 0, 1, 0)


def test_sfds_round_trip_and_errors(tmp_path):
    split = sd.generate_domain(sd.DEFAULT_SPECS[2], 2, 1, 5)
    path = tmp_path / "d.sfds"
    sd.save_split(split, path)
    assert sd.load_split(path) == split
    data = path.read_bytes()
    assert data[:4] == b"SFDS" and data[4] == 1
    with pytest.raises(FormatError, match="offset"):
        sd.split_from_bytes(data[:-5])
    with pytest.raises(UnsupportedVersionError):
        sd.split_from_bytes(data[:4] + b"\x02" + data[5:])
    with pytest.raises(FormatError):
        sd.split_from_bytes(b"NOPE" + data[4:])


def test_pgm_export(tmp_path):
    s = sd.generate_domain(sd.DEFAULT_SPECS[0], 1, 1, 0).train[0]
    img_path, mask_path = sd.export_pgm(s, tmp_path, "x")
    raw = mask_path.read_bytes()
    assert raw.startswith(b"P5\n32 32\n255\n")
    assert set(raw[len(b"P5\n32 32\n255\n"):]) <= {0, 255}
    back = sd.read_pgm(img_path).astype(np.float64) / 255
    assert np.max(np.abs(back - s.image[0])) <= 1 / 255
    with pytest.raises(ValidationError):
        sd.export_pgm(sd.Sample(np.zeros((3, 4, 4), np.float32), np.zeros((1, 4, 4), np.float32)), tmp_path)
