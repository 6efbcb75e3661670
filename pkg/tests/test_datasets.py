import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from drue._validation import ConfigurationError
from drue.datasets import (
    CORRUPTION_KINDS, MANIFEST_HEADER, Rung, Sample, ShiftLadder, apply_corruption, build_ladder,
    generate_synthetic, label_from_ratio, load_external, load_split, render_fundus, save_split,
)

SEVERITIES = (0.0, 0.25, 0.5, 0.75, 1.0)


@pytest.fixture(scope="module")
def split():
    return generate_synthetic(n_per_class=100, image_size=64, seed=7)


def _mse(a, b):
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


def test_split_arithmetic_and_balance(split):
    assert (len(split.train), len(split.val), len(split.test)) == (160, 20, 20)
    for part in (split.train, split.val, split.test):
        labels = [s.label for s in part]
        assert abs(labels.count(0) - labels.count(1)) <= 1


def test_split_ids_disjoint(split):
    ids = [{s.sample_id for s in part} for part in (split.train, split.val, split.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, ids)) == 200


def test_images_in_range_and_fixed_size(split):
    for s in split.train[:20] + split.test:
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_generation_is_bitwise_deterministic(split):
    again = generate_synthetic(n_per_class=100, image_size=64, seed=7)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(split.train, again.train))
    other = generate_synthetic(n_per_class=100, image_size=64, seed=8)
    assert not np.array_equal(split.train[0].image, other.train[0].image)


def test_subset_generation_matches_prefix():
    # per-index seeds: a larger dataset regenerates the same first images
    small, large = generate_synthetic(10, 32, seed=1), generate_synthetic(20, 32, seed=1)
    assert np.array_equal(small.train[0].image, large.train[0].image)


def test_class_rule_boundary_is_strict():
    assert label_from_ratio(0.6) == 0
    assert label_from_ratio(np.nextafter(0.6, 1)) == 1
    assert label_from_ratio(0.3) == 0 and label_from_ratio(0.9) == 1


def test_cup_is_larger_for_class_one():
    # the bright cup area grows with the ratio when everything else is fixed
    small = render_fundus(np.random.default_rng(0), 64, 0.4)
    large = render_fundus(np.random.default_rng(0), 64, 0.8)
    assert (large.mean(axis=-1) > 0.9).sum() > (small.mean(axis=-1) > 0.9).sum()


@pytest.mark.parametrize("n, size", [(0, 64), (10, 16), (2.5, 64)])
def test_invalid_generation_args(n, size):
    with pytest.raises(ConfigurationError):
        generate_synthetic(n, size)


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_severity_zero_is_identity(split, kind):
    s = split.test[0]
    assert apply_corruption(s, kind, 0.0) is s


def test_gaussian_noise_changes_pixels(split):
    s = split.test[0]
    out = apply_corruption(s, "gaussian_noise", 0.5)
    diff = out.image.astype(np.float64) - s.image
    assert np.mean(diff**2) > 0
    assert out.sample_id == s.sample_id and out.label == s.label


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_corruption_deterministic_in_id_and_seed(split, kind):
    s = split.test[3]
    a, b = apply_corruption(s, kind, 0.6, seed=4), apply_corruption(s, kind, 0.6, seed=4)
    assert np.array_equal(a.image, b.image)


def test_noise_depends_on_seed(split):
    s = split.test[3]
    a, b = apply_corruption(s, "gaussian_noise", 0.6, seed=0), apply_corruption(s, "gaussian_noise", 0.6, seed=1)
    assert not np.array_equal(a.image, b.image)


def test_unknown_kind_and_bad_severity(split):
    with pytest.raises(ConfigurationError):
        apply_corruption(split.test[0], "snow", 0.5)
    with pytest.raises(ConfigurationError):
        apply_corruption(split.test[0], "blur", 1.5)


def test_uniform_replace_forgets_source(split):
    X = np.stack([s.image for s in split.test]).astype(np.float64)
    Y = np.stack([apply_corruption(s, "uniform_noise_replace", 1.0).image for s in split.test]).astype(np.float64)
    r = np.corrcoef(X.ravel(), Y.ravel())[0, 1]
    assert abs(r) < 0.02


@st.composite
def images(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    size = draw(st.sampled_from([8, 16, 17]))
    rng = np.random.default_rng(seed)
    return Sample(rng.uniform(0, 1, (size, size, 3)).astype(np.float32), 0, "h", f"h{seed}")


@settings(max_examples=60, deadline=None)
@given(images(), st.sampled_from(CORRUPTION_KINDS), st.integers(0, 3))
def test_mse_monotone_in_severity_and_range_safe(sample, kind, seed):
    errs = []
    for sev in SEVERITIES:
        out = apply_corruption(sample, kind, sev, seed)
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0
        errs.append(_mse(sample.image, out.image))
    assert all(b >= a - 1e-12 for a, b in zip(errs, errs[1:])), errs


def test_ladder_mse_monotone_on_fundus_images(split):
    for s in split.test[:5]:
        for kind in CORRUPTION_KINDS:
            errs = [_mse(s.image, apply_corruption(s, kind, v).image) for v in SEVERITIES]
            assert all(b >= a - 1e-12 for a, b in zip(errs, errs[1:])), (kind, errs)


def test_single_kind_ladder_counts(split):
    ladder = build_ladder(split.test, ["blur"], [0.0, 0.25, 0.5, 1.0])
    assert len(ladder.rungs) == 4 and all(len(r.samples) == 20 for r in ladder.rungs)
    assert ladder.names() == ["clean", "blur@0.25", "blur@0.50", "blur@1.00"]
    assert all(a == b for a, b in zip(ladder.rungs[0].samples, split.test))


def test_chained_ladder_pairs_kinds_with_severities(split):
    ladder = build_ladder(split.test, ["blur", "gaussian_noise", "uniform_noise_replace"], [0.0, 0.25, 0.5, 1.0])
    assert [(r.kind, r.severity) for r in ladder.rungs] == [
        (None, 0.0), ("blur", 0.25), ("gaussian_noise", 0.5), ("uniform_noise_replace", 1.0)]
    assert ladder["gaussian_noise@0.50"].samples[0].source.endswith("gaussian_noise@0.5")


def test_ladder_without_clean_rung(split):
    ladder = build_ladder(split.test[:4], ["contrast"], [0.5, 1.0])
    assert [r.severity for r in ladder.rungs] == [0.5, 1.0]


@pytest.mark.parametrize(
    "kinds, severities",
    [(["blur"], []), (["blur"], [0.5, 0.25]), (["blur"], [0.5, 0.5]), ([], [0.5]),
     (["blur", "contrast"], [0.0, 0.5, 0.75, 1.0]), (["fog"], [0.5])],
)
def test_ladder_errors(split, kinds, severities):
    with pytest.raises(ConfigurationError):
        build_ladder(split.test[:2], kinds, severities)


def test_ladder_rejects_unordered_rungs():
    with pytest.raises(ConfigurationError):
        ShiftLadder([Rung("a", "blur", 0.5, []), Rung("b", "blur", 0.25, [])])


def _write_png(path, array):
    Image.fromarray(array).save(path)


def test_load_external_skips_corrupt_file(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("b.png", "a.png", "c.jpg"):
        _write_png(tmp_path / name, rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
    (tmp_path / "d.png").write_bytes(b"not an image")
    with pytest.warns(UserWarning, match="d.png"):
        samples = load_external(tmp_path, 64)
    assert [s.sample_id.split("/")[-1] for s in samples] == ["a.png", "b.png", "c.jpg"]
    assert [p for p, _ in samples.skipped] == ["d.png"]
    assert all(s.source == tmp_path.name and s.label == -1 for s in samples)


def test_load_external_identity_resize(tmp_path):
    arr = np.random.default_rng(1).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    _write_png(tmp_path / "x.png", arr)
    (s,) = load_external(tmp_path, 64)
    np.testing.assert_array_equal(s.image, arr.astype(np.float32) / 255.0)


def test_load_external_constant_resize(tmp_path):
    _write_png(tmp_path / "g.png", np.full((128, 128, 3), 128, dtype=np.uint8))
    (s,) = load_external(tmp_path, 64)
    assert s.image.shape == (64, 64, 3)
    np.testing.assert_allclose(s.image, 128 / 255.0, atol=1e-7)


def test_load_external_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_external(tmp_path)
    with pytest.raises(ConfigurationError):
        load_external(tmp_path / "missing")
    (tmp_path / "junk.png").write_bytes(b"\x00")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ConfigurationError):
            load_external(tmp_path)


def test_split_round_trip_through_disk(tmp_path):
    split = generate_synthetic(5, 32, seed=2)
    manifest = save_split(split, tmp_path)
    assert manifest.read_text().splitlines()[0] == ",".join(MANIFEST_HEADER)
    back = load_split(tmp_path)
    assert back.seed == 2
    for a, b in zip(split.train + split.val + split.test, back.train + back.val + back.test):
        assert (a.sample_id, a.label, a.source) == (b.sample_id, b.label, b.source)
        np.testing.assert_array_equal(np.round(a.image * 255) / 255, b.image)
