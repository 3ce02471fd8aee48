import numpy as np
import pytest

from aecfe import featio, forest
from aecfe.datamodel import CANONICAL_CLASS_NAMES, SplitSpec, stratified_split
from aecfe.synthgen import (
    DEFAULT_SHIFTS,
    GRID,
    MORPHOLOGIES,
    DomainShift,
    GenSpec,
    domain_transform,
    gen_cell_image,
    gen_dataset,
    pseudo_roi_features,
    render_cell,
)

FAST_FOREST = forest.ForestConfig(n_trees=60, max_depth=16, seed=0)


def test_one_morphology_per_class():
    assert len(MORPHOLOGIES) == len(CANONICAL_CLASS_NAMES)
    for m in MORPHOLOGIES:
        assert 0 < m.nucleus_area_fraction <= 1
        assert 0 <= m.cytoplasm_granularity <= 1
        assert 0 < m.cell_radius_fraction <= 1


def test_spec_validation():
    with pytest.raises(ValueError):
        GenSpec(num_domains=1)
    with pytest.raises(ValueError):
        GenSpec(num_classes=14)
    with pytest.raises(ValueError):
        GenSpec(per_class_per_domain=0)
    with pytest.raises(ValueError):
        DomainShift(brightness_scale=0.0)
    with pytest.raises(ValueError):
        DomainShift(hue_shift=float("nan"))
    with pytest.raises(ValueError):
        DomainShift(rbc_density=1.5)


def test_image_is_deterministic():
    spec = GenSpec()
    a = gen_cell_image(3, 1, spec, 1234)
    b = gen_cell_image(3, 1, spec, 1234)
    assert a.dtype == np.uint8 and a.shape == (64, 64, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, gen_cell_image(3, 1, spec, 1235))


def test_out_of_range_class_or_domain():
    spec = GenSpec()
    with pytest.raises(ValueError):
        gen_cell_image(5, 0, spec, 0)
    with pytest.raises(ValueError):
        gen_cell_image(0, 3, spec, 0)


def test_zero_density_has_no_distractors():
    spec = GenSpec(domain_shift_params=(DomainShift(rbc_density=0.0), DomainShift(rbc_density=0.0), DomainShift()))
    for seed in range(20):
        cell = render_cell(seed % 5, seed % 2, spec, seed)
        assert not cell.rbc_mask.any()
        img = cell.image.astype(int)
        outside = ~cell.cell_mask
        # background is pale pink; distractor rims are strongly red
        assert not np.any((img[..., 0] - img[..., 1] > 40)[outside])


def test_distractors_stay_outside_cell():
    spec = GenSpec()
    for seed in range(20):
        cell = render_cell(seed % 5, 1, spec, seed)
        assert cell.rbc_mask.any()
        assert not (cell.rbc_mask & cell.cell_mask).any()


def test_lobe_count_changes_nucleus_area():
    spec = GenSpec(num_classes=9)
    banded, segmented = 7, 8
    assert MORPHOLOGIES[banded].nucleus_lobe_count != MORPHOLOGIES[segmented].nucleus_lobe_count
    a = np.mean([render_cell(banded, 0, spec, s).nucleus_mask.sum() for s in range(100)])
    b = np.mean([render_cell(segmented, 0, spec, s).nucleus_mask.sum() for s in range(100)])
    assert abs(a - b) / max(a, b) > 0.10


def test_identity_transform_is_noop():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    assert np.array_equal(domain_transform(img, DomainShift()), img)


def test_brightness_doubles_and_clamps():
    img = np.full((8, 8, 3), 100, dtype=np.uint8)
    assert np.all(domain_transform(img, DomainShift(brightness_scale=2.0)) == 200)
    img = np.full((8, 8, 3), 128, dtype=np.uint8)
    assert np.all(domain_transform(img, DomainShift(brightness_scale=2.0)) == 255)


def test_full_hue_turn_matches_identity():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    turned = domain_transform(img, DomainShift(hue_shift=360.0)).astype(int)
    assert np.max(np.abs(turned - img.astype(int))) <= 1


def test_hue_rotation_keeps_gray():
    img = np.full((4, 4, 3), 90, dtype=np.uint8)
    assert np.array_equal(domain_transform(img, DomainShift(hue_shift=73.0)), img)


def test_features_deterministic_and_shaped():
    spec = GenSpec()
    img = gen_cell_image(0, 0, spec, 5)
    a = pseudo_roi_features(img, spec)
    b = pseudo_roi_features(img, spec)
    assert a.dtype == np.float32 and a.shape == (256,)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_black_image_statistics_are_zero():
    spec = GenSpec()
    feats = pseudo_roi_features(np.zeros((64, 64, 3), dtype=np.uint8), spec)
    n_stats = 2 * GRID * GRID * 3
    assert np.all(feats[:n_stats] == 0.0)


def test_patch_means_match_direct_computation():
    spec = GenSpec(image_side=16, feature_dim=96)
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    feats = pseudo_roi_features(img, spec)
    x = img / 255.0
    patch = x[4:8, 8:12]
    means = feats[:48].reshape(4, 4, 3)
    variances = feats[48:].reshape(4, 4, 3)
    np.testing.assert_allclose(means[1, 2], patch.mean(axis=(0, 1)), atol=1e-6)
    np.testing.assert_allclose(variances[1, 2], patch.var(axis=(0, 1)), atol=1e-6)


def test_projection_shared_across_domains():
    # identical images give identical features regardless of which domain produced them
    spec = GenSpec()
    img = gen_cell_image(1, 0, spec, 9)
    assert np.array_equal(pseudo_roi_features(img, spec), pseudo_roi_features(img.copy(), spec))
    other_seed = GenSpec(seed=43)
    assert not np.array_equal(pseudo_roi_features(img, spec), pseudo_roi_features(img, other_seed))


def test_features_truncate_short_dim():
    spec = GenSpec(feature_dim=10)
    feats = pseudo_roi_features(gen_cell_image(0, 0, spec, 0), spec)
    assert feats.shape == (10,)


def test_default_dataset_counts(default_dataset):
    ds = default_dataset
    assert len(ds) == 600
    assert np.array_equal(np.bincount(ds.domains), [200, 200, 200])
    assert np.array_equal(np.bincount(ds.labels), [120] * 5)
    assert ds.meta.seed == 42


def test_extra_domains_get_shifts():
    spec = GenSpec(num_domains=5, per_class_per_domain=1, image_side=16, feature_dim=32)
    assert spec.shift(1) == DEFAULT_SHIFTS[1]
    assert spec.shift(4) != spec.shift(3)
    assert len(gen_dataset(spec)) == 25


def test_dataset_bytes_stable(tmp_path):
    spec = GenSpec(per_class_per_domain=4)
    featio.write_dataset(gen_dataset(spec), tmp_path / "a")
    featio.write_dataset(gen_dataset(spec), tmp_path / "b")
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.slow
def test_in_domain_class_signal(default_dataset):
    ds = default_dataset
    train, test = stratified_split(ds, SplitSpec(0.8, seed=0))
    for k in range(3):
        tr = train.domains == k
        te = test.domains == k
        model = forest.fit(train.features[tr], train.labels[tr], FAST_FOREST, n_classes=5)
        acc = forest.accuracy(test.labels[te], forest.predict(model, test.features[te]))
        assert acc > 0.9, f"domain {k}: {acc}"


@pytest.mark.slow
def test_domain_shift_is_detectable(default_dataset):
    ds = default_dataset
    train, test = stratified_split(ds, SplitSpec(0.8, seed=0))
    model = forest.fit(train.features, train.domains, FAST_FOREST, n_classes=3)
    assert forest.accuracy(test.domains, forest.predict(model, test.features)) > 0.8
