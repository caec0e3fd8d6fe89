import numpy as np
import pytest

from t2ifuse.corpus import load_dataset
from t2ifuse.embedding import OracleFeatureProvider
from t2ifuse.synthetic import CLASS_NAMES, TEXT_BIT_WORDS, build_separability_fixture


def test_fixture_files_and_balance(tmp_path):
    fix = build_separability_fixture(tmp_path, samples_per_class=10, seed=4)
    samples, space = load_dataset(fix.dataset_csv)
    assert fix.num_samples == 40
    assert len(samples) == 40
    assert sorted(space.class_names) == sorted(CLASS_NAMES)
    counts = {c: sum(1 for s in samples if space.name_of(s.label) == c) for c in CLASS_NAMES}
    assert all(v == 10 for v in counts.values())


def test_text_bit_word_matches_class(tmp_path):
    fix = build_separability_fixture(tmp_path, samples_per_class=8, seed=5)
    samples, space = load_dataset(fix.dataset_csv)
    for sample in samples:
        name = space.name_of(sample.label)
        text_bit = CLASS_NAMES.index(name) // 2
        assert sample.text.split()[0] == TEXT_BIT_WORDS[text_bit]


def test_signal_mode_oracle_features_separate_image_bit(tmp_path):
    fix = build_separability_fixture(tmp_path, samples_per_class=8, seed=6, noise_scale=0.05)
    samples, space = load_dataset(fix.dataset_csv)
    oracle = OracleFeatureProvider(fix.oracle_features)
    assert oracle.dim == fix.image_dim
    for sample in samples:
        pooled, _ = oracle.features_for(sample.id)
        image_bit = CLASS_NAMES.index(space.name_of(sample.label)) % 2
        # templates are +/- all-ones; the mean component recovers the bit
        assert (pooled.mean() < 0) == bool(image_bit)


def test_noise_mode_destroys_image_bit(tmp_path):
    fix = build_separability_fixture(
        tmp_path, samples_per_class=50, seed=7, image_mode="noise"
    )
    samples, space = load_dataset(fix.dataset_csv)
    oracle = OracleFeatureProvider(fix.oracle_features)
    means = {0: [], 1: []}
    for sample in samples:
        image_bit = CLASS_NAMES.index(space.name_of(sample.label)) % 2
        pooled, _ = oracle.features_for(sample.id)
        means[image_bit].append(pooled.mean())
    # class-conditional feature means are indistinguishable under noise
    assert abs(np.mean(means[0]) - np.mean(means[1])) < 0.2


def test_fixture_determinism(tmp_path):
    a = build_separability_fixture(tmp_path / "a", samples_per_class=6, seed=9)
    b = build_separability_fixture(tmp_path / "b", samples_per_class=6, seed=9)
    assert a.dataset_csv.read_bytes() == b.dataset_csv.read_bytes()
    assert a.oracle_features.read_bytes() == b.oracle_features.read_bytes()


def test_invalid_mode(tmp_path):
    with pytest.raises(ValueError):
        build_separability_fixture(tmp_path, image_mode="hybrid")
