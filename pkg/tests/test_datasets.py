"""Synthetic benchmark tests: policies, generation, subsampling, IO."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colorbridge.datasets import (
    REFERENCE_DOMAINS,
    REFERENCE_SPLIT_SIZES,
    LabelState,
    SyntheticDataset,
    SyntheticTaskSpec,
    apply_policy,
    compute_norm_stats,
    denormalize_images,
    generate_dataset,
    load_dataset,
    normalize_images,
    reference_split,
    reference_task_spec,
    save_dataset,
    subsample,
)

from conftest import make_rng

NEG, POS, UNC = int(LabelState.NEGATIVE), int(LabelState.POSITIVE), int(LabelState.UNCERTAIN)


def small_spec(channels=1, k=2, **overrides):
    base = dict(
        domain="toy",
        channels=channels,
        image_size=16,
        families=("h_band", "disk", "grid", "blob")[:k],
        contrasts=(0.3,) * k,
        base_level=0.4,
        noise_sigma=0.05,
        positive_rate=(0.5,) * k,
        uncertain_rate=(0.2,) * k,
        hues=((1.0, 0.2, 0.2), (0.2, 1.0, 0.2), (0.2, 0.2, 1.0), (0.5, 0.5, 0.5))[:k]
        if channels == 3
        else None,
    )
    base.update(overrides)
    return SyntheticTaskSpec(**base)


class TestApplyPolicy:
    def test_certain_states_ignore_policy(self):
        for policy in ("u-ones", "u-zeros", "u-ignore"):
            targets, mask = apply_policy([POS, NEG], [policy, policy])
            assert targets.tolist() == [1.0, 0.0]
            assert mask.tolist() == [1.0, 1.0]

    def test_uncertain_u_ones(self):
        targets, mask = apply_policy([UNC], ["u-ones"])
        assert (targets.tolist(), mask.tolist()) == ([1.0], [1.0])

    def test_uncertain_u_zeros(self):
        targets, mask = apply_policy([UNC], ["u-zeros"])
        assert (targets.tolist(), mask.tolist()) == ([0.0], [1.0])

    def test_uncertain_u_ignore(self):
        targets, mask = apply_policy([UNC], ["u-ignore"])
        assert (targets.tolist(), mask.tolist()) == ([0.0], [0.0])

    def test_per_observation_policies(self):
        labels = [[UNC, UNC, UNC], [POS, NEG, POS]]
        targets, mask = apply_policy(labels, ["u-ones", "u-zeros", "u-ignore"])
        assert targets.tolist() == [[1.0, 0.0, 0.0], [1.0, 0.0, 1.0]]
        assert mask.tolist() == [[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]]

    def test_matrix_and_vector_agree(self):
        rng = make_rng(150)
        labels = rng.integers(0, 3, size=(6, 3))
        t_mat, m_mat = apply_policy(labels, ["u-ones", "u-zeros", "u-ignore"])
        for i in range(6):
            t_vec, m_vec = apply_policy(labels[i], ["u-ones", "u-zeros", "u-ignore"])
            assert np.array_equal(t_mat[i], t_vec)
            assert np.array_equal(m_mat[i], m_vec)

    def test_invalid_state_rejected(self):
        with pytest.raises(ValueError, match="invalid label state"):
            apply_policy([3], ["u-ones"])

    def test_policy_count_mismatch(self):
        with pytest.raises(ValueError):
            apply_policy([POS, NEG], ["u-ones"])

    def test_unknown_policy_rejected(self):
        with pytest.raises(ValueError):
            apply_policy([POS], ["u-sometimes"])

    @given(st.lists(st.integers(0, 2), min_size=1, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_property_mask_zero_only_for_ignored_uncertain(self, states):
        policies = ["u-ignore" if i % 2 == 0 else "u-zeros" for i in range(len(states))]
        targets, mask = apply_policy(states, policies)
        for j, s in enumerate(states):
            expect_masked = s == UNC and policies[j] == "u-ignore"
            assert (mask[j] == 0.0) == expect_masked
            if s == POS:
                assert targets[j] == 1.0


class TestGeneration:
    def test_deterministic(self):
        spec = small_spec()
        a = generate_dataset(spec, 8, seed=3)
        b = generate_dataset(spec, 8, seed=3)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_sample_depends_only_on_index(self):
        spec = small_spec()
        short = generate_dataset(spec, 4, seed=3)
        longer = generate_dataset(spec, 9, seed=3)
        assert np.array_equal(short.images, longer.images[:4])
        assert np.array_equal(short.labels, longer.labels[:4])

    def test_different_seeds_differ(self):
        spec = small_spec()
        a = generate_dataset(spec, 6, seed=3)
        b = generate_dataset(spec, 6, seed=4)
        assert not np.array_equal(a.images, b.images)

    def test_images_quantized_to_8bit_grid(self):
        ds = generate_dataset(small_spec(), 6, seed=5)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        scaled = ds.images * 255.0
        assert np.allclose(scaled, np.round(scaled), atol=1e-4)

    def test_label_rate_within_3_sigma(self):
        # positive_rate 0.5 of n=400 draws: sigma = 10 around 200.
        spec = small_spec(k=1, uncertain_rate=(0.0,))
        ds = generate_dataset(spec, 400, seed=6)
        n_pos = int((ds.labels == POS).sum())
        assert 170 <= n_pos <= 230

    def test_uncertain_rate_within_3_sigma(self):
        # P(uncertain) = positive_rate * uncertain_rate = 0.2; n=400,
        # sigma = sqrt(400 * .2 * .8) = 8.
        spec = small_spec(k=1, uncertain_rate=(0.4,))
        ds = generate_dataset(spec, 400, seed=7)
        n_unc = int((ds.labels == UNC).sum())
        assert 80 - 24 <= n_unc <= 80 + 24

    def test_positive_samples_are_brighter(self):
        # Patterns add positive contrast, so mean intensity separates classes.
        spec = small_spec(k=1, uncertain_rate=(0.0,))
        ds = generate_dataset(spec, 200, seed=8)
        means = ds.images.mean(axis=(1, 2, 3))
        pos = means[ds.labels[:, 0] == POS].mean()
        neg = means[ds.labels[:, 0] == NEG].mean()
        assert pos > neg + 0.01

    def test_uncertain_renders_fainter_than_positive(self):
        spec = small_spec(k=1, uncertain_rate=(0.5,))
        ds = generate_dataset(spec, 400, seed=9)
        means = ds.images.mean(axis=(1, 2, 3))
        pos = means[ds.labels[:, 0] == POS].mean()
        unc = means[ds.labels[:, 0] == UNC].mean()
        neg = means[ds.labels[:, 0] == NEG].mean()
        assert pos > unc > neg

    def test_bad_n_rejected(self):
        with pytest.raises(ValueError):
            generate_dataset(small_spec(), 0, seed=1)

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="hue"):
            small_spec(channels=3, hues=None)
        with pytest.raises(ValueError, match="unknown pattern"):
            small_spec(families=("h_band", "swirl"))
        with pytest.raises(ValueError, match="contrasts"):
            small_spec(contrasts=(0.3,))
        with pytest.raises(ValueError, match="channels"):
            small_spec(channels=2)

    def test_dataset_array_validation(self):
        with pytest.raises(ValueError):
            SyntheticDataset(np.zeros((3, 1, 4, 4)), np.zeros((2, 2)), "toy")

    def test_getitem(self):
        ds = generate_dataset(small_spec(), 3, seed=10)
        sample = ds[1]
        assert sample.domain == "toy"
        assert np.array_equal(sample.image, ds.images[1])
        assert np.array_equal(sample.labels, ds.labels[1])


class TestSubsample:
    def test_fraction_one_is_identity(self):
        ds = generate_dataset(small_spec(), 10, seed=11)
        assert subsample(ds, 1.0, seed=0) is ds

    def test_size_is_rounded_share(self):
        ds = generate_dataset(small_spec(), 200, seed=12)
        assert len(subsample(ds, 0.25, seed=0)) == 50
        assert len(subsample(ds, 0.1, seed=0)) == 20

    def test_rows_are_original_samples(self):
        ds = generate_dataset(small_spec(), 60, seed=13)
        sub = subsample(ds, 0.5, seed=1)
        full = {img.tobytes() for img in ds.images}
        assert all(img.tobytes() in full for img in sub.images)

    def test_within_one_of_proportional_marginals(self):
        ds = generate_dataset(small_spec(), 300, seed=14)
        for fraction in (0.5, 0.25, 0.1):
            sub = subsample(ds, fraction, seed=2)
            for j in range(ds.n_observations):
                for state in (NEG, POS, UNC):
                    want = fraction * int((ds.labels[:, j] == state).sum())
                    got = int((sub.labels[:, j] == state).sum())
                    assert abs(got - want) <= 1.0 + 1e-9, (fraction, j, state)

    def test_large_case_within_one(self):
        ds = reference_split("target_a", "train", n=800)
        sub = subsample(ds, 0.1, seed=3)
        assert len(sub) == 80
        for j in range(ds.n_observations):
            for state in (NEG, POS, UNC):
                want = 0.1 * int((ds.labels[:, j] == state).sum())
                got = int((sub.labels[:, j] == state).sum())
                assert abs(got - want) <= 1.0 + 1e-9

    def test_deterministic_per_seed(self):
        ds = generate_dataset(small_spec(), 100, seed=15)
        a = subsample(ds, 0.3, seed=4)
        b = subsample(ds, 0.3, seed=4)
        c = subsample(ds, 0.3, seed=5)
        assert np.array_equal(a.images, b.images)
        assert not np.array_equal(a.images, c.images)

    def test_bad_fraction_rejected(self):
        ds = generate_dataset(small_spec(), 10, seed=16)
        for fraction in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                subsample(ds, fraction, seed=0)
        with pytest.raises(ValueError, match="selects none"):
            subsample(ds, 0.01, seed=0)


class TestNormalization:
    def test_matches_pooled_oracle(self):
        ds = generate_dataset(small_spec(), 12, seed=17)
        stats = compute_norm_stats(ds)
        flat = ds.images.astype(np.float64).reshape(-1)
        assert stats.mean == pytest.approx(float(flat.mean()), abs=1e-12)
        assert stats.std == pytest.approx(float(flat.std()), abs=1e-12)

    def test_normalized_split_is_standard(self):
        ds = generate_dataset(small_spec(), 12, seed=18)
        stats = compute_norm_stats(ds)
        normed = normalize_images(ds.images, stats)
        assert normed.dtype == np.float32
        assert abs(float(normed.mean())) < 1e-4
        assert float(normed.std()) == pytest.approx(1.0, abs=1e-4)

    def test_round_trip(self):
        ds = generate_dataset(small_spec(), 6, seed=19)
        stats = compute_norm_stats(ds)
        back = denormalize_images(normalize_images(ds.images, stats), stats)
        assert np.allclose(back, ds.images, atol=1e-6)

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError, match="zero-variance"):
            compute_norm_stats(np.full((2, 1, 4, 4), 0.5, dtype=np.float32))

    def test_accepts_raw_arrays(self):
        arr = make_rng(151).uniform(size=(3, 1, 5, 5)).astype(np.float32)
        stats = compute_norm_stats(arr)
        assert stats.std > 0


class TestSaveLoad:
    def test_round_trip_bitwise(self, tmp_path):
        for channels in (1, 3):
            ds = generate_dataset(small_spec(channels=channels), 5, seed=20)
            save_dataset(ds, tmp_path / f"c{channels}")
            back = load_dataset(tmp_path / f"c{channels}")
            assert np.array_equal(back.images, ds.images)
            assert np.array_equal(back.labels, ds.labels)
            assert back.domain == ds.domain

    def test_uncertain_token_round_trips(self, tmp_path):
        spec = small_spec(k=1, uncertain_rate=(1.0,))
        ds = generate_dataset(spec, 20, seed=21)
        assert (ds.labels == UNC).any()
        save_dataset(ds, tmp_path / "u")
        back = load_dataset(tmp_path / "u")
        assert np.array_equal(back.labels, ds.labels)

    def test_missing_index_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_bad_label_token_rejected(self, tmp_path):
        ds = generate_dataset(small_spec(k=1), 2, seed=22)
        index = save_dataset(ds, tmp_path / "bad")
        lines = index.read_text().splitlines()
        lines[1] = lines[1].rsplit(",", 1)[0] + ",X"
        index.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="bad label token"):
            load_dataset(tmp_path / "bad")

    def test_empty_index_rejected(self, tmp_path):
        d = tmp_path / "empty"
        d.mkdir()
        (d / "index.csv").write_text("sample_id,file,domain,label_0\n")
        with pytest.raises(ValueError, match="empty index"):
            load_dataset(d)


class TestReferenceBenchmark:
    def test_domain_channel_layout(self):
        for domain in REFERENCE_DOMAINS:
            spec = reference_task_spec(domain)
            assert spec.channels == (3 if domain == "source_rgb" else 1)
            assert spec.image_size == 32
            assert spec.n_observations == 4

    def test_split_sizes(self):
        assert REFERENCE_SPLIT_SIZES == {"train": 2000, "val": 500, "test": 500}

    def test_eval_splits_have_no_uncertain_labels(self):
        for split in ("val", "test"):
            spec = reference_task_spec("target_a", split)
            assert spec.uncertain_rate == (0.0,) * 4
        ds = reference_split("target_a", "val", n=60)
        assert not (ds.labels == UNC).any()

    def test_train_split_carries_uncertain_labels(self):
        ds = reference_split("target_a", "train", n=300)
        assert (ds.labels == UNC).any()

    def test_source_train_is_clean(self):
        spec = reference_task_spec("source_rgb", "train")
        assert spec.uncertain_rate == (0.0,) * 4

    def test_splits_and_domains_are_disjoint_streams(self):
        a_train = reference_split("target_a", "train", n=4)
        a_val = reference_split("target_a", "val", n=4)
        b_train = reference_split("target_b", "train", n=4)
        assert not np.array_equal(a_train.images, a_val.images)
        assert not np.array_equal(a_train.images, b_train.images)

    def test_shared_families_differ_from_target_b(self):
        assert reference_task_spec("target_a").families == reference_task_spec("target_a_prime").families
        assert reference_task_spec("target_a").families != reference_task_spec("target_b").families

    def test_unknown_domain_or_split(self):
        with pytest.raises(ValueError, match="unknown reference domain"):
            reference_task_spec("target_c")
        with pytest.raises(ValueError, match="unknown split"):
            reference_task_spec("target_a", "holdout")
