import hashlib
import math
import pathlib

import numpy as np
import pytest

from unismmc import synthgen
from unismmc.errors import ConfigurationError, FormatError


def small_spec(**overrides):
    base = dict(
        num_classes=3,
        feature_dims=(4, 5),
        train_samples=30,
        valid_samples=9,
        test_samples=9,
        separation=1.0,
        noise_sigma=(0.1, 0.1),
        corruption_rate=(0.3, 0.3),
        overlap="disjoint",
        seed=7,
    )
    base.update(overrides)
    return synthgen.SynthSpec(**base)


def test_generate_is_deterministic_and_files_are_bitwise_identical(tmp_path):
    spec = small_spec()
    first = tmp_path / "a.umds"
    second = tmp_path / "b.umds"
    synthgen.save(synthgen.generate(spec), first)
    synthgen.save(synthgen.generate(spec), second)
    assert first.read_bytes() == second.read_bytes()


def test_different_seeds_differ():
    a = synthgen.generate(small_spec(seed=1))
    b = synthgen.generate(small_spec(seed=2))
    assert not np.array_equal(a.train.batch.features[0], b.train.batch.features[0])


def test_noiseless_uncorrupted_data_is_trivially_classifiable():
    spec = small_spec(noise_sigma=(0.0, 0.0), corruption_rate=(0.0, 0.0))
    dataset = synthgen.generate(spec)
    for m in range(2):
        train_x = dataset.train.batch.features[m]
        train_y = dataset.train.batch.labels
        test_x = dataset.test.batch.features[m]
        test_y = dataset.test.batch.labels
        # nearest-training-sample classifier: exact prototype match at sigma=0
        distances = np.linalg.norm(test_x[:, None, :] - train_x[None, :, :], axis=2)
        predictions = train_y[np.argmin(distances, axis=1)]
        assert np.array_equal(predictions, test_y)


def test_disjoint_corruption_counts_and_no_overlap():
    spec = small_spec(corruption_rate=(0.3, 0.25))
    dataset = synthgen.generate(spec)
    for split_name in synthgen.SPLIT_NAMES:
        split = dataset.splits[split_name]
        n = split.batch.size
        flags_a, flags_b = split.corrupted
        assert flags_a.sum() == math.floor(0.3 * n)
        assert flags_b.sum() == math.floor(0.25 * n)
        assert not np.any(flags_a & flags_b)


def test_independent_policy_may_overlap():
    spec = small_spec(corruption_rate=(0.8, 0.8), overlap="independent", train_samples=50)
    dataset = synthgen.generate(spec)
    flags_a, flags_b = dataset.train.corrupted
    assert np.any(flags_a & flags_b)


def test_infeasible_disjoint_policy_rejected():
    with pytest.raises(ConfigurationError, match="infeasible"):
        small_spec(corruption_rate=(0.6, 0.6), overlap="disjoint")


def test_spec_invariants_enforced():
    with pytest.raises(ConfigurationError):
        small_spec(num_classes=1)
    with pytest.raises(ConfigurationError):
        small_spec(separation=0.0)
    with pytest.raises(ConfigurationError):
        small_spec(corruption_rate=(1.0, 0.0))
    with pytest.raises(ConfigurationError):
        small_spec(noise_sigma=(0.1,))


def test_label_distribution_balanced_within_one():
    spec = small_spec(train_samples=32, num_classes=5)
    dataset = synthgen.generate(spec)
    counts = np.bincount(dataset.train.batch.labels, minlength=5)
    assert counts.max() - counts.min() <= 1


def test_sample_ids_disjoint_across_splits():
    dataset = synthgen.generate(small_spec())
    ids = [set(dataset.splits[s].batch.sample_ids.tolist()) for s in synthgen.SPLIT_NAMES]
    assert ids[0].isdisjoint(ids[1]) and ids[0].isdisjoint(ids[2]) and ids[1].isdisjoint(ids[2])


def test_corruption_targets_follow_one_shift_per_modality():
    # every corrupted cell of one modality maps class c to the same wrong
    # class, and the per-modality shifts are not mutual inverses (which
    # would make conflicting patterns carry no label information)
    spec = small_spec(noise_sigma=(0.0, 0.0), num_classes=5, train_samples=200)
    dataset = synthgen.generate(spec)
    split = dataset.train
    labels = split.batch.labels
    shifts = []
    for m in range(2):
        features = split.batch.features[m]
        prototype_of = {}
        for label in np.unique(labels):
            clean = features[(labels == label) & ~split.corrupted[m]]
            prototype_of[int(label)] = clean[0]
        observed = set()
        for i in np.flatnonzero(split.corrupted[m]):
            wrong = next(
                c for c, proto in prototype_of.items() if np.array_equal(features[i], proto)
            )
            observed.add((wrong - int(labels[i])) % spec.num_classes)
        assert len(observed) == 1
        shifts.append(observed.pop())
    assert (shifts[0] + shifts[1]) % spec.num_classes != 0


def test_corruption_flags_describe_prototype_swaps_exactly():
    # at sigma=0 a corrupted cell differs from its own-class feature vector
    spec = small_spec(noise_sigma=(0.0, 0.0))
    dataset = synthgen.generate(spec)
    split = dataset.train
    labels = split.batch.labels
    for m in range(2):
        features = split.batch.features[m]
        prototype_of = {}
        for label in np.unique(labels):
            clean_rows = features[(labels == label) & ~split.corrupted[m]]
            prototype_of[label] = clean_rows[0]
        for i in range(split.batch.size):
            matches_own = np.array_equal(features[i], prototype_of[labels[i]])
            assert matches_own != bool(split.corrupted[m][i])


def test_roundtrip_is_bitwise_exact(tmp_path):
    dataset = synthgen.generate(small_spec())
    path = tmp_path / "data.umds"
    synthgen.save(dataset, path)
    loaded = synthgen.load(path)
    assert loaded.spec == dataset.spec
    for split_name in synthgen.SPLIT_NAMES:
        original, reloaded = dataset.splits[split_name], loaded.splits[split_name]
        for m in range(2):
            assert original.batch.features[m].tobytes() == reloaded.batch.features[m].tobytes()
            np.testing.assert_array_equal(original.corrupted[m], reloaded.corrupted[m])
        np.testing.assert_array_equal(original.batch.labels, reloaded.batch.labels)
        np.testing.assert_array_equal(original.batch.sample_ids, reloaded.batch.sample_ids)
    second = tmp_path / "second.umds"
    synthgen.save(loaded, second)
    assert path.read_bytes() == second.read_bytes()


def test_corrupted_header_rejected(tmp_path):
    path = tmp_path / "data.umds"
    synthgen.save(synthgen.generate(small_spec()), path)
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF  # inside the JSON header
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        synthgen.load(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "data.umds"
    synthgen.save(synthgen.generate(small_spec()), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="truncated|checksum"):
        synthgen.load(path)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "data.umds"
    path.write_bytes(b"JUNK" + b"\x00" * 64)
    with pytest.raises(FormatError, match="container"):
        synthgen.load(path)


def test_shipped_fixture_reproduces_recorded_checksum(tmp_path):
    # checksums frozen when the fixture was created; regenerating from the
    # spec recorded in its header must reproduce the identical file
    fixture = pathlib.Path(__file__).parent / "data" / "fixture.umds"
    assert hashlib.sha256(fixture.read_bytes()).hexdigest() == FIXTURE_FILE_SHA256
    dataset = synthgen.load(fixture)
    regenerated = tmp_path / "regenerated.umds"
    checksum = synthgen.save(synthgen.generate(dataset.spec), regenerated)
    assert checksum == FIXTURE_PAYLOAD_CHECKSUM
    assert regenerated.read_bytes() == fixture.read_bytes()


FIXTURE_PAYLOAD_CHECKSUM = "6741af3e70c760165409a61c2013da6c829fb5914ac6056e2e95cebf5ee2e0d2"
FIXTURE_FILE_SHA256 = "2baf41651ab70820f7a869a838b7f1cd98ea5a478682d952777b6e3bf97b3907"
