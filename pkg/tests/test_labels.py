import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from auvmae.errors import DataError
from auvmae.labels import (
    AugmentPlan,
    LabelSequence,
    RateVector,
    augment_dataset,
    class_weights,
    extract_minority_windows,
    load_label_sequences,
    occurrence_rates,
    save_label_sequences,
)
from auvmae.video import VideoClip

from helpers import random_label_sequences


def write_csv(tmp_path, text, name="labels.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadLabelSequences:
    def test_two_clips_parse(self, tmp_path):
        path = write_csv(
            tmp_path,
            "clip_id,frame,au_1,au_2\n"
            "a,0,1,0\na,1,0,0\na,2,1,1\n"
            "b,0,0,1\nb,1,1,1\nb,2,0,0\n",
        )
        seqs = load_label_sequences(path)
        assert [s.clip_id for s in seqs] == ["a", "b"]
        assert all(s.num_frames == 3 and s.num_aus == 2 for s in seqs)
        assert seqs[0].frames.tolist() == [[1, 0], [0, 0], [1, 1]]

    def test_frames_reordered_by_index(self, tmp_path):
        path = write_csv(tmp_path, "clip_id,frame,au_1,au_2\na,1,0,1\na,0,1,0\n")
        (seq,) = load_label_sequences(path)
        assert seq.frames.tolist() == [[1, 0], [0, 1]]

    def test_non_binary_value_reports_line(self, tmp_path):
        path = write_csv(tmp_path, "clip_id,frame,au_1,au_2\na,0,1,0\na,1,2,0\na,2,0,0\n")
        with pytest.raises(DataError, match=r":3: label value '2'"):
            load_label_sequences(path)

    def test_duplicate_key_reports_line(self, tmp_path):
        path = write_csv(tmp_path, "clip_id,frame,au_1,au_2\na,0,1,0\na,0,0,0\n")
        with pytest.raises(DataError, match=r":3: duplicate"):
            load_label_sequences(path)

    def test_malformed_row_reports_line(self, tmp_path):
        path = write_csv(tmp_path, "clip_id,frame,au_1,au_2\na,0,1\n")
        with pytest.raises(DataError, match=r":2: expected 4 cells"):
            load_label_sequences(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_label_sequences(tmp_path / "absent.csv")

    def test_gap_in_frame_indices_rejected(self, tmp_path):
        path = write_csv(tmp_path, "clip_id,frame,au_1,au_2\na,0,1,0\na,2,0,0\n")
        with pytest.raises(DataError, match="not contiguous"):
            load_label_sequences(path)

    def test_bad_header(self, tmp_path):
        path = write_csv(tmp_path, "clip,frame,au_1,au_2\na,0,1,0\n")
        with pytest.raises(DataError, match="header"):
            load_label_sequences(path)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_round_trip(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        original = random_label_sequences(rng, num_clips=int(rng.integers(1, 4)))
        path = tmp_path_factory.mktemp("rt") / "labels.csv"
        save_label_sequences(path, original)
        loaded = load_label_sequences(path)
        assert len(loaded) == len(original)
        for a, b in zip(original, loaded):
            assert a.clip_id == b.clip_id
            assert a.au_ids == b.au_ids
            assert np.array_equal(a.frames, b.frames)


class TestLabelSequenceInvariants:
    def test_rejects_non_binary(self):
        with pytest.raises(DataError):
            LabelSequence(au_ids=(1, 2), frames=np.array([[0, 2], [1, 0]]))

    def test_rejects_single_frame(self):
        with pytest.raises(DataError):
            LabelSequence(au_ids=(1, 2), frames=np.array([[0, 1]]))

    def test_rejects_single_au(self):
        with pytest.raises(DataError):
            LabelSequence(au_ids=(1,), frames=np.array([[0], [1]]))

    def test_rejects_unsorted_ids(self):
        with pytest.raises(DataError):
            LabelSequence(au_ids=(2, 1), frames=np.zeros((2, 2), dtype=int))


class TestOccurrenceRates:
    def test_simple_count(self):
        seq = LabelSequence(au_ids=(1, 2), frames=np.array([[1, 0], [1, 0], [0, 0], [0, 0]]))
        with pytest.warns(UserWarning):
            rates = occurrence_rates([seq])
        assert rates.rates[0] == 0.5
        assert rates.rates[1] == 0.0

    def test_saturated(self):
        seq = LabelSequence(au_ids=(1, 2), frames=np.ones((4, 2), dtype=int))
        assert occurrence_rates([seq]).rates.tolist() == [1.0, 1.0]

    def test_matches_brute_recount(self):
        rng = np.random.default_rng(7)
        dataset = random_label_sequences(rng, num_clips=3)
        rates = occurrence_rates(dataset)
        all_rows = [row for seq in dataset for row in seq.frames.tolist()]
        for k in range(len(dataset[0].au_ids)):
            expected = sum(r[k] for r in all_rows) / len(all_rows)
            assert rates.rates[k] == expected

    def test_clip_permutation_invariant(self):
        rng = np.random.default_rng(3)
        dataset = random_label_sequences(rng, num_clips=4)
        a = occurrence_rates(dataset).rates
        b = occurrence_rates(dataset[::-1]).rates
        assert np.array_equal(a, b)

    def test_mismatched_au_ids(self):
        s1 = LabelSequence(au_ids=(1, 2), frames=np.zeros((2, 2), dtype=int))
        s2 = LabelSequence(au_ids=(1, 3), frames=np.zeros((2, 2), dtype=int))
        with pytest.raises(DataError, match="au_ids"):
            occurrence_rates([s1, s2])

    def test_zero_rate_warns(self):
        seq = LabelSequence(au_ids=(1, 2), frames=np.array([[1, 0], [1, 0]]))
        with pytest.warns(UserWarning, match="zero occurrence"):
            occurrence_rates([seq])


class TestClassWeights:
    def test_symmetric_rates(self):
        w = class_weights(RateVector(au_ids=(1, 2), rates=np.array([0.5, 0.5])))
        assert w.weights.tolist() == [1.0, 1.0]

    def test_hand_example(self):
        w = class_weights(RateVector(au_ids=(1, 2), rates=np.array([0.2, 0.4])))
        assert np.allclose(w.weights, [4 / 3, 2 / 3], atol=1e-15)

    def test_zero_rate_is_hard_error(self):
        with pytest.warns(UserWarning):
            rates = RateVector(au_ids=(1, 2), rates=np.array([0.0, 0.4]))
        with pytest.raises(DataError, match="zero occurrence"):
            class_weights(rates)

    @settings(max_examples=50, deadline=None)
    @given(
        rates=st.lists(st.floats(0.01, 1.0), min_size=2, max_size=12),
    )
    def test_weights_sum_to_n(self, rates):
        n = len(rates)
        rv = RateVector(au_ids=tuple(range(1, n + 1)), rates=np.array(rates))
        w = class_weights(rv)
        assert abs(w.weights.sum() - n) <= 1e-9
        assert (w.weights > 0).all()

    def test_monotone_decreasing_in_rate(self):
        w = class_weights(RateVector(au_ids=(1, 2, 3), rates=np.array([0.1, 0.5, 0.9])))
        assert w.weights[0] > w.weights[1] > w.weights[2]


def make_clip_pair(frames, seed=0, clip_id="c"):
    labels = LabelSequence(au_ids=(1, 2), frames=frames, clip_id=clip_id)
    rng = np.random.default_rng(seed)
    pixels = rng.random((labels.num_frames, 8, 8, 1)).astype(np.float32)
    return VideoClip(pixels=pixels, clip_id=clip_id), labels


class TestAugment:
    def test_hand_simulated_boundary(self):
        # minority AU active only at frame 10, threshold 15, clip length 40:
        # the window spans frames 10..25 inclusive (the activation plus the
        # 15-frame quiet run that closes it)
        frames = np.zeros((40, 2), dtype=int)
        frames[:, 1] = 1  # majority AU always on, irrelevant to the scan
        frames[10, 0] = 1
        labels = LabelSequence(au_ids=(1, 2), frames=frames, clip_id="c")
        plan = AugmentPlan(minority_aus=(1,), majority_run_threshold=15)
        assert extract_minority_windows(labels, plan) == [(10, 26)]

    def test_window_truncated_at_clip_end(self):
        frames = np.zeros((12, 2), dtype=int)
        frames[8, 0] = 1
        labels = LabelSequence(au_ids=(1, 2), frames=frames)
        plan = AugmentPlan(minority_aus=(1,), majority_run_threshold=15)
        assert extract_minority_windows(labels, plan) == [(8, 12)]

    def test_multiple_disjoint_windows(self):
        frames = np.zeros((30, 2), dtype=int)
        frames[0, 0] = 1
        frames[20, 0] = 1
        labels = LabelSequence(au_ids=(1, 2), frames=frames)
        plan = AugmentPlan(minority_aus=(1,), majority_run_threshold=5)
        assert extract_minority_windows(labels, plan) == [(0, 6), (20, 26)]

    def test_single_frame_window_dropped(self):
        frames = np.zeros((10, 2), dtype=int)
        frames[9, 0] = 1  # opens at the last frame, length 1
        labels = LabelSequence(au_ids=(1, 2), frames=frames)
        plan = AugmentPlan(minority_aus=(1,), majority_run_threshold=15)
        assert extract_minority_windows(labels, plan) == []

    def test_no_minority_activity_is_noop(self):
        clip, labels = make_clip_pair(np.stack([np.zeros(6, dtype=int), np.ones(6, dtype=int)], axis=1))
        plan = AugmentPlan(minority_aus=(1,), majority_run_threshold=3)
        out = augment_dataset([(clip, labels)], plan)
        assert len(out) == 1
        assert out[0][0] is clip

    def test_labels_copied_verbatim_pixels_transformed(self):
        frames = np.zeros((20, 2), dtype=int)
        frames[2:6, 0] = 1
        clip, labels = make_clip_pair(frames, seed=5)
        plan = AugmentPlan(minority_aus=(1,), majority_run_threshold=4, seed=9)
        out = augment_dataset([(clip, labels)], plan)
        assert len(out) == 2
        new_clip, new_labels = out[1]
        start, end = extract_minority_windows(labels, plan)[0]
        assert np.array_equal(new_labels.frames, labels.frames[start:end])
        assert new_clip.num_frames == new_labels.num_frames
        assert new_labels.clip_id.startswith(labels.clip_id)
        assert not np.array_equal(new_clip.pixels, clip.pixels[start:end])

    def test_deterministic_per_seed(self):
        frames = np.zeros((20, 2), dtype=int)
        frames[3:9, 0] = 1
        clip, labels = make_clip_pair(frames, seed=2)
        plan = AugmentPlan(minority_aus=(1,), majority_run_threshold=4, seed=123)
        a = augment_dataset([(clip, labels)], plan)[1][0].pixels
        b = augment_dataset([(clip, labels)], plan)[1][0].pixels
        assert np.array_equal(a, b)

    def test_minority_rate_strictly_increases(self):
        rng = np.random.default_rng(0)
        pairs = []
        for k in range(4):
            frames = np.zeros((60, 2), dtype=int)
            frames[:, 1] = rng.integers(0, 2, size=60)
            burst = int(rng.integers(0, 40))
            frames[burst : burst + 4, 0] = 1  # rare bursty minority AU
            pairs.append(make_clip_pair(frames, seed=k, clip_id=f"c{k}"))
        plan = AugmentPlan(minority_aus=(1,), majority_run_threshold=15, seed=1)
        before = occurrence_rates([s for _, s in pairs]).rates[0]
        after_pairs = augment_dataset(pairs, plan)
        assert len(after_pairs) > len(pairs)
        after = occurrence_rates([s for _, s in after_pairs]).rates[0]
        assert after > before

    def test_plan_validation(self):
        with pytest.raises(DataError):
            AugmentPlan(minority_aus=())
        with pytest.raises(DataError):
            AugmentPlan(minority_aus=(1,), majority_run_threshold=0)

    def test_plan_json_round_trip(self, tmp_path):
        plan = AugmentPlan(minority_aus=(1, 3), majority_run_threshold=7, seed=4, crop_min_fraction=0.9)
        path = tmp_path / "plan.json"
        plan.to_json(path)
        loaded = AugmentPlan.from_json(path)
        assert loaded == plan
