"""Frame containers, standardization, codebook snapping, label resampling, IO."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from priorshift.latent import (
    Codebook,
    LabelTrack,
    LatentSequence,
    Standardizer,
    destandardize_frames,
    fit_standardizer,
    load_dataset,
    save_dataset,
    snap_frames,
    snap_to_codebook,
    standardize,
    standardize_frames,
    upsample_nearest,
)


def _seq(rng, n=10, d=3, with_tracks=False, seq_id="s"):
    frames = rng.normal(0, 2, (n, d))
    kw = {}
    if with_tracks:
        kw = dict(zc2=rng.normal(0, 0.3, (n, d)), h=rng.normal(0, 2, (n, d)))
    return LatentSequence(
        id=seq_id, labels=rng.integers(0, 4, n), frames=frames, **kw
    )


class TestLatentSequence:
    def test_rejects_misaligned_tracks(self):
        with pytest.raises(ValueError):
            LatentSequence(id="x", labels=np.zeros(3, dtype=int), frames=np.zeros((2, 2)))
        with pytest.raises(ValueError):
            LatentSequence(id="x", labels=np.zeros(2, dtype=int), frames=np.zeros((2, 2)),
                           zc2=np.zeros((3, 2)), h=np.zeros((2, 2)))

    def test_rejects_non_finite_frames(self):
        frames = np.zeros((2, 2))
        frames[1, 0] = np.nan
        with pytest.raises(ValueError):
            LatentSequence(id="x", labels=np.zeros(2, dtype=int), frames=frames)

    def test_len_and_dim(self):
        seq = _seq(np.random.default_rng(0), n=7, d=4)
        assert len(seq) == 7
        assert seq.dim == 4


class TestStandardizer:
    def test_two_point_fit(self):
        seq = LatentSequence(id="a", labels=np.zeros(2, dtype=int),
                             frames=np.array([[0.0], [2.0]]))
        s = fit_standardizer([seq])
        # population convention: variance divides by the frame count
        assert s.mean[0] == 1.0
        assert s.std[0] == 1.0

    def test_sample_statistics(self):
        rng = np.random.default_rng(7)
        frames = rng.normal(3.0, 2.0, size=(1000, 1))
        seq = LatentSequence(id="a", labels=np.zeros(1000, dtype=int), frames=frames)
        s = fit_standardizer([seq])
        se_mean = 2.0 / np.sqrt(1000)
        se_std = 2.0 / np.sqrt(2 * 1000)
        assert abs(s.mean[0] - 3.0) < 3 * se_mean
        assert abs(s.std[0] - 2.0) < 3 * se_std

    def test_constant_dimension_rejected_by_index(self):
        frames = np.column_stack([np.arange(4.0), np.full(4, 5.0)])
        seq = LatentSequence(id="a", labels=np.zeros(4, dtype=int), frames=frames)
        with pytest.raises(ValueError, match="dimension 1"):
            fit_standardizer([seq])

    def test_standardized_output_is_centered_and_unit(self):
        rng = np.random.default_rng(3)
        seq = _seq(rng, n=500, d=3)
        s = fit_standardizer([seq])
        z = standardize_frames(seq.frames, s)
        assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        assert_allclose(z.std(axis=0), 1.0, rtol=1e-12)

    def test_sequence_wrapper_leaves_other_tracks(self):
        rng = np.random.default_rng(4)
        seq = _seq(rng, with_tracks=True)
        s = fit_standardizer([seq])
        out = standardize(seq, s)
        assert_array_equal(out.labels, seq.labels)
        assert_array_equal(out.zc2, seq.zc2)
        assert_array_equal(out.h, seq.h)

    def test_dim_mismatch(self):
        s = Standardizer(mean=np.zeros(2), std=np.ones(2))
        with pytest.raises(ValueError):
            standardize_frames(np.zeros((3, 5)), s)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            Standardizer(mean=np.zeros(2), std=np.array([1.0, 0.0]))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        frames = rng.normal(0, 3, (20, 4))
        s = Standardizer(mean=rng.normal(0, 2, 4), std=rng.uniform(0.1, 5, 4))
        back = destandardize_frames(standardize_frames(frames, s), s)
        assert np.abs(back - frames).max() <= 1e-12 * max(1.0, np.abs(frames).max())


class TestCodebook:
    def test_snap_picks_nearest(self):
        cb = Codebook(entries=np.array([[0.0, 0.0], [10.0, 0.0]]))
        idx, vec = snap_to_codebook(np.array([1.0, 1.0]), cb)
        assert idx == 0
        assert_array_equal(vec, [0.0, 0.0])

    def test_tie_takes_lowest_index(self):
        cb = Codebook(entries=np.array([[1.0], [-1.0]]))
        idx, _ = snap_to_codebook(np.array([0.0]), cb)
        assert idx == 0

    def test_matches_bruteforce_scan(self):
        rng = np.random.default_rng(11)
        cb = Codebook(entries=rng.normal(0, 2, (32, 5)))
        frames = rng.normal(0, 2, (200, 5))
        idx, snapped = snap_frames(frames, cb)
        for i in range(frames.shape[0]):
            best, bestd = -1, np.inf
            for j in range(len(cb)):
                dist = float(((frames[i] - cb.entries[j]) ** 2).sum())
                if dist < bestd:
                    best, bestd = j, dist
            assert idx[i] == best
            assert_array_equal(snapped[i], cb.entries[best])

    def test_entries_are_fixed_points(self):
        rng = np.random.default_rng(12)
        cb = Codebook(entries=rng.normal(0, 1, (16, 3)))
        idx, snapped = snap_frames(cb.entries, cb)
        assert_array_equal(idx, np.arange(16))
        assert_array_equal(snapped, cb.entries)

    def test_dim_mismatch(self):
        cb = Codebook(entries=np.zeros((4, 3)))
        with pytest.raises(ValueError):
            snap_to_codebook(np.zeros(2), cb)


class TestUpsampleNearest:
    def test_doubling(self):
        out = upsample_nearest(LabelTrack(labels=np.array([7, 9])), 4)
        assert_array_equal(out, [7, 7, 9, 9])

    def test_identity_when_lengths_match(self):
        track = LabelTrack(labels=np.array([1, 2, 3]))
        assert_array_equal(upsample_nearest(track, 3), [1, 2, 3])

    def test_three_to_seven(self):
        out = upsample_nearest(LabelTrack(labels=np.array([4, 5, 6])), 7)
        assert_array_equal(out, [4, 4, 5, 5, 5, 6, 6])

    def test_matches_float_midpoint_rule(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            L = int(rng.integers(1, 40))
            F = int(rng.integers(1, 90))
            labels = rng.integers(0, 100, L)
            out = upsample_nearest(LabelTrack(labels=labels), F)
            ref = labels[np.floor((np.arange(F) + 0.5) * L / F).astype(int)]
            assert_array_equal(out, ref)

    @given(st.lists(st.integers(0, 50), min_size=1, max_size=30),
           st.integers(1, 80))
    @settings(max_examples=60, deadline=None)
    def test_length_and_membership(self, labels, target):
        out = upsample_nearest(LabelTrack(labels=np.array(labels)), target)
        assert out.shape == (target,)
        assert set(out.tolist()) <= set(labels)

    def test_empty_track_rejected(self):
        with pytest.raises(ValueError):
            upsample_nearest(LabelTrack(labels=np.array([], dtype=int)), 3)


class TestDatasetIO:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(21)
        seqs = [_seq(rng, n=int(rng.integers(1, 8)), d=3, with_tracks=True,
                     seq_id=f"u{i}") for i in range(5)]
        path = tmp_path / "data.tsv"
        save_dataset(seqs, str(path), n_labels=4)
        loaded, dim, n_labels = load_dataset(str(path))
        assert (dim, n_labels) == (3, 4)
        assert [s.id for s in loaded] == [s.id for s in seqs]
        for a, b in zip(seqs, loaded):
            assert_array_equal(a.labels, b.labels)
            assert_array_equal(a.frames, b.frames)
            assert_array_equal(a.zc2, b.zc2)
            assert_array_equal(a.h, b.h)

    def test_round_trip_without_aux_tracks(self, tmp_path):
        rng = np.random.default_rng(22)
        seqs = [_seq(rng, seq_id="only")]
        path = tmp_path / "data.tsv"
        save_dataset(seqs, str(path), n_labels=4)
        loaded, _, _ = load_dataset(str(path))
        assert loaded[0].zc2 is None and loaded[0].h is None
        assert_array_equal(loaded[0].frames, seqs[0].frames)

    def test_header_line(self, tmp_path):
        rng = np.random.default_rng(23)
        path = tmp_path / "data.tsv"
        save_dataset([_seq(rng, d=6)], str(path), n_labels=9)
        assert path.read_text().splitlines()[0] == "#dim=6 labels=9"

    def test_label_out_of_vocabulary_rejected(self, tmp_path):
        rng = np.random.default_rng(24)
        with pytest.raises(ValueError):
            save_dataset([_seq(rng)], str(tmp_path / "x.tsv"), n_labels=2)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("dim=3 labels=2\nfoo\t0\t1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            load_dataset(str(path))

    def test_wrong_field_count_reports_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("#dim=1 labels=2\nid\t0\n")
        with pytest.raises(ValueError, match=":2"):
            load_dataset(str(path))
