"""Dataset generation, windowing, alignment stripping, sampling, CSV
ingestion, and the on-disk container."""

import json

import numpy as np
import pytest

from imuclr.data import (
    SyntheticSpec,
    dataset_content_hash,
    gen_synthetic,
    import_csv,
    load_dataset,
    sample_few_shot,
    save_dataset,
    strip_alignment,
    window_stream,
)
from imuclr.errors import ConfigError, CorruptDatasetError, DataError, ParseError
from imuclr.seeding import make_rng

FAST_SPEC = SyntheticSpec(n_classes=4, segments_per_class=30, T=40, embed_dim=16, seed=3)


class TestSyntheticSpec:
    def test_invalid_specs(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(n_classes=0)
        with pytest.raises(ConfigError):
            SyntheticSpec(imu_noise=-1.0)
        with pytest.raises(ConfigError, match="coarseness"):
            SyntheticSpec(n_classes=5, text_coarseness=2)
        with pytest.raises(ConfigError, match="embed_dim"):
            SyntheticSpec(n_classes=8, embed_dim=4)


class TestGenSynthetic:
    def test_zero_noise_same_class_embeddings_identical(self):
        ds = gen_synthetic(SyntheticSpec(
            n_classes=2, segments_per_class=6, T=30, embed_dim=8,
            video_noise=0.0, text_noise=0.0, seed=0,
        ))
        rows = np.flatnonzero(ds.labels == 1)
        base = ds.video_emb[rows[0]]
        for r in rows[1:]:
            np.testing.assert_allclose(ds.video_emb[r], base, atol=1e-12)

    def test_seed_determinism_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        save_dataset(gen_synthetic(FAST_SPEC), str(a))
        save_dataset(gen_synthetic(FAST_SPEC), str(b))
        assert dataset_content_hash(str(a)) == dataset_content_hash(str(b))

    def test_video_embeddings_linearly_separable(self):
        # reference logistic-regression oracle on the modality space
        from sklearn.linear_model import LogisticRegression

        ds = gen_synthetic(SyntheticSpec())
        tr, te = ds.train_indices, ds.test_indices
        clf = LogisticRegression(max_iter=2000)
        clf.fit(ds.video_emb[tr], ds.labels[tr])
        assert clf.score(ds.video_emb[te], ds.labels[te]) > 0.95

    def test_text_coarser_than_video(self):
        ds = gen_synthetic(SyntheticSpec(
            n_classes=4, segments_per_class=20, T=30, embed_dim=16,
            video_noise=0.0, text_noise=0.0, text_coarseness=2, seed=1,
        ))
        # classes 0 and 1 share a text prototype but not a video prototype
        r0 = np.flatnonzero(ds.labels == 0)[0]
        r1 = np.flatnonzero(ds.labels == 1)[0]
        np.testing.assert_allclose(ds.text_emb[r0], ds.text_emb[r1], atol=1e-12)
        assert not np.allclose(ds.video_emb[r0], ds.video_emb[r1])

    def test_split_stratified_and_contiguous(self):
        ds = gen_synthetic(FAST_SPEC)
        assert ds.train_range == (0, 96)
        assert ds.test_range == (96, 120)
        train_labels = ds.labels[ds.train_indices]
        for c in range(4):
            assert (train_labels == c).sum() == 24

    def test_normalization_recorded_and_applied(self):
        ds = gen_synthetic(FAST_SPEC)
        train = ds.imu[ds.train_indices]
        np.testing.assert_allclose(train.mean(axis=(0, 2)), 0.0, atol=1e-10)
        np.testing.assert_allclose(train.std(axis=(0, 2)), 1.0, atol=1e-10)


class TestWindowStream:
    def test_exact_windows(self):
        stream = np.zeros((6, 200))
        wins = window_stream(stream, 20.0, 5.0, 5.0)
        assert len(wins) == 2
        assert wins[0].shape == (6, 100)

    def test_half_hop(self):
        wins = window_stream(np.zeros((6, 200)), 20.0, 5.0, 2.5)
        assert len(wins) == 3

    def test_count_formula(self):
        rng = make_rng(0)
        for _ in range(20):
            n = int(rng.integers(30, 400))
            w = int(rng.integers(10, 40))
            h = int(rng.integers(5, 40))
            wins = window_stream(rng.normal(size=(2, n)), 1.0, float(w), float(h))
            expected = (n - w) // h + 1 if n >= w else 0
            assert len(wins) == expected

    def test_non_overlapping_windows_reconstruct_prefix(self):
        stream = make_rng(1).normal(size=(3, 57))
        wins = window_stream(stream, 1.0, 10.0, 10.0)
        np.testing.assert_array_equal(np.concatenate(wins, axis=1), stream[:, :50])

    def test_short_stream_warns_and_returns_empty(self):
        with pytest.warns(UserWarning, match="shorter"):
            wins = window_stream(np.zeros((6, 30)), 20.0, 5.0)
        assert wins == []


class TestStripAlignment:
    def test_keep_all(self):
        ds = gen_synthetic(FAST_SPEC)
        out = strip_alignment(ds, 1.0, make_rng(0))
        assert out.video_mask.all() and out.text_mask.all()

    def test_keep_none(self):
        ds = gen_synthetic(FAST_SPEC)
        out = strip_alignment(ds, 0.0, make_rng(0))
        assert not out.video_mask.any() and not out.text_mask.any()
        np.testing.assert_array_equal(out.video_emb, 0.0)

    def test_exact_counts(self):
        ds = gen_synthetic(SyntheticSpec(
            n_classes=4, segments_per_class=250, T=30, embed_dim=16, seed=2,
        ))
        out = strip_alignment(ds, 0.1, make_rng(5))
        assert int(out.video_mask.sum()) == 100
        assert int(out.text_mask.sum()) == 100

    def test_input_untouched_labels_kept(self):
        ds = gen_synthetic(FAST_SPEC)
        before = ds.video_mask.copy()
        out = strip_alignment(ds, 0.5, make_rng(1))
        np.testing.assert_array_equal(ds.video_mask, before)
        np.testing.assert_array_equal(out.labels, ds.labels)

    def test_deterministic_given_seed(self):
        ds = gen_synthetic(FAST_SPEC)
        a = strip_alignment(ds, 0.3, make_rng(9))
        b = strip_alignment(ds, 0.3, make_rng(9))
        np.testing.assert_array_equal(a.video_mask, b.video_mask)


class TestSampleFewShot:
    def test_all_available_returns_full_sorted_split(self):
        ds = gen_synthetic(FAST_SPEC)
        per_class_train = 24
        idx = sample_few_shot(ds, per_class_train, trial_seed=0)
        np.testing.assert_array_equal(idx, ds.train_indices)

    def test_different_seeds_differ(self):
        ds = gen_synthetic(FAST_SPEC)
        a = sample_few_shot(ds, 5, trial_seed=0)
        b = sample_few_shot(ds, 5, trial_seed=1)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, sample_few_shot(ds, 5, trial_seed=0))

    def test_balanced_counts(self):
        ds = gen_synthetic(FAST_SPEC)
        idx = sample_few_shot(ds, 7, trial_seed=3)
        labels = ds.labels[idx]
        for c in range(4):
            assert (labels == c).sum() == 7

    def test_insufficient_class_names_the_class(self):
        ds = gen_synthetic(FAST_SPEC)
        with pytest.raises(DataError, match="class0"):
            sample_few_shot(ds, 25, trial_seed=0)


def write_csv(path, rows, header="t,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,label"):
    path.write_text("\n".join([header] + rows) + "\n")


def make_rows(n, label, rate=10.0, start=0):
    out = []
    for i in range(n):
        t = (start + i) / rate
        vals = [f"{np.sin(0.3 * (start + i) + j):.4f}" for j in range(6)]
        out.append(f"{t:.4f}," + ",".join(vals) + f",{label}")
    return out


class TestImportCsv:
    def test_two_class_window_count(self, tmp_path):
        path = tmp_path / "rec.csv"
        # 10 Hz, window 2 s (20 samples), hop = window: 45 -> 2 windows, 63 -> 3
        rows = make_rows(45, "walk") + make_rows(63, "run", start=45)
        write_csv(path, rows)
        ds = import_csv(str(path), sample_rate_hz=10.0, window_s=2.0)
        assert ds.class_names == ["run", "walk"]
        assert ds.n_segments == 5
        assert not ds.video_mask.any()

    def test_missing_gyro_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        write_csv(path, ["0,1,2,3,4,5,walk"], header="t,acc_x,acc_y,acc_z,gyro_x,gyro_y,label")
        with pytest.raises(ParseError, match="gyro_z"):
            import_csv(str(path), sample_rate_hz=10.0)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError):
            import_csv(str(path), sample_rate_hz=10.0)

    def test_non_numeric_cell_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        rows = make_rows(30, "walk")
        rows[4] = rows[4].replace(rows[4].split(",")[1], "oops", 1)
        write_csv(path, rows)
        with pytest.raises(ParseError, match="line 6"):
            import_csv(str(path), sample_rate_hz=10.0, window_s=1.0)

    def test_inconsistent_rate_detected(self, tmp_path):
        path = tmp_path / "bad.csv"
        rows = make_rows(30, "walk", rate=10.0)
        write_csv(path, rows)
        with pytest.raises(ParseError, match="inconsistent"):
            import_csv(str(path), sample_rate_hz=25.0, window_s=1.0,
                       timestamp_column="t")

    def test_ok_with_timestamps(self, tmp_path):
        path = tmp_path / "rec.csv"
        write_csv(path, make_rows(50, "walk", rate=10.0))
        ds = import_csv(str(path), sample_rate_hz=10.0, window_s=2.0,
                        timestamp_column="t")
        assert ds.n_segments == 2


class TestSaveLoad:
    def test_round_trip_at_storage_precision(self, tmp_path):
        ds = gen_synthetic(FAST_SPEC)
        save_dataset(ds, str(tmp_path / "d"))
        back = load_dataset(str(tmp_path / "d"))
        np.testing.assert_allclose(back.imu, ds.imu, atol=1e-6)
        np.testing.assert_allclose(back.video_emb, ds.video_emb, atol=1e-6)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.class_names == ds.class_names
        assert back.train_range == ds.train_range
        assert back.source_ids == ds.source_ids

    def test_truncated_blob_fails_crc_or_size(self, tmp_path):
        ds = gen_synthetic(FAST_SPEC)
        root = tmp_path / "d"
        save_dataset(ds, str(root))
        blob = root / "imu.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CorruptDatasetError):
            load_dataset(str(root))

    def test_bit_flip_fails_crc(self, tmp_path):
        ds = gen_synthetic(FAST_SPEC)
        root = tmp_path / "d"
        save_dataset(ds, str(root))
        blob = root / "video.bin"
        raw = bytearray(blob.read_bytes())
        raw[10] ^= 0x01
        blob.write_bytes(bytes(raw))
        with pytest.raises(CorruptDatasetError, match="CRC"):
            load_dataset(str(root))

    def test_manifest_count_mismatch(self, tmp_path):
        ds = gen_synthetic(FAST_SPEC)
        root = tmp_path / "d"
        save_dataset(ds, str(root))
        manifest = json.loads((root / "manifest.json").read_text())
        manifest["alignment"]["video_aligned"] -= 1
        (root / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CorruptDatasetError, match="video_aligned"):
            load_dataset(str(root))

    def test_version_mismatch(self, tmp_path):
        ds = gen_synthetic(FAST_SPEC)
        root = tmp_path / "d"
        save_dataset(ds, str(root))
        manifest = json.loads((root / "manifest.json").read_text())
        manifest["format_version"] = 99
        (root / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CorruptDatasetError, match="version"):
            load_dataset(str(root))

    def test_partial_alignment_round_trip(self, tmp_path):
        ds = strip_alignment(gen_synthetic(FAST_SPEC), 0.5, make_rng(4))
        save_dataset(ds, str(tmp_path / "d"))
        back = load_dataset(str(tmp_path / "d"))
        np.testing.assert_array_equal(back.video_mask, ds.video_mask)
        np.testing.assert_array_equal(back.text_mask, ds.text_mask)
