import numpy as np
import pytest

from ltdistill.data import (
    DatasetFormatError,
    LongTailSpec,
    balanced_split,
    dataset_bytes,
    expected_counts,
    gen_blobs,
    images_to_float,
    load_dataset,
    load_manifest,
    make_long_tail,
    save_dataset,
)


class TestCountFormula:
    def test_beta_one_keeps_everything(self):
        counts = expected_counts(LongTailSpec(10, 500, 1.0))
        assert np.all(counts == 500)

    def test_derived_values(self):
        # |D_c| = n0 * beta^(-c/(C-1)), round-half-even, floor 1
        assert expected_counts(LongTailSpec(10, 500, 100.0))[9] == 5
        assert expected_counts(LongTailSpec(10, 500, 10.0))[5] == 139

    def test_floor_at_one_sample(self):
        counts = expected_counts(LongTailSpec(5, 10, 1000.0))
        assert counts.min() == 1

    @pytest.mark.parametrize("beta", [1.0, 2.0, 10.0, 47.5, 100.0])
    @pytest.mark.parametrize("n0", [50, 333, 1000])
    def test_monotone_non_increasing(self, n0, beta):
        counts = expected_counts(LongTailSpec(12, n0, beta))
        assert np.all(np.diff(counts) <= 0)

    @pytest.mark.parametrize("beta", [2.0, 5.0, 10.0, 50.0])
    def test_head_tail_ratio(self, beta):
        n0 = int(2 * beta) + 10  # n0 >= 2*beta
        counts = expected_counts(LongTailSpec(10, n0, beta))
        ratio = counts[0] / counts[-1]
        assert beta / 2 <= ratio <= 2 * beta

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            expected_counts(LongTailSpec(1, 10, 2.0))
        with pytest.raises(ValueError):
            expected_counts(LongTailSpec(5, 10, 0.5))


class TestMakeLongTail:
    def test_counts_and_determinism(self):
        source = gen_blobs(4, 60, (3, 8, 8), seed=0)
        spec = LongTailSpec(4, 50, 8.0, seed=3)
        lt1 = make_long_tail(source, spec)
        lt2 = make_long_tail(source, spec)
        assert np.array_equal(lt1.class_counts(), expected_counts(spec))
        assert np.array_equal(lt1.images, lt2.images)
        assert np.array_equal(lt1.labels, lt2.labels)

    def test_source_too_small(self):
        source = gen_blobs(3, 20, (3, 8, 8), seed=0)
        with pytest.raises(ValueError, match="needs"):
            make_long_tail(source, LongTailSpec(3, 30, 2.0, seed=0))

    def test_labels_match_index(self):
        source = gen_blobs(3, 40, (3, 8, 8), seed=0)
        lt = make_long_tail(source, LongTailSpec(3, 30, 5.0, seed=1))
        lt.validate()


class TestBlobs:
    def test_same_seed_identical_bytes(self):
        a = gen_blobs(3, 10, (3, 8, 8), seed=7)
        b = gen_blobs(3, 10, (3, 8, 8), seed=7)
        assert a.images.tobytes() == b.images.tobytes()
        c = gen_blobs(3, 10, (3, 8, 8), seed=8)
        assert a.images.tobytes() != c.images.tobytes()

    def test_too_many_classes_rejected(self):
        with pytest.raises(ValueError, match="distinguishable"):
            gen_blobs(129, 2, (3, 16, 16), seed=0)

    def test_small_convnet_separates_two_classes(self):
        # depth-2 net reaches >= 95% held-out accuracy on C=2 blobs
        from ltdistill.experts import ExpertTrainConfig, train_expert
        from ltdistill.nn import ConvNetSpec
        from ltdistill.optim import OptimConfig
        from ltdistill.students import evaluate

        source = gen_blobs(2, 50, (3, 16, 16), seed=1)
        test, train = balanced_split(source, 15, seed=2)
        spec = ConvNetSpec(depth=2, width=16, in_shape=(3, 16, 16), num_classes=2)
        cfg = ExpertTrainConfig(
            iterations=150, batch_size=32, optimizer=OptimConfig(kind="adam", lr=3e-3), seed=3
        )
        ck = train_expert(train, spec, cfg)
        report = evaluate(ck.model, test)
        assert report.balanced >= 0.95


class TestBalancedSplit:
    def test_exact_and_disjoint(self):
        source = gen_blobs(3, 30, (3, 8, 8), seed=4)
        test, rest = balanced_split(source, 5, seed=5)
        assert np.all(test.class_counts() == 5)
        assert test.images.shape[0] + rest.images.shape[0] == source.images.shape[0]
        # disjoint: every test image differs from every remainder row it could alias
        joined = np.concatenate([test.images, rest.images])
        assert joined.shape[0] == source.images.shape[0]
        src_sorted = np.sort(source.images.reshape(source.images.shape[0], -1), axis=0)
        join_sorted = np.sort(joined.reshape(joined.shape[0], -1), axis=0)
        assert np.array_equal(src_sorted, join_sorted)

    def test_smallest_class_fully_consumed(self):
        source = gen_blobs(2, 12, (3, 8, 8), seed=4)
        test, rest = balanced_split(source, 12, seed=5)
        assert np.all(test.class_counts() == 12)
        assert np.all(rest.class_counts() == 0)

    def test_zero_per_class(self):
        source = gen_blobs(2, 6, (3, 8, 8), seed=4)
        test, rest = balanced_split(source, 0, seed=5)
        assert test.images.shape[0] == 0
        assert np.array_equal(rest.images, source.images)

    def test_insufficient_samples(self):
        source = gen_blobs(2, 6, (3, 8, 8), seed=4)
        with pytest.raises(ValueError, match="exceeds"):
            balanced_split(source, 7, seed=5)


class TestBinaryFormat:
    def test_round_trip(self, tmp_path):
        ds = gen_blobs(3, 8, (3, 8, 8), seed=9)
        path = tmp_path / "d.bin"
        save_dataset(path, ds)
        loaded = load_dataset(path)
        assert np.array_equal(loaded.images, ds.images)
        assert np.array_equal(loaded.labels, ds.labels)
        for a, b in zip(loaded.per_class_index, ds.per_class_index):
            assert np.array_equal(np.asarray(a), np.asarray(b))
        # identical serialization
        assert dataset_bytes(loaded) == dataset_bytes(ds)

    def test_corrupt_header_byte_is_magic_error(self, tmp_path):
        ds = gen_blobs(2, 4, (3, 8, 8), seed=9)
        path = tmp_path / "d.bin"
        save_dataset(path, ds)
        blob = bytearray(path.read_bytes())
        blob[2] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetFormatError, match="magic"):
            load_dataset(path)

    def test_corrupt_pixel_is_checksum_error(self, tmp_path):
        ds = gen_blobs(2, 4, (3, 8, 8), seed=9)
        path = tmp_path / "d.bin"
        save_dataset(path, ds)
        blob = bytearray(path.read_bytes())
        blob[-10] ^= 0xFF  # inside pixel payload
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetFormatError, match="checksum"):
            load_dataset(path)

    def test_empty_file_is_truncation_error(self, tmp_path):
        path = tmp_path / "d.bin"
        path.write_bytes(b"")
        with pytest.raises(DatasetFormatError, match="truncated"):
            load_dataset(path)

    def test_truncated_payload(self, tmp_path):
        ds = gen_blobs(2, 4, (3, 8, 8), seed=9)
        path = tmp_path / "d.bin"
        save_dataset(path, ds)
        blob = path.read_bytes()
        path.write_bytes(blob[:-20])
        with pytest.raises(DatasetFormatError, match="truncated"):
            load_dataset(path)


class TestManifest:
    def test_ingest_raw_files(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = []
        for i in range(4):
            raw = rng.integers(0, 256, size=3 * 4 * 4, dtype=np.uint8).tobytes()
            (tmp_path / f"img{i}.raw").write_bytes(raw)
            rows.append(f"img{i}.raw,{i % 2}")
        manifest = tmp_path / "m.csv"
        manifest.write_text("path,label\n" + "\n".join(rows) + "\n")
        ds = load_manifest(manifest, 3, 4, 4)
        assert ds.images.shape == (4, 3, 4, 4)
        assert np.array_equal(ds.labels, np.array([0, 1, 0, 1]))

    def test_bad_header(self, tmp_path):
        manifest = tmp_path / "m.csv"
        manifest.write_text("file,cls\nx,0\n")
        with pytest.raises(DatasetFormatError, match="header"):
            load_manifest(manifest, 3, 4, 4)

    def test_wrong_size(self, tmp_path):
        (tmp_path / "img.raw").write_bytes(b"\x00" * 10)
        manifest = tmp_path / "m.csv"
        manifest.write_text("path,label\nimg.raw,0\n")
        with pytest.raises(DatasetFormatError, match="bytes"):
            load_manifest(manifest, 3, 4, 4)


def test_images_to_float_range():
    ds = gen_blobs(2, 4, (3, 8, 8), seed=9)
    f = images_to_float(ds.images)
    assert f.dtype == np.float32 and f.min() >= 0.0 and f.max() <= 1.0
