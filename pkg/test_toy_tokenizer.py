"""
합성 토크나이저 / 데이터셋 테스트
"""

import numpy as np
import pytest
from PIL import Image

from tensor_core import Rng
from toy_tokenizer import (
    FAMILIES, Codebook, Dataset, DatasetError, SyntheticSpec, TokenGrid, allocate_palette, class_separability,
    decode, encode, flatten, generate_dataset, generate_sample, load_dataset, pattern_tokens, save_dataset,
    save_ppm, split_dataset, token_histograms, unflatten,
)


@pytest.fixture
def spec() -> SyntheticSpec:
    return SyntheticSpec()


@pytest.fixture
def dataset(spec) -> Dataset:
    return generate_dataset(spec, n_per_class=20, seed=7)


class TestSpec:
    def test_defaults(self, spec):
        assert (spec.grid_size, spec.seq_len, spec.vocab_size) == (8, 64, 64)

    @pytest.mark.parametrize("kwargs", [
        {"n_classes": 0},
        {"n_classes": len(FAMILIES) + 1},
        {"image_size": 15},
        {"levels": 1},
        {"noise": 50.0},
        {"levels": 2},  # 램프 두 개에 필요한 16 토큰 > V=8
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticSpec(**kwargs)

    def test_family_range(self, spec):
        assert spec.family(3) == "ramp_lr"
        with pytest.raises(ValueError):
            spec.family(10)

    def test_palette_is_disjoint(self, spec):
        slices = allocate_palette(spec)
        assert list(slices) == list(FAMILIES)
        assert slices["ramp_lr"][1] - slices["ramp_lr"][0] == spec.grid_size
        covered = np.zeros(spec.vocab_size, dtype=int)
        for start, stop in slices.values():
            covered[start:stop] += 1
        assert covered.max() == 1


class TestCodebook:
    def test_size_and_patch_dim(self):
        codebook = Codebook(levels=4, patch_size=2)
        assert codebook.size == 64 and codebook.patch_dim == 12

    def test_entries_are_frozen(self):
        with pytest.raises(ValueError):
            Codebook().entries[0, 0] = 1.0

    def test_tie_goes_to_lowest_index(self):
        codebook = Codebook(levels=2, patch_size=1)
        grid = encode(np.array([[[127.5, 0.0, 0.0]]]), codebook)
        assert grid.tokens[0, 0] == 0

    def test_clean_image_round_trip(self, spec):
        codebook = Codebook.from_spec(spec)
        for class_id in range(spec.n_classes):
            tokens = pattern_tokens(spec, class_id, Rng.derive(0, "pattern", class_id))
            np.testing.assert_array_equal(encode(decode(TokenGrid(tokens), codebook), codebook).tokens, tokens)

    def test_encode_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            encode(np.zeros((3, 4, 3)), Codebook(patch_size=2))

    def test_decode_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            decode(TokenGrid(np.array([[64]])), Codebook())


class TestRasterScan:
    def test_row_major(self):
        np.testing.assert_array_equal(flatten(TokenGrid(np.arange(6).reshape(2, 3))), np.arange(6))
        assert unflatten(np.arange(6), 2, 3).tokens[1, 0] == 3

    def test_unflatten_length(self):
        with pytest.raises(ValueError):
            unflatten(np.arange(5), 2, 3)


class TestSynthetic:
    def test_ramp_patterns(self, spec):
        start, _ = allocate_palette(spec)["ramp_lr"]
        lr = pattern_tokens(spec, 3, Rng(0))
        np.testing.assert_array_equal(lr[2], start + np.arange(8))
        tb = pattern_tokens(spec, 4, Rng(0))
        assert np.all(tb[:, 0] == tb[:, 5])

    def test_noise_survives_quantization(self, spec):
        codebook = Codebook.from_spec(spec)
        image = generate_sample(spec, 3, Rng(1))
        assert image.shape == (16, 16, 3)
        np.testing.assert_array_equal(encode(image, codebook).tokens, pattern_tokens(spec, 3, Rng(1)))

    def test_dataset_layout(self, dataset):
        assert len(dataset) == 200
        assert dataset.tokens.shape == (200, 64)
        np.testing.assert_array_equal(dataset.class_ids[:12], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1])

    def test_deterministic_and_worker_independent(self, spec, dataset):
        again = generate_dataset(spec, n_per_class=20, seed=7, workers=4)
        np.testing.assert_array_equal(again.tokens, dataset.tokens)
        other = generate_dataset(spec, n_per_class=20, seed=8)
        assert not np.array_equal(other.tokens, dataset.tokens)

    def test_classes_are_separable(self, dataset):
        assert class_separability(dataset) >= 0.95

    def test_histograms(self, dataset):
        hist = token_histograms(dataset.tokens[:3], 64)
        np.testing.assert_array_equal(hist.sum(axis=1), [64, 64, 64])

    def test_split(self, dataset):
        val = split_dataset(dataset, "val")
        train = split_dataset(dataset, "train")
        assert len(val) == 20 and len(train) == 180
        assert sorted(np.bincount(val.class_ids)) == [2] * 10
        assert split_dataset(dataset, "all") is dataset
        with pytest.raises(ValueError):
            split_dataset(dataset, "test")

    def test_bad_n_per_class(self, spec):
        with pytest.raises(ValueError):
            generate_dataset(spec, n_per_class=0)


class TestDatasetFile:
    def test_save_is_byte_identical(self, tmp_path, spec, dataset):
        save_dataset(dataset, tmp_path / "a.aimd")
        save_dataset(generate_dataset(spec, n_per_class=20, seed=7), tmp_path / "b.aimd")
        assert (tmp_path / "a.aimd").read_bytes() == (tmp_path / "b.aimd").read_bytes()

    def test_load(self, tmp_path, dataset):
        path = tmp_path / "data.aimd"
        save_dataset(dataset, path)
        loaded = load_dataset(path)
        assert loaded.spec == dataset.spec and loaded.seed == 7
        np.testing.assert_array_equal(loaded.tokens, dataset.tokens)
        np.testing.assert_array_equal(loaded.class_ids, dataset.class_ids)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "none.aimd")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.aimd"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(DatasetError):
            load_dataset(path)

    def test_truncated_body(self, tmp_path, dataset):
        path = tmp_path / "cut.aimd"
        save_dataset(dataset, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(DatasetError):
            load_dataset(path)

    def test_wrong_version(self, tmp_path, dataset):
        path = tmp_path / "v2.aimd"
        save_dataset(dataset, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = np.uint32(2).astype("<u4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(DatasetError):
            load_dataset(path)


class TestPpm:
    def test_save_ppm(self, tmp_path, spec):
        path = tmp_path / "img" / "sample.ppm"
        save_ppm(generate_sample(spec, 0, Rng(0)), path)
        assert path.read_bytes()[:2] == b"P6"
        with Image.open(path) as image:
            assert image.size == (16, 16) and image.mode == "RGB"
