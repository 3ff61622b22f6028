"""
Toy generator, DSV1 container, batching and PNM export
"""
import struct
from dataclasses import replace

import numpy as np
import pytest

from src.data import (DSV1_MAGIC, Batch, Dataset, ToySpec, batches, decode_dataset, encode_dataset,
                      epoch_permutation, export_ppm, gen_toy, load_dataset, num_batches, read_ppm,
                      save_dataset)
from src.error_reporter import ConfigError, FormatError, ParameterError


class TestToyGenerator:

    def test_same_seed_same_pixels(self, tiny_spec, tiny_dataset):
        assert gen_toy(tiny_spec) == tiny_dataset
        assert not gen_toy(replace(tiny_spec, seed=4)) == tiny_dataset

    def test_label_pattern_and_masks(self, tiny_dataset):
        assert len(tiny_dataset) == 12
        np.testing.assert_array_equal(tiny_dataset.labels, np.arange(12) % 4)
        assert tiny_dataset.image_shape == (3, 16, 16)
        assert tiny_dataset.masks.shape == (12, 16, 16)
        assert all(mask.any() for mask in tiny_dataset.masks)
        images = tiny_dataset.images
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_splits_do_not_share_images(self, tiny_spec, tiny_dataset):
        test = gen_toy(replace(tiny_spec, split='test'))
        assert test.split == 'test'
        assert not any(np.array_equal(a, b) for a, b in zip(test.pixels, tiny_dataset.pixels))

    def test_noiseless_classes_are_constant(self):
        spec = ToySpec(n_per_class=3, image_size=16, noise=0.0, position_jitter=0.0, scale_jitter=0.0,
                       rotation_jitter=0.0, color_jitter=0.0, texture_jitter=0.0)
        dataset = gen_toy(spec)
        for label in range(4):
            members = dataset.pixels[dataset.labels == label]
            assert all(np.array_equal(members[0], other) for other in members[1:])

    def test_pixel_nearest_neighbour_is_perfect_without_noise(self):
        spec = ToySpec(n_per_class=4, image_size=16, noise=0.0, position_jitter=0.0, scale_jitter=0.0,
                       rotation_jitter=0.0, color_jitter=0.0, texture_jitter=0.0)
        train = gen_toy(spec)
        test = gen_toy(replace(spec, split='test'))
        flat_train = train.images.reshape(len(train), -1)
        flat_test = test.images.reshape(len(test), -1)
        distances = ((flat_test[:, None] - flat_train[None]) ** 2).sum(axis=-1)
        predictions = train.labels[distances.argmin(axis=1)]
        np.testing.assert_array_equal(predictions, test.labels)

    def test_oversized_shapes_are_clipped(self):
        spec = ToySpec(n_per_class=2, image_size=8, scale_jitter=0.9, position_jitter=0.5)
        assert len(gen_toy(spec)) == 8

    def test_single_channel(self):
        dataset = gen_toy(ToySpec(n_per_class=1, image_size=8, channels=1))
        assert dataset.image_shape == (1, 8, 8)

    @pytest.mark.parametrize('overrides', [
        {'image_size': 18},
        {'noise': 1.0},
        {'classes': ('disk', 'hexagon')},
        {'classes': ('disk', 'disk')},
        {'split': 'holdout'},
        {'n_per_class': 0},
    ])
    def test_invalid_spec(self, overrides):
        with pytest.raises(ConfigError):
            ToySpec(**overrides)


class TestContainer:

    def test_round_trip_is_bitwise(self, tiny_dataset):
        data = encode_dataset(tiny_dataset)
        assert data[:4] == DSV1_MAGIC
        decoded = decode_dataset(data)
        assert decoded == tiny_dataset
        assert decoded.class_names == ('disk', 'square', 'triangle', 'cross')
        assert encode_dataset(decoded) == data

    def test_file_round_trip_and_split_from_name(self, tmp_path, tiny_dataset):
        path = str(tmp_path / 'test.dsv')
        save_dataset(tiny_dataset, path)
        loaded = load_dataset(path)
        assert loaded == tiny_dataset
        assert loaded.split == 'test'
        assert load_dataset(path, split='val').split == 'val'

    def test_bad_magic(self, tiny_dataset):
        data = b'XSV1' + encode_dataset(tiny_dataset)[4:]
        with pytest.raises(FormatError) as info:
            decode_dataset(data)
        assert info.value.offset == 0

    def test_bad_version(self, tiny_dataset):
        data = bytearray(encode_dataset(tiny_dataset))
        data[4:8] = struct.pack('<I', 9)
        with pytest.raises(FormatError, match='version') as info:
            decode_dataset(bytes(data))
        assert info.value.offset == 4

    def test_truncated_payload(self, tiny_dataset):
        data = encode_dataset(tiny_dataset)
        with pytest.raises(FormatError) as info:
            decode_dataset(data[:-1])
        assert info.value.offset is not None and info.value.offset > 28

    def test_truncated_header(self, tiny_dataset):
        with pytest.raises(FormatError, match='truncated') as info:
            decode_dataset(encode_dataset(tiny_dataset)[:10])
        assert info.value.offset == 8

    def test_header_count_disagrees_with_payload(self, tiny_dataset):
        data = bytearray(encode_dataset(tiny_dataset))
        data[8:12] = struct.pack('<I', len(tiny_dataset) + 1)
        with pytest.raises(FormatError, match='N=13'):
            decode_dataset(bytes(data))

    def test_label_out_of_range(self, tiny_dataset):
        data = bytearray(encode_dataset(tiny_dataset))
        data[-2:] = struct.pack('<H', 7)
        with pytest.raises(FormatError, match='exceeds class count'):
            decode_dataset(bytes(data))

    def test_empty_dataset(self):
        empty = Dataset(np.zeros((0, 3, 4, 4), dtype=np.uint8), [], ('disk',))
        assert decode_dataset(encode_dataset(empty)) == empty

    def test_dataset_rejects_float_pixels(self):
        with pytest.raises(ConfigError):
            Dataset(np.zeros((1, 3, 4, 4)), [0], ('disk',))

    def test_from_images_rounds_to_bytes(self):
        dataset = Dataset.from_images(np.full((1, 1, 2, 2), 0.5), [0], ['disk'])
        np.testing.assert_array_equal(dataset.pixels, 128)


class TestBatches:

    def test_every_sample_once_per_epoch(self, tiny_dataset):
        seen = np.concatenate([b.indices for b in batches(tiny_dataset, 5, seed=1, epoch=0)])
        assert sorted(seen.tolist()) == list(range(12))

    def test_final_partial_batch(self, tiny_dataset):
        sizes = [len(b.indices) for b in batches(tiny_dataset, 5, seed=1, epoch=0)]
        assert sizes == [5, 5, 2]
        assert num_batches(12, 5) == 3 and num_batches(10, 5) == 2

    def test_images_follow_indices(self, tiny_dataset):
        batch = next(batches(tiny_dataset, 4, seed=2, epoch=1))
        assert isinstance(batch, Batch)
        np.testing.assert_array_equal(batch.images, tiny_dataset.images[batch.indices])

    def test_order_is_pure_in_seed_and_epoch(self):
        np.testing.assert_array_equal(epoch_permutation(50, 3, 0), epoch_permutation(50, 3, 0))
        assert not np.array_equal(epoch_permutation(50, 3, 0), epoch_permutation(50, 3, 1))
        assert not np.array_equal(epoch_permutation(50, 3, 0), epoch_permutation(50, 4, 0))

    def test_start_skips_leading_batches(self, tiny_dataset):
        full = [b.indices for b in batches(tiny_dataset, 5, seed=1, epoch=2)]
        tail = [b.indices for b in batches(tiny_dataset, 5, seed=1, epoch=2, start=1)]
        assert len(tail) == 2
        for a, b in zip(full[1:], tail):
            np.testing.assert_array_equal(a, b)

    def test_batch_size_must_be_positive(self, tiny_dataset):
        with pytest.raises(ParameterError):
            next(batches(tiny_dataset, 0, seed=1, epoch=0))


class TestPnm:

    def test_ppm_round_trip(self, tmp_path, tiny_dataset):
        path = str(tmp_path / 'sample.ppm')
        export_ppm(tiny_dataset, 5, path)
        with open(path, 'rb') as handle:
            assert handle.read(2) == b'P6'
        np.testing.assert_array_equal(read_ppm(path), tiny_dataset.pixels[5])

    def test_pgm_with_comment(self, tmp_path):
        path = tmp_path / 'gray.pgm'
        path.write_bytes(b'P5\n# note\n3 2\n255\n' + bytes(range(6)))
        raster = read_ppm(str(path))
        assert raster.shape == (1, 2, 3)
        np.testing.assert_array_equal(raster[0, 1], [3, 4, 5])

    def test_short_payload(self, tmp_path):
        path = tmp_path / 'short.ppm'
        path.write_bytes(b'P6\n2 2\n255\n' + bytes(5))
        with pytest.raises(FormatError):
            read_ppm(str(path))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / 'ascii.ppm'
        path.write_bytes(b'P3\n1 1\n255\n0 0 0\n')
        with pytest.raises(FormatError, match='magic'):
            read_ppm(str(path))


class TestSubset:

    def test_subset_keeps_masks(self, tiny_dataset):
        part = tiny_dataset.subset([3, 0])
        assert len(part) == 2
        np.testing.assert_array_equal(part.labels, [3, 0])
        np.testing.assert_array_equal(part.masks[1], tiny_dataset.masks[0])
