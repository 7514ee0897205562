import os
import struct

import numpy as np
import pytest

from conftest import make_samples, write_cifar10
from core import DATASET_DEFAULTS, DataError, DatasetSettings
from data import (ImageSample, augment, batch_iter, class_counts, collate, crop_flip, load_cifar_binary, load_dataset,
                  load_idx, per_class_limit, sample_rng, stratified_subset, to_cifar_bytes, to_idx_bytes)


def cifar_records(labels, seed=0, coarse=None):
    rng = np.random.default_rng(seed)
    out = bytearray()
    for i, label in enumerate(labels):
        if coarse is not None: out.append(coarse[i])
        out.append(label)
        out += rng.integers(0, 256, 3 * 32 * 32, dtype=np.uint8).tobytes()
    return bytes(out)


def write(path, payload):
    with open(path, "wb") as f: f.write(payload)
    return str(path)


class TestCifar:
    def test_ten_records(self, tmp_path):
        path = write(tmp_path / "b.bin", cifar_records(list(range(10))))
        assert os.path.getsize(path) == 30730
        samples, meta = load_cifar_binary(path, "cifar10")
        assert len(samples) == 10
        assert [s.label for s in samples] == list(range(10))
        assert [s.sample_id for s in samples] == list(range(10))
        assert samples[0].pixels.shape == (3, 32, 32) and samples[0].pixels.dtype == np.float32
        assert meta.num_classes == 10

    def test_normalization(self, tmp_path):
        payload = bytearray(cifar_records([3]))
        payload[1] = 255
        samples, _ = load_cifar_binary(write(tmp_path / "b.bin", payload), "cifar10", mean=[0.5] * 3, std=[0.5] * 3)
        assert samples[0].pixels[0, 0, 0] == pytest.approx(1.0)

    def test_label_out_of_range(self, tmp_path):
        with pytest.raises(DataError, match="label 255"):
            load_cifar_binary(write(tmp_path / "b.bin", cifar_records([1, 255])), "cifar10")

    def test_truncated_file(self, tmp_path):
        with pytest.raises(DataError, match="multiple"):
            load_cifar_binary(write(tmp_path / "b.bin", cifar_records([1, 2])[:-5]), "cifar10")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_cifar_binary(str(tmp_path / "nope.bin"), "cifar10")

    def test_cifar100_uses_fine_label(self, tmp_path):
        samples, meta = load_cifar_binary(write(tmp_path / "t.bin", cifar_records([42, 99], coarse=[3, 19])), "cifar100")
        assert [s.label for s in samples] == [42, 99]
        assert [s.coarse_label for s in samples] == [3, 19]
        assert meta.num_classes == 100

    @pytest.mark.parametrize("variant,coarse", [("cifar10", None), ("cifar100", [7, 0, 19])])
    def test_reserialize_is_byte_exact(self, tmp_path, variant, coarse):
        payload = cifar_records([5, 0, 9], seed=3, coarse=coarse)
        samples, _ = load_cifar_binary(write(tmp_path / "b.bin", payload), variant)
        assert to_cifar_bytes(samples, variant) == payload


class TestIdx:
    def idx_files(self, tmp_path, count=2, labels=None, magic=0x00000803, label_count=None):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, (count, 28, 28), dtype=np.uint8)
        pixels[0, 0, 0] = 0
        images = struct.pack(">IIII", magic, count, 28, 28) + pixels.tobytes()
        labels = bytes(labels if labels is not None else [i % 10 for i in range(count)])
        label_count = count if label_count is None else label_count
        return (write(tmp_path / "img", images), write(tmp_path / "lbl", struct.pack(">II", 0x00000801, label_count) + labels))

    def test_two_images(self, tmp_path):
        samples, meta = load_idx(*self.idx_files(tmp_path))
        assert len(samples) == 2
        assert samples[0].pixels.shape == (1, 28, 28)
        assert samples[0].pixels[0, 0, 0] == pytest.approx((0.0 - 0.1307) / 0.3081)
        assert meta.image_shape == (1, 28, 28)

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(DataError, match="count mismatch"):
            load_idx(*self.idx_files(tmp_path, label_count=3, labels=[0, 1, 2]))

    def test_bad_magic(self, tmp_path):
        with pytest.raises(DataError, match="magic"):
            load_idx(*self.idx_files(tmp_path, magic=0x00000801))

    def test_reserialize_is_byte_exact(self, tmp_path):
        images_path, labels_path = self.idx_files(tmp_path, count=4)
        samples, _ = load_idx(images_path, labels_path)
        images, labels = to_idx_bytes(samples)
        with open(images_path, "rb") as f: assert f.read() == images
        with open(labels_path, "rb") as f: assert f.read() == labels


class TestLoadDataset:
    def test_cifar10_tree(self, tmp_path):
        write_cifar10(tmp_path, train_per_class=2, test_per_class=1, files=2)
        train, test, meta = load_dataset(DatasetSettings(name="cifar10", dir=str(tmp_path)))
        assert len(train) == 40 and len(test) == 10
        assert [s.sample_id for s in train] == list(range(40))
        assert meta.train_count == 40

    def test_limits_are_per_class(self, tmp_path):
        write_cifar10(tmp_path, train_per_class=3, test_per_class=2)
        train, test, _ = load_dataset(DatasetSettings(name="cifar10", dir=str(tmp_path), train_limit=20, test_limit=10))
        assert set(class_counts(train).values()) == {2}
        assert set(class_counts(test).values()) == {1}

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match="cifar100"):
            load_dataset(DatasetSettings(name="cifar100", dir=str(tmp_path)))

    def test_default_normalization(self):
        settings = DatasetSettings(name="mnist")
        assert settings.mean == list(DATASET_DEFAULTS["mnist"][2])
        assert settings.image_shape == (1, 28, 28)


class TestAugment:
    def test_centre_crop_without_flip_is_identity(self):
        sample = make_samples(1, 1, shape=(3, 32, 32))[0]
        np.testing.assert_array_equal(crop_flip(sample, 4, 4, False).pixels, sample.pixels)

    def test_double_flip_is_identity(self):
        sample = make_samples(1, 1, shape=(3, 32, 32))[0]
        once = crop_flip(sample, 4, 4, True)
        np.testing.assert_array_equal(crop_flip(once, 4, 4, True).pixels, sample.pixels)

    def test_corner_crop_pads_with_zeros(self):
        sample = ImageSample(np.ones((1, 8, 8), dtype=np.float32), 0, 0)
        out = crop_flip(sample, 0, 0, False).pixels
        assert not out[:, :4, :].any() and (out[:, 4:, 4:] == 1).all()

    def test_same_seed_same_output(self):
        sample = make_samples(1, 1, shape=(3, 32, 32))[0]
        a = augment(sample, sample_rng(7, 3, sample.sample_id))
        b = augment(sample, sample_rng(7, 3, sample.sample_id))
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert a.pixels.shape == sample.pixels.shape and a.label == sample.label

    def test_collate(self):
        batch = make_samples(2, 3)
        x, labels, ids = collate(batch)
        assert x.shape == (6, 3, 8, 8)
        assert labels.tolist() == [0, 1, 2, 0, 1, 2]
        assert ids.tolist() == list(range(6))
        xa, _, _ = collate(batch, augmented=True, seed=1, epoch=1)
        xb, _, _ = collate(batch, augmented=True, seed=1, epoch=1)
        np.testing.assert_array_equal(xa, xb)


class TestSubset:
    @pytest.mark.parametrize("fraction,expected", [(0.25, 25), (0.5, 50), (0.75, 75)])
    def test_per_class_counts(self, fraction, expected):
        pool = make_samples(100, 10, shape=(1, 2, 2))
        subset = stratified_subset(pool, fraction, seed=0, num_classes=10)
        assert class_counts(subset) == {c: expected for c in range(10)}
        ids = [s.sample_id for s in subset]
        assert ids == sorted(ids) and len(set(ids)) == len(ids)

    def test_full_fraction_is_identity(self):
        pool = make_samples(5, 4, shape=(1, 2, 2))
        subset = stratified_subset(pool, 1.0, seed=3)
        assert len(subset) == len(pool) and all(a is b for a, b in zip(subset, pool))

    def test_seeded(self):
        pool = make_samples(20, 10, shape=(1, 2, 2))
        a = [s.sample_id for s in stratified_subset(pool, 0.5, seed=11)]
        b = [s.sample_id for s in stratified_subset(pool, 0.5, seed=11)]
        c = [s.sample_id for s in stratified_subset(pool, 0.5, seed=12)]
        assert a == b and a != c

    def test_rounds_half_up(self):
        pool = make_samples(2, 3, shape=(1, 2, 2))
        assert class_counts(stratified_subset(pool, 0.25, seed=0)) == {0: 1, 1: 1, 2: 1}

    def test_empty_class(self):
        pool = [s for s in make_samples(4, 3, shape=(1, 2, 2)) if s.label != 2]
        with pytest.raises(DataError, match="class 2"):
            stratified_subset(pool, 0.5, seed=0, num_classes=3)

    def test_per_class_limit_keeps_lowest_ids(self):
        pool = make_samples(5, 2, shape=(1, 2, 2))
        kept = per_class_limit(pool, 4, 2)
        assert [s.sample_id for s in kept] == [0, 1, 2, 3]


class TestBatches:
    def test_sizes(self):
        pool = make_samples(13, 10, shape=(1, 2, 2))
        assert [len(b) for b in batch_iter(pool, 64, seed=0, epoch=1)] == [64, 64, 2]

    def test_order_is_seeded_per_epoch(self):
        pool = make_samples(10, 10, shape=(1, 2, 2))
        order = lambda epoch: [s.sample_id for b in batch_iter(pool, 16, seed=5, epoch=epoch) for s in b]
        assert order(1) == order(1)
        assert order(1) != order(2)
        assert sorted(order(1)) == list(range(100))

    def test_bad_batch_size(self):
        with pytest.raises(DataError):
            list(batch_iter(make_samples(1, 2), 0, seed=0, epoch=1))
