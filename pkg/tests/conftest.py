import os

import numpy as np
import pytest

import tensor as T
from core import Settings
from data import ImageSample
from network import BackboneConfig, StudentNetwork, init_parameters

TOY = BackboneConfig(stages=2, channels=(4, 8), blocks=1, input_shape=(3, 8, 8), num_classes=3, num_transforms=4)


@pytest.fixture
def float64():
    with T.precision(64):
        yield


def make_samples(per_class: int, num_classes: int, shape=(3, 8, 8), seed: int = 0, first_id: int = 0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(per_class * num_classes):
        samples.append(ImageSample(rng.normal(size=shape).astype(np.float32), i % num_classes, first_id + i))
    return samples


@pytest.fixture
def samples():
    return make_samples


@pytest.fixture
def toy_network(float64):
    network = StudentNetwork(TOY)
    init_parameters(network, 0)
    return network


def toy_settings(out_dir, **changes) -> Settings:
    """Small 2-stage run on 8x8 inputs; architecture keys match TOY."""
    base = {"model.stages": 2, "model.channels": [4, 8], "model.blocks": 1, "train.epochs": 2, "train.batch": 6,
            "train.milestones": [], "out.dir": str(out_dir), "out.wall_clock": False}
    base.update(changes)
    return Settings().override(**base)


def write_cifar10(root, train_per_class: int = 2, test_per_class: int = 1, seed: int = 0, files: int = 1):
    """Synthetic CIFAR-10 tree under root/cifar10 with every class present."""
    folder = os.path.join(str(root), "cifar10")
    os.makedirs(folder, exist_ok=True)
    rng = np.random.default_rng(seed)

    def records(per_class):
        n = per_class * 10
        labels = np.arange(n) % 10
        raw = rng.integers(0, 256, size=(n, 3 * 32 * 32), dtype=np.uint8)
        return b"".join(bytes([int(l)]) + raw[i].tobytes() for i, l in enumerate(labels))

    for f in range(files):
        with open(os.path.join(folder, f"data_batch_{f + 1}.bin"), "wb") as out: out.write(records(train_per_class))
    with open(os.path.join(folder, "test_batch.bin"), "wb") as out: out.write(records(test_per_class))
    return folder
