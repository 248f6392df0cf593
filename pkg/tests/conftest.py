import gzip

import numpy as np
import pytest

from vsml.tasks import encode_idx


def write_idx_dataset(root, name="digits", n=60, side=8, classes=10, seed=0, gz=False):
    """Tiny MNIST-layout dataset on disk: train and t10k splits."""
    rng = np.random.default_rng(seed)
    base = root / name
    base.mkdir(parents=True, exist_ok=True)
    for prefix in ("train", "t10k"):
        labels = (np.arange(n) % classes).astype(np.uint8)
        images = rng.integers(0, 256, (n, side, side)).astype(np.uint8)
        for stem, arr in ((f"{prefix}-images-idx3-ubyte", images), (f"{prefix}-labels-idx1-ubyte", labels)):
            data = encode_idx(arr)
            if gz:
                (base / (stem + ".gz")).write_bytes(gzip.compress(data))
            else:
                (base / stem).write_bytes(data)
    return base


@pytest.fixture
def idx_root(tmp_path):
    write_idx_dataset(tmp_path)
    return tmp_path
