"""Datasets, synthetic task generators, augmentations and online episodes.

Every learner in the package consumes the same ``Episode`` objects, so a
given ``TaskSpec`` and episode seed always produce the identical stream.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

SYNTHETIC_SOURCES = ("random", "sum-sign", "clusters", "linear")
RESCALE_SIZES = (14, 28, 32)


class IdxFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TaskError(ValueError):
    """Task configuration or task/architecture mismatch."""


# --------------------------------------------------------------------------
# IDX container


def parse_idx(data: bytes) -> np.ndarray:
    """Parse an IDX container (the MNIST family file format)."""
    if len(data) < 4:
        raise IdxFormatError(f"header needs 4 bytes, got {len(data)}", 0)
    zero, type_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0:
        raise IdxFormatError(f"bad magic {data[:4].hex()}: leading bytes must be zero", 0)
    if type_code not in IDX_DTYPES:
        raise IdxFormatError(f"unknown element type 0x{type_code:02x}", 2)
    if ndim == 0:
        raise IdxFormatError("zero-dimensional IDX tensor", 3)
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxFormatError(
            f"truncated header: expected {header_len} bytes, got {len(data)}", len(data)
        )
    dims = struct.unpack(">" + "I" * ndim, data[4:header_len])
    dtype = IDX_DTYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - header_len
    if actual != expected:
        raise IdxFormatError(
            f"payload length mismatch: expected {expected} bytes, got {actual}", header_len
        )
    arr = np.frombuffer(data, dtype=dtype, offset=header_len).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def encode_idx(arr: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx` (used for fixtures and tests)."""
    arr = np.asarray(arr)
    for code, dt in IDX_DTYPES.items():
        if dt.kind == arr.dtype.kind and dt.itemsize == arr.dtype.itemsize:
            break
    else:
        raise TypeError(f"dtype {arr.dtype} has no IDX type code")
    head = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    return head + arr.astype(dt).tobytes()


def read_idx_file(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return parse_idx(f.read())


@dataclass(frozen=True)
class RawDataset:
    images: np.ndarray  # (count, rows, cols) uint8
    labels: np.ndarray  # (count,) uint8
    split: str
    name: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise TaskError(
                f"{self.name}/{self.split}: {len(self.images)} images but {len(self.labels)} labels"
            )

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


_SPLIT_PREFIX = {"train": "train", "test": "t10k"}


def data_root(explicit=None) -> Path:
    root = explicit or os.environ.get("DATA_ROOT")
    if not root:
        raise TaskError("no data root: pass --data-root or set DATA_ROOT")
    return Path(root)


def load_dataset(name: str, split: str = "train", root=None) -> RawDataset:
    """Load ``<root>/<name>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]``."""
    base = data_root(root) / name
    prefix = _SPLIT_PREFIX[split]

    def find(stem):
        for candidate in (base / stem, base / (stem + ".gz")):
            if candidate.exists():
                return candidate
        raise TaskError(f"missing dataset file {base / stem}[.gz]")

    images = read_idx_file(find(f"{prefix}-images-idx3-ubyte"))
    labels = read_idx_file(find(f"{prefix}-labels-idx1-ubyte"))
    return RawDataset(images=images, labels=labels, split=split, name=name)


# --------------------------------------------------------------------------
# augmentations


def rescale(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a 2-D image with values in [0, 1] (half-pixel centres)."""
    if size not in RESCALE_SIZES:
        raise TaskError(f"unsupported rescale size {size}; choose from {RESCALE_SIZES}")
    image = np.asarray(image, dtype=np.float64)
    rows, cols = image.shape

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(rows)
    c0, c1, fc = axis(cols)
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return np.clip(out, 0.0, 1.0)


def projection_matrix(dim: int, seed: int, out_dim: int | None = None) -> np.ndarray:
    """Random linear map with entries N(0, 1/dim); drawn once per episode."""
    rng = np.random.default_rng([seed, 0x9E0])
    return rng.standard_normal((out_dim or dim, dim)) / np.sqrt(dim)


def apply_projection(x: np.ndarray, seed: int | None) -> np.ndarray:
    """Project rows of ``x`` by a seeded random matrix; ``seed=None`` is the identity."""
    x = np.asarray(x, dtype=np.float64)
    if seed is None:
        return x.copy()
    P = projection_matrix(x.shape[-1], seed)
    return x @ P.T


def input_permutation(dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0x9E1]).permutation(dim)


# --------------------------------------------------------------------------
# synthetic sources


@dataclass
class ArrayDataset:
    x: np.ndarray  # (n, dims) float
    y: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.y)


def make_random_task(seed: int, n_points: int = 20, dims: int = 16, classes: int = 2) -> ArrayDataset:
    if classes < 2:
        raise TaskError("random task needs at least 2 classes")
    rng = np.random.default_rng([seed, 0x4A1])
    return ArrayDataset(rng.standard_normal((n_points, dims)), rng.integers(0, classes, n_points))


def sum_sign_label(x: np.ndarray) -> np.ndarray:
    # ties (sum exactly zero) go to class 0
    return (np.sum(x, axis=-1) > 0).astype(np.int64)


def make_sum_sign(seed: int, dims: int, n: int) -> ArrayDataset:
    if dims < 1:
        raise TaskError("sum-sign needs dims >= 1")
    rng = np.random.default_rng([seed, 0x5E5])
    x = rng.standard_normal((n, dims))
    return ArrayDataset(x, sum_sign_label(x))


def cluster_prototypes(data_seed: int, side: int, classes: int) -> np.ndarray:
    rng = np.random.default_rng([data_seed, 0xC10])
    return rng.uniform(0.0, 1.0, (classes, side * side))


def make_cluster_task(seed: int, n: int, side: int = 8, classes: int = 2,
                      noise: float = 0.2, data_seed: int = 0) -> ArrayDataset:
    """Noisy copies of fixed per-class prototype images, pixels clipped to [0, 1]."""
    protos = cluster_prototypes(data_seed, side, classes)
    rng = np.random.default_rng([seed, 0xC11])
    y = rng.integers(0, classes, n)
    x = np.clip(protos[y] + noise * rng.standard_normal((n, side * side)), 0.0, 1.0)
    return ArrayDataset(x, y)


# --------------------------------------------------------------------------
# task specification and episodes


@dataclass(frozen=True)
class TaskSpec:
    source: str = "clusters"
    classes: int | tuple = 2
    rescale: int | None = None
    dims: int = 64              # synthetic input size (clusters: side*side)
    n_points: int = 20          # random task pool size
    noise: float = 0.2          # clusters
    data_seed: int = 0          # clusters prototypes
    project: bool = False
    projection_seed: int | None = None
    permute_inputs: bool = False
    permutation_seed: int | None = None
    permute_classes: bool = False
    split: str = "train"
    length: int = 100

    def __post_init__(self):
        if isinstance(self.classes, list):
            object.__setattr__(self, "classes", tuple(self.classes))
        if self.length < 1:
            raise TaskError("episode length must be >= 1")
        if self.rescale is not None and self.rescale not in RESCALE_SIZES:
            raise TaskError(f"unsupported rescale size {self.rescale}")
        if self.source == "clusters":
            side = int(round(np.sqrt(self.dims)))
            if side * side != self.dims:
                raise TaskError("clusters source needs a square number of dims")
        if self.split not in _SPLIT_PREFIX:
            raise TaskError(f"unknown split {self.split!r}")

    @property
    def class_list(self) -> tuple:
        if isinstance(self.classes, tuple):
            return self.classes
        return tuple(range(self.classes))

    @property
    def n_classes(self) -> int:
        return len(self.class_list)

    @property
    def is_synthetic(self) -> bool:
        return self.source in SYNTHETIC_SOURCES

    def input_dim(self, dataset: RawDataset | None = None) -> int:
        if self.is_synthetic:
            return self.dims
        if self.rescale is not None:
            return self.rescale**2
        if dataset is None:
            raise TaskError(f"input size of {self.source!r} needs the loaded dataset or a rescale size")
        return int(np.prod(dataset.images.shape[1:]))

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise TaskError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if isinstance(out["classes"], tuple):
            out["classes"] = list(out["classes"])
        return out

    def with_(self, **kw) -> "TaskSpec":
        return replace(self, **kw)


@dataclass
class Episode:
    """One online stream: inputs already augmented, labels remapped to 0..B-1."""
    x: np.ndarray       # (T, A) float64
    y: np.ndarray       # (T,) int64
    n_classes: int
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


def _order(rng, pool: int, length: int) -> np.ndarray:
    # no repeats unless the pool is shorter than the episode
    reps = -(-length // pool)
    return np.concatenate([rng.permutation(pool) for _ in range(reps)])[:length]


def _dataset_examples(spec: TaskSpec, ds: RawDataset, rng) -> tuple[np.ndarray, np.ndarray]:
    wanted = np.asarray(spec.class_list)
    idx = np.flatnonzero(np.isin(ds.labels, wanted))
    if len(idx) == 0:
        raise TaskError(f"{ds.name}: no examples of classes {spec.class_list}")
    pick = idx[_order(rng, len(idx), spec.length)]
    images = ds.images[pick].astype(np.float64) / 255.0
    if spec.rescale is not None and images.shape[1:] != (spec.rescale, spec.rescale):
        images = np.stack([rescale(im, spec.rescale) for im in images])
    remap = {c: i for i, c in enumerate(spec.class_list)}
    labels = np.array([remap[int(c)] for c in ds.labels[pick]], dtype=np.int64)
    return images.reshape(len(pick), -1), labels


def make_episode(spec: TaskSpec, seed: int, dataset: RawDataset | None = None) -> Episode:
    """Build the deterministic stream for ``(spec, seed)``.

    Augmentations (permutation, projection, class relabelling) are applied
    here, before any learner sees the data.
    """
    rng = np.random.default_rng([seed, 0xE95])
    T = spec.length
    if spec.source == "random":
        pool = make_random_task(seed, spec.n_points, spec.dims, spec.n_classes)
        order = _order(rng, len(pool), T)
        x, y = pool.x[order], pool.y[order]
    elif spec.source == "sum-sign":
        if spec.n_classes != 2:
            raise TaskError("sum-sign is a 2-class task")
        data = make_sum_sign(seed, spec.dims, T)
        x, y = data.x, data.y
    elif spec.source == "linear":
        if spec.n_classes != 2:
            raise TaskError("linear is a 2-class task")
        toy = linear_toy_episode(seed, T, spec.dims)
        x, y = toy.x, toy.y
    elif spec.source == "clusters":
        side = int(round(np.sqrt(spec.dims)))
        data = make_cluster_task(seed, T, side, spec.n_classes, spec.noise, spec.data_seed)
        x, y = data.x, data.y
    else:
        if dataset is None:
            raise TaskError(f"task source {spec.source!r} needs a loaded dataset")
        x, y = _dataset_examples(spec, dataset, rng)

    meta = {}
    if spec.permute_inputs:
        pseed = spec.permutation_seed if spec.permutation_seed is not None else seed
        x = x[:, input_permutation(x.shape[1], pseed)]
        meta["permutation_seed"] = pseed
    if spec.project:
        pseed = spec.projection_seed if spec.projection_seed is not None else seed
        x = apply_projection(x, pseed)
        meta["projection_seed"] = pseed
    if spec.permute_classes:
        relabel = np.random.default_rng([seed, 0x9E2]).permutation(spec.n_classes)
        y = relabel[y]
    return Episode(np.ascontiguousarray(x, dtype=np.float64), y.astype(np.int64),
                   spec.n_classes, seed, meta)


def repeated_pairs(episode: Episode) -> Episode:
    """Show every example twice in a row (introspection protocol)."""
    x = np.repeat(episode.x, 2, axis=0)
    y = np.repeat(episode.y, 2)
    return Episode(x, y, episode.n_classes, episode.seed, {**episode.meta, "repeated": True})


def linear_toy_episode(seed: int, length: int, dims: int = 4, margin: float = 0.5) -> Episode:
    """Linearly separable 2-class stream: label = [x . u > 0], points kept off the margin."""
    rng = np.random.default_rng([seed, 0x70E])
    u = rng.standard_normal(dims)
    u /= np.linalg.norm(u)
    xs = []
    while sum(len(b) for b in xs) < length:
        cand = rng.standard_normal((2 * length, dims))
        xs.append(cand[np.abs(cand @ u) > margin])
    x = np.concatenate(xs)[:length]
    y = (x @ u > 0).astype(np.int64)
    return Episode(x, y, 2, seed, {"toy": "linear", "dims": dims})
