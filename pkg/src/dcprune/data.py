"""Datasets (CIFAR-10 binary batches, synthetic generators) and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .network import LayerNode, NetworkDef
from .tensor import Tensor

CIFAR_RECORD = 3073
CIFAR_PER_FILE = 10_000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
# widely published CIFAR-10 training-set channel statistics
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
DATA_DIR_ENV = "DCP_DATA_DIR"


class DataError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N, C, H, W (normalized network input)
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)
    # ground-truth informative input channels (informative-channel generator only)
    informative: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] == 0:
            raise DataError("dataset is empty")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")
        c = self.images.shape[1]
        if self.mean is None:
            self.mean = np.zeros(c)
        if self.std is None:
            self.std = np.ones(c)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.split,
                       self.mean, self.std, self.informative)


# ------------------------------------------------------------------ CIFAR-10


def resolve_data_dir(path: Optional[str | os.PathLike]) -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    if path is None:
        raise DataError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    return Path(path)


def read_cifar_file(path: Path, strict: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Decode one binary batch into (uint8 images [n,3,32,32], labels [n])."""
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    expected = CIFAR_PER_FILE * CIFAR_RECORD
    if raw.size == 0 or raw.size % CIFAR_RECORD or (strict and raw.size != expected):
        raise DataError(
            f"bad file size for {path.name}: {raw.size} bytes"
            f" (expected {expected}" + ("" if strict else f" or a multiple of {CIFAR_RECORD}") + ")"
        )
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataError(f"label byte {labels[bad[0]]} >= 10 in record {bad[0]} of {path.name}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(
    directory: Optional[str | os.PathLike] = None,
    split: str = "train",
    normalize: bool = True,
    strict: bool = True,
) -> Dataset:
    """Load the CIFAR-10 binary distribution (``data_batch_{1..5}.bin``, ``test_batch.bin``)."""
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}")
    root = resolve_data_dir(directory)
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    parts = [read_cifar_file(root / name, strict) for name in names]
    pixels = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    images = pixels.astype(np.float64) / 255.0
    mean, std = np.zeros(3), np.ones(3)
    if normalize:
        mean, std = np.array(CIFAR_MEAN), np.array(CIFAR_STD)
        images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images, labels, 10, split, mean, std)


# ------------------------------------------------------------------ synthetic


def make_synthetic(
    kind: str,
    n: int,
    num_classes: int,
    shape: tuple[int, int, int] = (3, 8, 8),
    seed: int = 0,
    split: str = "train",
    informative: int = 3,
    signal: float = 1.0,
    noise: float = 1.0,
    distractor_scale: float = 1.0,
) -> Dataset:
    """Desk-scale synthetic classification data.

    ``gaussian-blobs``: one isotropic Gaussian cluster per class.
    ``informative-channel``: only ``informative`` input channels carry
    label signal, a class-dependent constant offset of the whole channel
    (so it survives global pooling); the rest are pixel noise scaled by
    ``distractor_scale``.  The class patterns and the informative channel
    set depend only on ``seed``, so train and test splits drawn with the
    same seed and different ``split`` share them.
    """
    structure = np.random.default_rng(seed)
    samples = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.arange(n) % num_classes
    samples.shuffle(labels)
    c, h, w = shape
    if kind == "gaussian-blobs":
        centers = structure.normal(0.0, signal, size=(num_classes, c, h, w))
        images = centers[labels] + samples.normal(0.0, noise, size=(n, c, h, w))
        return Dataset(images, labels, num_classes, split)
    if kind == "informative-channel":
        if not 0 < informative <= c:
            raise ValueError(f"informative channel count must lie in [1, {c}]")
        chosen = np.sort(structure.choice(c, size=informative, replace=False))
        patterns = structure.normal(0.0, signal, size=(num_classes, informative, 1, 1))
        images = samples.normal(0.0, noise, size=(n, c, h, w))
        distract = np.setdiff1d(np.arange(c), chosen)
        images[:, distract] *= distractor_scale
        images[:, chosen] += patterns[labels]
        return Dataset(images, labels, num_classes, split, informative=chosen)
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop (zero padding of 1/8 the height) plus horizontal flip."""
    n, c, h, w = x.shape
    pad = max(1, h // 8)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = xp[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def sample_subset(ds: Dataset, count: int, seed: int = 0) -> Dataset:
    """Class-stratified uniform sample of ``count`` examples without replacement."""
    n = len(ds)
    if not 0 < count <= n:
        raise DataError(f"cannot sample {count} of {n} examples")
    rng = np.random.default_rng(seed)
    classes = np.unique(ds.labels)
    avail = np.array([np.count_nonzero(ds.labels == k) for k in classes])
    quota = np.zeros_like(avail)
    left = count
    # water-fill equal shares, capped by availability
    while left:
        open_ = np.flatnonzero(quota < avail)
        share = left // open_.size
        if share == 0:
            lucky = rng.choice(open_, size=left, replace=False)
            quota[lucky] += 1
            break
        add = np.minimum(share, avail[open_] - quota[open_])
        quota[open_] += add
        left -= int(add.sum())
    picked = [
        rng.choice(np.flatnonzero(ds.labels == k), size=q, replace=False)
        for k, q in zip(classes, quota) if q
    ]
    index = rng.permutation(np.concatenate(picked))
    return ds.take(index)


# ------------------------------------------------------------------ checkpoints
#
# Layout (little-endian):
#   magic  b"DCPCKPT\0" | version u32 | header_len u64 | header JSON
#   array_count u32 | per array: name_len u32, name, dtype u8, ndim u8,
#                                dims u64 * ndim, nbytes u64, raw bytes
#   trailer: total file length u64 | b"DCPEND\0\0"

MAGIC = b"DCPCKPT\0"
END = b"DCPEND\0\0"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("bool"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("bool"): 1, np.dtype("int64"): 2}


def _net_arrays(net: NetworkDef) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for i, node in enumerate(net.nodes):
        for key, p in node.params.items():
            arrays[f"{i}/param/{key}"] = p.data
        for key, b in node.buffers.items():
            arrays[f"{i}/buffer/{key}"] = b
        if node.input_mask is not None:
            arrays[f"{i}/mask"] = node.input_mask
    if net.input_select is not None:
        arrays["input_select"] = np.asarray(net.input_select, dtype=np.int64)
    return arrays


def _header(net: NetworkDef) -> dict:
    return {
        "arch": net.arch,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "meta": net.meta,
        "nodes": [
            {"kind": n.kind, "name": n.name, "inputs": list(n.inputs), "stride": n.stride,
             "padding": n.padding, "window": n.window}
            for n in net.nodes
        ],
    }


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(net: NetworkDef, path: str | os.PathLike, provenance: Optional[dict] = None) -> Path:
    """Write ``net`` to ``path`` and a JSON sidecar ``path + '.json'``."""
    path = Path(path)
    header = json.dumps(_header(net), sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(header)), header]
    arrays = _net_arrays(net)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = _CODES[arr.dtype]
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        bname = name.encode()
        chunks.append(struct.pack("<I", len(bname)) + bname)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<Q", len(raw)) + raw)
    body = b"".join(chunks)
    total = len(body) + 16
    path.write_bytes(body + struct.pack("<Q", total) + END)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "arch": net.arch,
        "num_classes": net.num_classes,
        "provenance": provenance or {},
        "meta": net.meta,
    }
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | os.PathLike) -> NetworkDef:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = r.unpack("<IQ", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if len(blob) < 16 or blob[-8:] != END:
        raise CheckpointError(f"{path}: truncated checkpoint (missing trailer)")
    (total,) = struct.unpack("<Q", blob[-16:-8])
    if total != len(blob):
        raise CheckpointError(f"{path}: length field says {total} bytes, file has {len(blob)}")
    header = json.loads(r.take(header_len, "header").decode())
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "array name length")
        name = r.take(name_len, "array name").decode()
        code, ndim = r.unpack("<BB", "array dtype")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{ndim}Q", "array dims")
        (nbytes,) = r.unpack("<Q", "array length")
        dt = _DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: length of {name} inconsistent with its shape")
        arrays[name] = np.frombuffer(r.take(nbytes, name), dtype=dt).reshape(dims).copy()
    if r.pos != len(blob) - 16:
        raise CheckpointError(f"{path}: {len(blob) - 16 - r.pos} unexpected bytes before trailer")

    nodes = []
    for i, spec in enumerate(header["nodes"]):
        params, buffers = {}, {}
        prefix = f"{i}/"
        for name, arr in arrays.items():
            if not name.startswith(prefix):
                continue
            _, section, *rest = name.split("/")
            if section == "param":
                params[rest[0]] = Tensor(arr, requires_grad=True)
            elif section == "buffer":
                buffers[rest[0]] = arr
        nodes.append(LayerNode(
            spec["kind"], spec["name"], tuple(spec["inputs"]), params, buffers,
            arrays.get(f"{i}/mask"), spec["stride"], spec["padding"], spec["window"],
        ))
    return NetworkDef(
        header["arch"], tuple(header["input_shape"]), header["num_classes"], nodes,
        arrays.get("input_select"), header.get("meta", {}),
    )
