"""MNIST/CIFAR-10 binary loaders and the deterministic augmentation pipeline."""

import hashlib
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .tensor import make_rng

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    images: np.ndarray  # [count, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [count] int64
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, count, name=None):
        return Dataset(self.images[:count], self.labels[:count], name or self.name)


# ---------------------------------------------------------------------------
# loaders


def _read(path):
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"data file not found: {path}") from None


def _parse_idx(raw, magic, path):
    ndim = 3 if magic == IDX_IMAGE_MAGIC else 1
    header = 4 * (1 + ndim)
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack(">i", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: IDX magic {found}, expected {magic}")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, name="mnist"):
    images = _parse_idx(_read(images_path), IDX_IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read(labels_path), IDX_LABEL_MAGIC, labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset((images[:, None] / np.float32(255)).astype(np.float32),
                   labels.astype(np.int64), name)


def write_mnist_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``[count, H, W]`` and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">4i", IDX_IMAGE_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2i", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


def load_cifar10_bin(batch_paths, name="cifar10"):
    records = []
    for path in batch_paths:
        raw = _read(path)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(records)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"CIFAR-10 label {labels.max()} out of range")
    images = (rec[:, 1:].reshape(-1, 3, 32, 32) / np.float32(255)).astype(np.float32)
    return Dataset(images, labels, name)


def write_cifar10_bin(path, images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


def mnist_paths(data_dir, split):
    data_dir = Path(data_dir)
    for base in (data_dir / "mnist", data_dir):
        paths = [base / f for f in MNIST_FILES[split]]
        if all(p.exists() for p in paths):
            return paths
    return [data_dir / "mnist" / f for f in MNIST_FILES[split]]


def cifar_paths(data_dir, split):
    data_dir = Path(data_dir)
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    for base in (data_dir / "cifar-10-batches-bin", data_dir):
        if all((base / n).exists() for n in names):
            return [base / n for n in names]
    return [data_dir / "cifar-10-batches-bin" / n for n in names]


def dataset_files(dataset, data_dir):
    """All files a dataset reads, for existence checks and manifests."""
    if dataset == "mnist":
        return [*mnist_paths(data_dir, "train"), *mnist_paths(data_dir, "test")]
    if dataset == "cifar10":
        return [*cifar_paths(data_dir, "train"), *cifar_paths(data_dir, "test")]
    raise ContractError(f"unknown dataset {dataset!r}")


def load_dataset(dataset, data_dir, train_size=None, test_size=None):
    missing = [str(p) for p in dataset_files(dataset, data_dir) if not p.exists()]
    if missing:
        raise FileNotFoundError("missing dataset files: " + ", ".join(missing))
    if dataset == "mnist":
        train = load_mnist_idx(*mnist_paths(data_dir, "train"), name="mnist-train")
        test = load_mnist_idx(*mnist_paths(data_dir, "test"), name="mnist-test")
    else:
        # only read the batches a subset needs
        need = len(CIFAR_TRAIN_FILES) if train_size is None else -(-train_size // 10000)
        train = load_cifar10_bin(cifar_paths(data_dir, "train")[:need], name="cifar10-train")
        test = load_cifar10_bin(cifar_paths(data_dir, "test"), name="cifar10-test")
    if train_size is not None:
        train = train.subset(train_size)
    if test_size is not None:
        test = test.subset(test_size)
    return train, test


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# geometric transforms


def _rotation_terms(theta):
    quarter, rem = divmod(float(theta), 90.0)
    if rem == 0.0:
        # exact at multiples of 90 so axis-aligned rotations are permutations
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(quarter) % 4]
    rad = np.deg2rad(theta)
    return float(np.cos(rad)), float(np.sin(rad))


def rotate_images(images, angles):
    """Rotate each ``[C, H, W]`` image counter-clockwise by its angle (degrees).

    Rotation is about the image center with bilinear interpolation; samples
    falling outside the source read as zero.
    """
    images = np.asarray(images)
    B, C, H, W = images.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    terms = np.array([_rotation_terms(a) for a in angles]).reshape(B, 2, 1, 1)
    cos, sin = terms[:, 0], terms[:, 1]
    dr = (np.arange(H) - cy)[None, :, None]
    dc = (np.arange(W) - cx)[None, None, :]
    src_r = cos * dr + sin * dc + cy
    src_c = -sin * dr + cos * dc + cx
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = (src_r - r0).astype(images.dtype)
    fc = (src_c - c0).astype(images.dtype)

    padded = np.zeros((B, C, H + 2, W + 2), dtype=images.dtype)
    padded[:, :, 1:-1, 1:-1] = images
    bidx = np.arange(B)[:, None, None]

    def tap(r, c):
        inside = (r >= -1) & (r <= H) & (c >= -1) & (c <= W)
        v = padded[bidx, :, np.clip(r + 1, 0, H + 1), np.clip(c + 1, 0, W + 1)]  # (B, H, W, C)
        return np.where(inside[..., None], v, 0)

    out = ((1 - fr) * (1 - fc))[..., None] * tap(r0, c0) \
        + ((1 - fr) * fc)[..., None] * tap(r0, c0 + 1) \
        + (fr * (1 - fc))[..., None] * tap(r0 + 1, c0) \
        + (fr * fc)[..., None] * tap(r0 + 1, c0 + 1)
    out = out.transpose(0, 3, 1, 2).astype(images.dtype)
    unrotated = np.asarray(angles) == 0
    out[unrotated] = images[unrotated]
    return out


def rotate_image(img, theta):
    return rotate_images(np.asarray(img)[None], [theta])[0]


def translate_image(img, dx, dy):
    """Shift content right by ``dx`` and down by ``dy`` pixels, zero-filling."""
    img = np.asarray(img)
    H, W = img.shape[-2:]
    if abs(dx) >= W or abs(dy) >= H:
        raise ContractError(f"shift ({dx}, {dy}) must be smaller than the image {H}x{W}")
    out = np.zeros_like(img)
    out[..., max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)] = \
        img[..., max(-dy, 0):H - max(dy, 0), max(-dx, 0):W - max(dx, 0)]
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentPolicy:
    """Per-sample random transformation.

    ``rotation_range`` (degrees) and ``translate_range`` (pixels) are drawn
    uniformly in ``[-r, r]``.  ``train_jitter`` adds a further integer shift
    in training only.  ``pad_crop`` and ``hflip`` give the CIFAR recipe.
    With ``apply_at_test`` the rotation/translation part is also applied to
    the test set.
    """

    rotation_range: float = 0.0
    translate_range: int = 0
    train_jitter: int = 0
    pad_crop: int = 0
    hflip: bool = False
    apply_at_test: bool = False

    def __post_init__(self):
        for name in ("rotation_range", "translate_range", "train_jitter", "pad_crop"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")

    def is_identity(self, training=True):
        if not training and not self.apply_at_test:
            return True
        active = [self.rotation_range, self.translate_range]
        if training:
            active += [self.train_jitter, self.pad_crop, self.hflip]
        return not any(active)

    def to_dict(self):
        return asdict(self)


def augment_batch(images, policy, rng, training=True):
    """Apply ``policy`` independently to every image of a ``[B, C, H, W]`` batch.

    Random draws are taken sample by sample in index order: rotation angle,
    translation (x, y), jitter (x, y), crop offsets (x, y), flip.  Only the
    enabled transformations draw.
    """
    if policy.is_identity(training):
        return images
    B = len(images)
    angles = np.zeros(B)
    shifts = np.zeros((B, 2), dtype=np.int64)
    crops = np.zeros((B, 2), dtype=np.int64)
    flips = np.zeros(B, dtype=bool)
    for i in range(B):
        if policy.rotation_range:
            angles[i] = rng.uniform(-policy.rotation_range, policy.rotation_range)
        if policy.translate_range:
            shifts[i] += rng.integers(-policy.translate_range, policy.translate_range + 1, size=2)
        if training and policy.train_jitter:
            shifts[i] += rng.integers(-policy.train_jitter, policy.train_jitter + 1, size=2)
        if training and policy.pad_crop:
            crops[i] = rng.integers(0, 2 * policy.pad_crop + 1, size=2)
        if training and policy.hflip:
            flips[i] = rng.random() < 0.5

    out = rotate_images(images, angles) if policy.rotation_range else images.copy()
    H, W = out.shape[-2:]
    for i in range(B):
        dx, dy = (int(np.clip(s, -(W - 1), W - 1)) for s in shifts[i])
        if dx or dy:
            out[i] = translate_image(out[i], dx, dy)
    if training and policy.pad_crop:
        p = policy.pad_crop
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        for i in range(B):
            cx, cy = crops[i]
            out[i] = padded[i, :, cy:cy + H, cx:cx + W]
    if training and policy.hflip:
        out[flips] = out[flips, :, :, ::-1]
    return out


def transform_dataset(ds, policy, seed, batch=1000):
    """Fixed test-time transformation of a whole dataset (train-only parts off)."""
    if policy.is_identity(training=False):
        return ds
    rng = make_rng(seed)
    parts = [augment_batch(ds.images[i:i + batch], policy, rng, training=False)
             for i in range(0, len(ds), batch)]
    return Dataset(np.concatenate(parts), ds.labels, ds.name + "-transformed")
