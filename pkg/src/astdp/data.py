"""Dataset ingestion, toy generators, image masking, and checkpoints."""

import gzip
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .net import HyperParams, NetworkParams
from .plasticity import DualState

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"ASTDPCK1"
CHECKPOINT_VERSION = 1

# Serialized hyperparameter slots, in file order.
_HYPER_FIELDS = (
    "eps_s", "eps_l", "theta_s", "theta_l", "alpha", "k", "m_avg", "t_c",
    "iters", "free_iters", "inertia", "batch", "smoothing_rate",
    "k_as_multiplier",
)


class IdxError(ValueError):
    """Malformed IDX container."""


class IdxMagicError(IdxError):
    pass


class IdxLengthError(IdxError):
    pass


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


@dataclass
class Dataset:
    """Images scaled to [0, 1] with optional integer labels."""

    name: str
    images: np.ndarray            # (count, dim) float64 in [0, 1]
    labels: Optional[np.ndarray]  # (count,) int64, or None

    @property
    def count(self) -> int:
        return self.images.shape[0]

    def validate(self) -> None:
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None and len(self.labels) != self.count:
            raise ValueError("label count does not match image count")

    def subset(self, indices) -> "Dataset":
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.name, self.images[indices], labels)


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count, path):
    buf = f.read(count)
    if len(buf) != count:
        raise IdxLengthError(f"{path}: expected {count} more bytes, got {len(buf)}")
    return buf


def read_idx(path, expect_magic: int) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes.

    The magic encodes dtype and rank; only the ubyte forms used by the
    digit files are accepted, and the caller pins which one.
    """
    with _open_maybe_gzip(path) as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, path))
        if magic != expect_magic:
            raise IdxMagicError(
                f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, path))
        total = int(np.prod(dims))
        payload = _read_exact(f, total, path)
        if f.read(1) != b"":
            raise IdxLengthError(f"{path}: trailing bytes after {total}-byte payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None, name: str = "idx") -> Dataset:
    """Load an image IDX file (and optionally its label file) as a Dataset.

    Pixels are scaled by 1/255; images are flattened to (count, rows*cols).
    """
    raw = read_idx(images_path, IMAGE_MAGIC)
    count = raw.shape[0]
    images = raw.reshape(count, -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        lab = read_idx(labels_path, LABEL_MAGIC)
        if lab.shape[0] != count:
            raise IdxLengthError(
                f"{labels_path}: {lab.shape[0]} labels for {count} images"
            )
        if lab.max(initial=0) > 9:
            raise IdxError(f"{labels_path}: label {lab.max()} out of range 0..9")
        labels = lab.astype(np.int64)
    ds = Dataset(name=name, images=images, labels=labels)
    ds.validate()
    return ds


def write_idx_images(path, images_u8: np.ndarray) -> None:
    """Write a (count, rows, cols) ubyte array in IDX image format."""
    count, rows, cols = images_u8.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols))
        f.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels_u8: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels_u8)))
        f.write(np.ascontiguousarray(labels_u8, dtype=np.uint8).tobytes())


def make_onehot_toy(n: int) -> Dataset:
    """n items where item i is the n-dimensional one-hot basis vector e_i.

    Each item doubles as its own label, so the same dataset serves both
    unsupervised runs and input->output association tasks.
    """
    if n < 2:
        raise ValueError("one-hot toy dataset needs n >= 2")
    return Dataset(name=f"onehot{n}", images=np.eye(n), labels=np.arange(n))


def order_walk(n: int, stride: int, length: int, rng) -> np.ndarray:
    """Random walk over 0..n-1 stepping +stride or -stride (mod n).

    Starts at 0; each of the `length` entries after the first moves by a
    fair-coin choice of direction.
    """
    rng = np.random.default_rng(rng)
    steps = rng.integers(0, 2, size=max(length - 1, 0)) * 2 - 1
    seq = np.empty(length, dtype=np.int64)
    if length == 0:
        return seq
    seq[0] = 0
    pos = 0
    for i, sign in enumerate(steps, start=1):
        pos = (pos + int(sign) * stride) % n
        seq[i] = pos
    return seq


def apply_mask(image, side: int, gray: float, rng, rows: int = 28, cols: int = 28):
    """Cover a random side x side square with a flat gray value.

    Returns (masked_image, covered_indices) where indices address the
    flattened image.  side = 0 is a no-op with an empty cover set.
    """
    image = np.asarray(image, dtype=np.float64).reshape(rows, cols)
    if side > min(rows, cols):
        raise ValueError(f"mask side {side} exceeds image size {rows}x{cols}")
    masked = image.copy()
    if side == 0:
        return masked.ravel(), np.empty(0, dtype=np.intp)
    rng = np.random.default_rng(rng)
    r0 = int(rng.integers(0, rows - side + 1))
    c0 = int(rng.integers(0, cols - side + 1))
    masked[r0 : r0 + side, c0 : c0 + side] = gray
    rr, cc = np.meshgrid(np.arange(r0, r0 + side), np.arange(c0, c0 + side), indexing="ij")
    covered = (rr * cols + cc).ravel().astype(np.intp)
    return masked.ravel(), covered


@dataclass
class Checkpoint:
    """Persistent snapshot of one run; round-trips bit-exactly."""

    layer_sizes: tuple
    params: NetworkParams
    hyper: HyperParams
    update_count: int
    dual: Optional[DualState] = None
    rng_state: Optional[dict] = None
    version: int = CHECKPOINT_VERSION


def _pack_u64(*values) -> bytes:
    return struct.pack(f"<{len(values)}Q", *values)


def _pack_f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype=np.float64).tobytes()


def _rng_state_words(state: dict):
    inner = state["state"]
    return (
        inner["state"] & (2**64 - 1),
        (inner["state"] >> 64) & (2**64 - 1),
        inner["inc"] & (2**64 - 1),
        (inner["inc"] >> 64) & (2**64 - 1),
        int(state["has_uint32"]),
        int(state["uinteger"]),
    )


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Fixed binary layout: magic, version, shapes, then raw float64 data.

    All integers are little-endian 64-bit; arrays are row-major float64.
    Only PCG64 generator state can be embedded.
    """
    n = ck.params.W.shape[0]
    chunks = [CHECKPOINT_MAGIC, _pack_u64(ck.version)]
    chunks.append(_pack_u64(len(ck.layer_sizes), *ck.layer_sizes))
    chunks.append(_pack_u64(n, ck.update_count))
    hyper_vals = [float(getattr(ck.hyper, f)) for f in _HYPER_FIELDS]
    chunks.append(_pack_u64(len(hyper_vals)))
    chunks.append(_pack_f64(hyper_vals))
    chunks.append(_pack_f64(ck.params.W))
    chunks.append(_pack_f64(ck.params.b))
    if ck.dual is not None:
        chunks.append(_pack_u64(1, ck.dual.s_s.shape[0]))
        for arr in (ck.dual.s_s, ck.dual.s_l, ck.dual.v_s, ck.dual.v_l, ck.dual.dz_m):
            chunks.append(_pack_f64(arr))
    else:
        chunks.append(_pack_u64(0))
    if ck.rng_state is not None:
        if ck.rng_state.get("bit_generator") != "PCG64":
            raise ValueError("only PCG64 generator state can be checkpointed")
        chunks.append(_pack_u64(1, *_rng_state_words(ck.rng_state)))
    else:
        chunks.append(_pack_u64(0))
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, path):
        with open(path, "rb") as f:
            self.buf = f.read()
        self.pos = 0
        self.path = path

    def take(self, count) -> bytes:
        if self.pos + count > len(self.buf):
            raise CheckpointLengthError(
                f"{self.path}: truncated at byte {self.pos}, wanted {count} more"
            )
        out = self.buf[self.pos : self.pos + count]
        self.pos += count
        return out

    def u64(self, count=1):
        vals = struct.unpack(f"<{count}Q", self.take(8 * count))
        return vals[0] if count == 1 else vals

    def f64(self, shape) -> np.ndarray:
        total = int(np.prod(shape))
        arr = np.frombuffer(self.take(8 * total), dtype="<f8").reshape(shape)
        return arr.copy()

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise CheckpointLengthError(
                f"{self.path}: {len(self.buf) - self.pos} trailing bytes"
            )


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(path)
    magic = r.take(8)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u64()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    n_layers = r.u64()
    layer_sizes = tuple(int(v) for v in np.atleast_1d(r.u64(n_layers)))
    n, update_count = r.u64(2)
    n_hyper = r.u64()
    if n_hyper != len(_HYPER_FIELDS):
        raise CheckpointLengthError(
            f"{path}: {n_hyper} hyperparameter slots, expected {len(_HYPER_FIELDS)}"
        )
    hyper_vals = r.f64((n_hyper,))
    hyper = HyperParams(**{
        f: (type(getattr(HyperParams(), f)))(v)
        for f, v in zip(_HYPER_FIELDS, hyper_vals)
    })
    params = NetworkParams(W=r.f64((n, n)), b=r.f64((n,)))
    dual = None
    if r.u64() == 1:
        batch = r.u64()
        s_s = r.f64((batch, n))
        s_l = r.f64((batch, n))
        v_s = r.f64((batch, n))
        v_l = r.f64((batch, n))
        dz_m = r.f64((n,))
        dual = DualState(s_s, s_l, v_s, v_l, dz_m)
    rng_state = None
    if r.u64() == 1:
        lo, hi, inc_lo, inc_hi, has_u32, uinteger = r.u64(6)
        rng_state = {
            "bit_generator": "PCG64",
            "state": {"state": (hi << 64) | lo, "inc": (inc_hi << 64) | inc_lo},
            "has_uint32": int(has_u32),
            "uinteger": int(uinteger),
        }
    r.done()
    return Checkpoint(
        layer_sizes=layer_sizes,
        params=params,
        hyper=hyper,
        update_count=int(update_count),
        dual=dual,
        rng_state=rng_state,
        version=int(version),
    )
