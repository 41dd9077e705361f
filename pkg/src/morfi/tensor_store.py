"""Activation tensor container, its binary file format, and aggregation folds.

The tensor holds mean SAE activations with shape ``[T, P, F, N]``:
epoch checkpoints, mixture proportions, latents, evaluation samples.

On-disk layout (all little-endian)::

    offset  size  field
    0       8     magic  b"MORFIA4D"
    8       4     u32 format version
    12      4     u32 dtype code (1 = float32, 2 = float64)
    16      32    u64 T, P, F, N
    48      16    reserved, must be zero
    64      8*T   epoch axis, f64
            8*P   mixture axis, f64
            ...   N sample ids, each u32 byte length + UTF-8 bytes
            ...   row-major payload, T*P*F*N values of the stated dtype
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

MAGIC = b"MORFIA4D"
FORMAT_VERSION = 1
HEADER_SIZE = 64

_HEADER = struct.Struct("<8sII4Q16s")
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 1, np.dtype("float64"): 2}

AXES = ("epochs", "mixtures", "latents", "samples")


class TensorFormatError(ValidationError):
    """The file is not a valid activation tensor container."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class AxisShapeMismatchError(TensorFormatError):
    pass


def _strictly_increasing(x: np.ndarray) -> bool:
    return bool(np.all(np.diff(x) > 0))


@dataclass(frozen=True, eq=False)
class ActivationTensor:
    """Immutable ``[T, P, F, N]`` activation tensor plus axis labels."""

    data: np.ndarray
    epoch_axis: np.ndarray
    mixture_axis: np.ndarray
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.dtype not in _CODE_FOR_DTYPE:
            raise ValidationError(f"activation dtype must be float32 or float64, got {data.dtype}")
        if data.ndim != 4:
            raise ValidationError(f"activation tensor must be 4D [T, P, F, N], got shape {data.shape}")
        epochs = np.array(self.epoch_axis, dtype=np.float64).ravel()
        mixtures = np.array(self.mixture_axis, dtype=np.float64).ravel()
        ids = tuple(str(s) for s in self.sample_ids)
        T, P, F, N = data.shape
        if len(epochs) != T or len(mixtures) != P or len(ids) != N:
            raise AxisShapeMismatchError(
                f"axis lengths (epochs={len(epochs)}, mixtures={len(mixtures)}, samples={len(ids)}) "
                f"do not match data shape {data.shape}"
            )
        for name, axis in (("epoch", epochs), ("mixture", mixtures)):
            if not np.all(np.isfinite(axis)):
                raise AxisShapeMismatchError(f"{name} axis contains non-finite labels")
            if not _strictly_increasing(axis):
                raise AxisShapeMismatchError(f"{name} axis must be strictly increasing: {axis.tolist()}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("activation tensor contains NaN or Inf")
        for arr in (data, epochs, mixtures):
            arr.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "epoch_axis", epochs)
        object.__setattr__(self, "mixture_axis", mixtures)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n_latents(self) -> int:
        return self.data.shape[2]

    def axis_labels(self, axis: str) -> np.ndarray:
        if axis == "epochs":
            return self.epoch_axis
        if axis == "mixtures":
            return self.mixture_axis
        raise ValidationError(f"unknown labelled axis {axis!r}; expected 'epochs' or 'mixtures'")

    def with_data(self, data: np.ndarray) -> "ActivationTensor":
        return ActivationTensor(data, self.epoch_axis, self.mixture_axis, self.sample_ids)

    def equals(self, other: "ActivationTensor") -> bool:
        """Bit-level equality of payload, dtype and axis metadata."""
        return (
            self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and self.epoch_axis.tobytes() == other.epoch_axis.tobytes()
            and self.mixture_axis.tobytes() == other.mixture_axis.tobytes()
            and self.sample_ids == other.sample_ids
        )


@dataclass(frozen=True, eq=False)
class TokenActivationBatch:
    """Per-token SAE activations ``[N, S, F]`` with a validity mask ``[N, S, 1]``."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 3:
            raise ValidationError(f"values must be [N, S, F], got shape {values.shape}")
        if mask.ndim == 2:
            mask = mask[:, :, None]
        if mask.shape != values.shape[:2] + (1,):
            raise ValidationError(f"mask shape {mask.shape} is not broadcastable as [N, S, 1] over {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)


def bos_mask(bos_positions: Sequence[int], lengths: Sequence[int], seq_len: int) -> np.ndarray:
    """Boolean ``[N, S, 1]`` mask keeping tokens strictly after each sample's BOS.

    ``lengths`` counts the BOS token, so sample ``n`` keeps positions
    ``bos_positions[n] < k < bos_positions[n] + lengths[n]``.
    """
    b = np.asarray(bos_positions)[:, None]
    c = np.asarray(lengths)[:, None]
    k = np.arange(seq_len)[None, :]
    return ((k > b) & (k < b + c))[:, :, None]


def masked_mean_fold(batch: TokenActivationBatch) -> np.ndarray:
    """Mean activation per sample over the valid tokens; returns ``[N, F]``."""
    counts = batch.mask.sum(axis=1)  # [N, 1]
    empty = np.flatnonzero(counts[:, 0] == 0)
    if empty.size:
        raise ValidationError(f"sample {int(empty[0])} has no valid (non-BOS) tokens in its mask")
    totals = np.where(batch.mask, batch.values, 0).sum(axis=1)
    return totals / counts


def mean_fold(a: np.ndarray, dim: int) -> np.ndarray:
    """Arithmetic mean along ``dim``; remaining axes keep their order."""
    a = np.asarray(a)
    if not 0 <= dim < a.ndim:
        raise ValidationError(f"axis {dim} out of range for array of rank {a.ndim}")
    return a.mean(axis=dim)


def _encode(t: ActivationTensor) -> bytes:
    T, P, F, N = t.shape
    code = _CODE_FOR_DTYPE[t.data.dtype]
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, code, T, P, F, N, b"\0" * 16),
        t.epoch_axis.astype("<f8").tobytes(),
        t.mixture_axis.astype("<f8").tobytes(),
    ]
    for sid in t.sample_ids:
        raw = sid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(t.data, dtype=_DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def write_tensor(t: ActivationTensor, path) -> None:
    """Serialize ``t``; identical tensors always produce identical bytes."""
    Path(path).write_bytes(_encode(t))


def _decode(buf: bytes) -> ActivationTensor:
    head = buf[:8]
    if head != MAGIC[: len(head)]:
        raise BadMagicError(f"bad magic bytes {buf[:8]!r}; expected {MAGIC!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedPayloadError(f"file holds {len(buf)} bytes, shorter than the {HEADER_SIZE}-byte header")
    _, version, code, T, P, F, N, reserved = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if reserved != b"\0" * 16:
        raise TensorFormatError("reserved header bytes are not zero")

    pos = HEADER_SIZE

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise TruncatedPayloadError(f"truncated while reading {what}: need {nbytes} bytes at offset {pos}, file ends at {len(buf)}")
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    epochs = np.frombuffer(take(8 * T, "epoch axis"), dtype="<f8")
    mixtures = np.frombuffer(take(8 * P, "mixture axis"), dtype="<f8")
    ids = []
    for i in range(N):
        (n_bytes,) = struct.unpack("<I", take(4, f"length of sample id {i}"))
        try:
            ids.append(take(n_bytes, f"sample id {i}").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise TensorFormatError(f"sample id {i} is not valid UTF-8") from exc
    dtype = _DTYPE_CODES[code]
    payload = take(T * P * F * N * dtype.itemsize, "payload")
    if pos != len(buf):
        raise AxisShapeMismatchError(
            f"payload holds {len(buf) - pos} bytes beyond the declared shape ({T}, {P}, {F}, {N})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(T, P, F, N).astype(dtype.newbyteorder("="))
    try:
        return ActivationTensor(data, epochs, mixtures, ids)
    except AxisShapeMismatchError:
        raise
    except ValidationError as exc:
        raise TensorFormatError(f"invalid tensor contents: {exc}") from exc


def load_tensor(path) -> ActivationTensor:
    """Read a container written by :func:`write_tensor`."""
    return _decode(Path(path).read_bytes())


_CELL_RE = re.compile(r"^e(?P<epoch>[-+0-9.eE]+)_p(?P<mixture>[-+0-9.eE]+)\.bin$")


def import_checkpoint_dir(directory, n_latents: int, sample_ids: Sequence[str] | None = None) -> ActivationTensor:
    """Assemble a tensor from per-cell ``e{epoch}_p{mixture}.bin`` matrices.

    Each file is a raw little-endian float32 ``[N, F]`` matrix. Sample ids
    come from ``sample_ids``, else from ``sample_ids.txt`` in the directory
    (one per line), else default to ``0..N-1``. The grid must be complete.
    """
    directory = Path(directory)
    cells = {}
    for f in sorted(directory.iterdir()):
        m = _CELL_RE.match(f.name)
        if m:
            cells[(float(m["epoch"]), float(m["mixture"]))] = f
    if not cells:
        raise ValidationError(f"no e{{epoch}}_p{{mixture}}.bin files found in {directory}")
    epochs = sorted({e for e, _ in cells})
    mixtures = sorted({p for _, p in cells})
    missing = [(e, p) for e in epochs for p in mixtures if (e, p) not in cells]
    if missing:
        raise ValidationError(f"incomplete checkpoint grid; missing cells {missing[:5]}")

    blocks = []
    n_samples = None
    for e in epochs:
        row = []
        for p in mixtures:
            raw = np.fromfile(cells[(e, p)], dtype="<f4")
            if raw.size % n_latents:
                raise AxisShapeMismatchError(f"{cells[(e, p)].name}: {raw.size} values is not a multiple of F={n_latents}")
            mat = raw.reshape(-1, n_latents)
            if n_samples is None:
                n_samples = mat.shape[0]
            elif mat.shape[0] != n_samples:
                raise AxisShapeMismatchError(f"{cells[(e, p)].name}: {mat.shape[0]} samples, expected {n_samples}")
            row.append(mat.T)
        blocks.append(row)
    data = np.asarray(blocks, dtype=np.float32)

    if sample_ids is None:
        id_file = directory / "sample_ids.txt"
        if id_file.exists():
            sample_ids = id_file.read_text(encoding="utf-8").splitlines()
        else:
            sample_ids = [str(i) for i in range(n_samples)]
    return ActivationTensor(data, epochs, mixtures, sample_ids)
