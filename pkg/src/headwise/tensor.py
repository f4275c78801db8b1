"""Dense numeric core: matmul, row softmax and the reference attention.

Tensors are plain ``numpy.ndarray`` objects (float32 or float64, C order).
Everything sparse in this package is checked against
:func:`attention_reference`.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from os import PathLike
from typing import BinaryIO, Union

import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf."""


class ShapeError(ValueError):
    pass


class FullyMaskedRowError(ValueError):
    """A query row has no unmasked key to attend to."""


@dataclass(frozen=True)
class AttentionDims:
    n_heads: int
    head_dim: int
    n_visual: int
    n_text: int
    text_first: bool = False

    def __post_init__(self):
        for name in ("n_heads", "head_dim", "n_visual"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        # n_text == 0 is allowed for pure block-diagonal masks
        if self.n_text < 0:
            raise ValueError(f"n_text must be >= 0, got {self.n_text}")

    @property
    def seq_len(self) -> int:
        return self.n_visual + self.n_text

    def is_text(self) -> np.ndarray:
        """Boolean per-token flag, True for text tokens."""
        flags = np.zeros(self.seq_len, dtype=bool)
        if self.text_first:
            flags[: self.n_text] = True
        else:
            flags[self.n_visual :] = True
        return flags


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.dtype not in SUPPORTED_DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with a fixed left-to-right k summation order.

    Each output element is accumulated as ``((a0*b0 + a1*b1) + a2*b2) + ...``
    with separately rounded multiplies and adds, so the result is
    bit-reproducible and matches a naive triple loop exactly.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=dtype)
    if k == 0:
        return out
    tmp = np.empty((m, n), dtype=dtype)
    # overflow is reported by check_finite below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for p in range(k):
            np.multiply(a[:, p : p + 1], b[p : p + 1, :], out=tmp)
            out += tmp
    return check_finite(out, "matmul result")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Entries equal to ``-inf`` are allowed (they act as masked positions) as
    long as each row keeps at least one finite entry.
    """
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {x.shape}")
    if np.any(np.isnan(x)) or np.any(x == np.inf):
        raise NonFiniteError("softmax input contains NaN or +Inf")
    row_max = x.max(axis=1, keepdims=True)
    if np.any(row_max == -np.inf):
        raise FullyMaskedRowError("softmax row has no finite entry")
    e = np.exp(x - row_max)
    return e / e.sum(axis=1, keepdims=True)


def token_mask(mask, seq_len: int) -> np.ndarray:
    """Expand a block mask to an ``[N x N]`` boolean token grid."""
    b = mask.block_size
    grid = np.repeat(np.repeat(mask.active, b, axis=0), b, axis=1)
    return grid[:seq_len, :seq_len]


def _attention_head(q, k, v, allowed=None) -> np.ndarray:
    scale = 1.0 / math.sqrt(q.shape[1])
    scores = matmul(q, np.ascontiguousarray(k.T)) * q.dtype.type(scale)
    if allowed is not None:
        if not np.all(allowed.any(axis=1)):
            raise FullyMaskedRowError("a query row has every key masked out")
        scores = np.where(allowed, scores, q.dtype.type(-np.inf))
    probs = softmax_rows(scores)
    return matmul(probs, v)


def attention_reference(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask=None
) -> np.ndarray:
    """Dense scaled-dot-product attention over ``[H x N x d]`` inputs.

    ``mask`` is an optional BlockMask shared by all heads, or a sequence
    with one BlockMask (or None) per head.
    """
    if q.ndim != 3 or q.shape != k.shape or q.shape[:2] != v.shape[:2]:
        raise ShapeError(f"inconsistent q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    n_heads, seq_len, _ = q.shape
    if mask is None or not isinstance(mask, (list, tuple)):
        masks = [mask] * n_heads
    else:
        masks = list(mask)
        if len(masks) != n_heads:
            raise ShapeError(f"{len(masks)} masks for {n_heads} heads")
    out = np.empty(v.shape, dtype=np.result_type(q, k, v))
    for h in range(n_heads):
        allowed = None if masks[h] is None else token_mask(masks[h], seq_len)
        out[h] = _attention_head(q[h], k[h], v[h], allowed)
    return out


# -- DFA2 binary dumps -------------------------------------------------------

MAGIC = b"DFA2"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


def dump_tensor(arr: np.ndarray, fp: BinaryIO) -> None:
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    code = _DTYPE_CODES.get(le.dtype)
    if code is None:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    fp.write(MAGIC)
    fp.write(struct.pack("<III", VERSION, code, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(np.ascontiguousarray(le).tobytes(order="C"))


def load_tensor(fp: BinaryIO) -> np.ndarray:
    if fp.read(4) != MAGIC:
        raise FormatError("bad magic, not a DFA2 file")
    version, code, ndim = struct.unpack("<III", _read_exact(fp, 12))
    if version != VERSION:
        raise FormatError(f"unsupported DFA2 version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fp, 8 * ndim))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fp, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise FormatError("truncated DFA2 stream")
    return data


def save_dfa2(path: Union[str, PathLike], arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        dump_tensor(arr, fp)


def load_dfa2(path: Union[str, PathLike]) -> np.ndarray:
    with open(path, "rb") as fp:
        return load_tensor(fp)


def dfa2_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    dump_tensor(arr, buf)
    return buf.getvalue()


def relative_error(x: np.ndarray, ref: np.ndarray) -> float:
    """``max|x - ref| / max|ref|``, computed in float64."""
    ref64 = np.asarray(ref, dtype=np.float64)
    scale = float(np.max(np.abs(ref64)))
    diff = float(np.max(np.abs(np.asarray(x, dtype=np.float64) - ref64)))
    return diff / scale if scale > 0 else diff
