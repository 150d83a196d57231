"""Binary sequence-dataset container, contiguous splits and dataset statistics.

File layout (little-endian)::

    magic      8s   b"OCTFORCE"
    version    u16
    t_s        u32
    d_c        u32
    n_samples  u64
    stride     u32
    seed       i64
    preset     u16 length + utf-8
    units      u16 length + utf-8
    crc32      u32  of every header byte above
    payload    n_samples x ([label f64][window f32 x t_s*d_c, time-major])
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .streams import SequenceSet

MAGIC = b"OCTFORCE"
VERSION = 1
_FIXED = struct.Struct("<8sHIIQIq")


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class CorruptHeaderError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetHeader:
    t_s: int
    d_c: int
    n_samples: int
    preset_name: str = ""
    seed: int = 0
    stride: int = 1
    label_units: str = "mN"
    version: int = VERSION
    magic: bytes = MAGIC


def _record_dtype(t_s, d_c):
    return np.dtype([("label", "<f8"), ("window", "<f4", (t_s, d_c))])


def _pack_text(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _encode_header(h: DatasetHeader) -> bytes:
    body = _FIXED.pack(h.magic, h.version, h.t_s, h.d_c, h.n_samples, h.stride, h.seed)
    body += _pack_text(h.preset_name) + _pack_text(h.label_units)
    return body + struct.pack("<I", zlib.crc32(body))


def save(samples: SequenceSet, header: DatasetHeader, path) -> DatasetHeader:
    """Write ``samples``; the header's shape fields are filled in from the data."""
    header = DatasetHeader(
        t_s=samples.t_s,
        d_c=samples.d_c,
        n_samples=len(samples),
        preset_name=header.preset_name,
        seed=header.seed,
        stride=header.stride,
        label_units=header.label_units,
    )
    rec = np.empty(len(samples), dtype=_record_dtype(header.t_s, header.d_c))
    rec["label"] = samples.labels
    rec["window"] = samples.windows
    with open(path, "wb") as fh:
        fh.write(_encode_header(header))
        fh.write(rec.tobytes())
    return header


def read_header(data: bytes, path="<bytes>") -> tuple[DatasetHeader, int]:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not an OCTFORCE dataset")
    if len(data) < _FIXED.size:
        raise TruncatedError(f"{path}: header truncated")
    magic, version, t_s, d_c, n, stride, seed = _FIXED.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: dataset version {version}, this reader supports {VERSION}")
    pos = _FIXED.size
    texts = []
    for _ in range(2):
        if pos + 2 > len(data):
            raise TruncatedError(f"{path}: header truncated")
        (k,) = struct.unpack_from("<H", data, pos)
        if pos + 2 + k > len(data):
            raise TruncatedError(f"{path}: header truncated")
        texts.append(data[pos + 2 : pos + 2 + k].decode("utf-8", errors="replace"))
        pos += 2 + k
    if pos + 4 > len(data):
        raise TruncatedError(f"{path}: header truncated")
    (crc,) = struct.unpack_from("<I", data, pos)
    if crc != zlib.crc32(data[:pos]):
        raise CorruptHeaderError(f"{path}: header checksum mismatch")
    header = DatasetHeader(t_s, d_c, n, texts[0], seed, stride, texts[1], version, magic)
    return header, pos + 4


def load(path) -> tuple[DatasetHeader, SequenceSet]:
    data = Path(path).read_bytes()
    header, offset = read_header(data, path)
    dtype = _record_dtype(header.t_s, header.d_c)
    expected = header.n_samples * dtype.itemsize
    payload = len(data) - offset
    if payload < expected:
        raise TruncatedError(f"{path}: payload has {payload} bytes, header promises {expected}")
    if payload > expected:
        raise CorruptHeaderError(f"{path}: {payload - expected} trailing bytes after the payload")
    rec = np.frombuffer(data, dtype=dtype, count=header.n_samples, offset=offset)
    samples = SequenceSet(
        rec["window"].astype(np.float32),
        rec["label"].astype(np.float64),
        np.arange(header.n_samples, dtype=np.int64) * header.stride,
    )
    return header, samples


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.64
    val_frac: float = 0.16
    test_frac: float = 0.20
    scheme: str = "contiguous"

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")
        if self.scheme != "contiguous":
            raise ValueError(f"unsupported split scheme {self.scheme!r}")


def split(samples: SequenceSet, spec: SplitSpec = SplitSpec(), seed: int = 0):
    """Cut the time-ordered samples into train/val/test blocks.

    Windows at the head of a block that share source scans with the previous
    block are dropped, so no A-scan is in two splits. Block order is fixed;
    ``seed`` is accepted for interface symmetry and does not change the result.
    """
    n = len(samples)
    n_train = int(round(n * spec.train_frac))
    n_val = int(round(n * spec.val_frac))
    bounds = [0, n_train, n_train + n_val, n]
    t_s = samples.t_s
    parts, last_end = [], -1
    for name, lo, hi in zip(("train", "val", "test"), bounds[:-1], bounds[1:]):
        idx = np.arange(lo, hi)
        idx = idx[samples.starts[idx] > last_end]
        if len(idx) == 0:
            raise ValueError(f"{name} split is empty ({n} samples, fractions {spec})")
        last_end = samples.starts[idx[-1]] + t_s - 1
        parts.append(samples.take(idx))
    return tuple(parts)


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class Stats:
    pixel_mean: np.ndarray  # [d_c]
    pixel_std: np.ndarray  # [d_c]
    label_min: float
    label_max: float
    label_mean: float
    count: int  # scans pooled per pixel


def stats(samples: SequenceSet, chunk: int = 512) -> Stats:
    """Per-pixel mean/std over every scan row of every window, plus label range and mean.

    Single pass over the data; chunk moments are merged with Chan's update.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("stats of an empty dataset")
    d_c = samples.d_c
    count, mean, m2 = 0, np.zeros(d_c), np.zeros(d_c)
    lab_min, lab_max, lab_sum = np.inf, -np.inf, 0.0
    for lo in range(0, n, chunk):
        part = samples.take(slice(lo, lo + chunk))
        rows = part.windows.reshape(-1, d_c).astype(np.float64)
        k = rows.shape[0]
        c_mean = rows.mean(axis=0)
        c_m2 = ((rows - c_mean) ** 2).sum(axis=0)
        delta = c_mean - mean
        total = count + k
        mean = mean + delta * (k / total)
        m2 = m2 + c_m2 + delta**2 * (count * k / total)
        count = total
        lab = part.labels
        lab_min = min(lab_min, float(lab.min()))
        lab_max = max(lab_max, float(lab.max()))
        lab_sum += float(lab.sum())
    return Stats(mean, np.sqrt(m2 / count), lab_min, lab_max, lab_sum / n, count)
