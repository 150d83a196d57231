"""Stream alignment, cropping and windowing into labelled sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import ForceStream, OctStream, OpticalParams


TIE_ULPS = 8


class StreamError(ValueError):
    pass


@dataclass
class AScan:
    t: float
    depth: np.ndarray


@dataclass
class ForceSample:
    t: float
    f: float


@dataclass
class LabeledScan:
    scan: np.ndarray
    f: float
    t: float


@dataclass
class LabeledScans:
    """Struct-of-arrays list of labelled scans, in A-scan order."""

    t: np.ndarray  # [n]
    scans: np.ndarray  # [n, depth]
    f: np.ndarray  # [n] mN
    force_index: np.ndarray  # [n] index of the matched force sample

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> LabeledScan:
        return LabeledScan(self.scans[i], float(self.f[i]), float(self.t[i]))


@dataclass
class SequenceSample:
    window: np.ndarray  # [t_s, d_c], oldest scan first
    label: float


@dataclass
class SequenceSet:
    """Array-backed list of SequenceSample.

    ``starts[i]`` is the index of the first source scan of window ``i``;
    ``t_end[i]`` the timestamp of its last scan.
    """

    windows: np.ndarray  # [n, t_s, d_c]
    labels: np.ndarray  # [n]
    starts: np.ndarray  # [n] int64
    t_end: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> SequenceSample:
        return SequenceSample(self.windows[i], float(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def t_s(self) -> int:
        return self.windows.shape[1]

    @property
    def d_c(self) -> int:
        return self.windows.shape[2]

    def take(self, idx) -> "SequenceSet":
        return SequenceSet(
            self.windows[idx],
            self.labels[idx],
            self.starts[idx],
            None if self.t_end is None else self.t_end[idx],
        )


def _check_times(t, what):
    if len(t) == 0:
        raise StreamError(f"{what} stream is empty")
    if not np.all(np.isfinite(t)):
        raise StreamError(f"{what} stream has non-finite timestamps")
    if np.any(np.diff(t) < 0):
        raise StreamError(f"{what} timestamps are not sorted")


def nearest_indices(t_query: np.ndarray, t_ref: np.ndarray) -> np.ndarray:
    """Index into sorted ``t_ref`` nearest to each query time; ties go to the earlier sample.

    Distances within TIE_ULPS units in the last place count as ties, so decimal
    timestamps such as 0.098 / 0.100 / 0.102 behave as written.
    """
    t_query = np.asarray(t_query, dtype=np.float64)
    right = np.searchsorted(t_ref, t_query, side="left")
    right = np.clip(right, 0, len(t_ref) - 1)
    left = np.clip(right - 1, 0, len(t_ref) - 1)
    tol = TIE_ULPS * np.spacing(np.maximum(np.abs(t_query), np.abs(t_ref[right])))
    pick_left = np.abs(t_query - t_ref[left]) <= np.abs(t_ref[right] - t_query) + tol
    return np.where(pick_left, left, right)


def match_streams(oct: OctStream, force: ForceStream) -> LabeledScans:
    """Label every A-scan with the force sample nearest in time."""
    _check_times(oct.t, "OCT")
    _check_times(force.t, "force")
    idx = nearest_indices(oct.t, force.t)
    return LabeledScans(oct.t, oct.scans, force.f[idx], idx)


def crop_scan(scan, d_c: int, optics: OpticalParams | None = None):
    """Keep the first ``d_c`` depth pixels (works on AScan, a vector, or rows of scans).

    With ``optics`` given, also require both surface peaks at zero force to lie inside the crop.
    """
    depth = scan.depth if isinstance(scan, AScan) else np.asarray(scan)
    n = depth.shape[-1]
    if d_c > n:
        raise StreamError(f"crop size d_c={d_c} exceeds scan length {n}")
    if d_c < 1:
        raise StreamError(f"crop size must be >= 1, got {d_c}")
    if optics is not None and d_c <= optics.tip_base_idx:
        raise StreamError(
            f"crop size d_c={d_c} cuts off the tip surface at pixel {optics.tip_base_idx}"
        )
    out = depth[..., :d_c]
    return AScan(scan.t, out) if isinstance(scan, AScan) else out


def crop_labeled(scans: LabeledScans, d_c: int, optics: OpticalParams | None = None) -> LabeledScans:
    return LabeledScans(scans.t, crop_scan(scans.scans, d_c, optics), scans.f, scans.force_index)


def make_windows(scans: LabeledScans, t_s: int, stride: int = 1) -> SequenceSet:
    """Sliding windows of ``t_s`` consecutive scans, labelled with the force of the last one."""
    if t_s < 1 or stride < 1:
        raise StreamError(f"need t_s >= 1 and stride >= 1, got t_s={t_s}, stride={stride}")
    n = len(scans)
    d_c = scans.scans.shape[1]
    if n < t_s:
        return SequenceSet(
            np.empty((0, t_s, d_c), np.float32), np.empty(0), np.empty(0, np.int64), np.empty(0)
        )
    starts = np.arange(0, n - t_s + 1, stride, dtype=np.int64)
    view = np.lib.stride_tricks.sliding_window_view(scans.scans, t_s, axis=0)  # [n-t_s+1, d_c, t_s]
    windows = np.ascontiguousarray(view[starts].transpose(0, 2, 1), dtype=np.float32)
    last = starts + t_s - 1
    return SequenceSet(windows, np.asarray(scans.f[last], dtype=np.float64), starts, scans.t[last])


def build_sequences(oct: OctStream, force: ForceStream, t_s=50, d_c=70, stride=1, optics=None) -> SequenceSet:
    """match -> crop -> window."""
    labeled = match_streams(oct, force)
    return make_windows(crop_labeled(labeled, d_c, optics), t_s, stride)


# ---------------------------------------------------------------------------
# normalisation


def _safe_std(stats):
    std = np.asarray(stats.pixel_std, dtype=np.float64)
    return std > 0, np.where(std > 0, std, 1.0)


def normalize(samples: SequenceSet, stats, scale_labels=True, dtype=np.float32) -> SequenceSet:
    """Per-pixel standardisation with training statistics; pixels of zero spread pass through."""
    ok, std = _safe_std(stats)
    mean = np.where(ok, stats.pixel_mean, 0.0)
    windows = ((samples.windows - mean) / std).astype(dtype)
    labels = normalize_labels(samples.labels, stats) if scale_labels else samples.labels.copy()
    return SequenceSet(windows, labels, samples.starts, samples.t_end)


def label_scale(stats) -> float:
    return float(stats.label_max) if stats.label_max > 0 else 1.0


def normalize_labels(f, stats):
    return np.asarray(f, dtype=np.float64) / label_scale(stats)


def denormalize_labels(y, stats):
    return np.asarray(y, dtype=np.float64) * label_scale(stats)
