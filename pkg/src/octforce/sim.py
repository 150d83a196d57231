"""Synthetic needle-tip OCT and force streams.

The epoxy layer is a Kelvin-Voigt element (damper ``c`` parallel to a
stiffening spring ``k(d) = k0 * (1 + alpha * d)``) integrated with implicit
Euler at the A-scan rate. Each A-scan shows a fixed peak at the epoxy top and
a peak at the cone-tip lower surface that moves up as the layer compresses;
below the tip surface there is only noise.

Random streams are derived from one master seed: ``SeedSequence(seed).spawn(5)``
gives, in order, the force-trajectory, clock-phase, image-noise,
force-sensor-noise and axial-drift generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

OCT_RATE_HZ = 5500.0
FORCE_RATE_HZ = 500.0

_RENDER_CHUNK = 8192


def _positive_root(a, b, rhs):
    # non-negative root of a d^2 + b d - rhs = 0 in cancellation-free form (a may be 0)
    return 2.0 * rhs / (b + math.sqrt(b * b + 4.0 * a * rhs))


class SimulationInputError(ValueError):
    """Non-finite or out-of-range simulator input."""


@dataclass(frozen=True)
class NeedlePreset:
    name: str
    k0: float  # mN / um
    alpha: float  # 1 / um
    c: float  # mN s / um
    f_max: float  # mN
    layer_thickness_um: float = 500.0

    def __post_init__(self):
        if not (self.k0 > 0 and self.c >= 0 and self.alpha >= 0 and self.f_max > 0):
            raise SimulationInputError(f"invalid preset {self.name!r}: need k0 > 0, c >= 0, alpha >= 0, f_max > 0")
        if self.steady_state(self.f_max) > self.layer_thickness_um:
            raise SimulationInputError(
                f"preset {self.name!r}: steady deformation at f_max "
                f"({self.steady_state(self.f_max):.1f} um) exceeds the layer ({self.layer_thickness_um} um)"
            )

    def steady_state(self, force_mN: float) -> float:
        """Root of k0 * (1 + alpha * d) * d = F."""
        return _positive_root(self.k0 * self.alpha, self.k0, force_mN)

    @classmethod
    def from_fmax(cls, name, f_max, layer_um=500.0, fill=0.8, alpha=0.002, tau_s=0.02):
        """Stiffness chosen so that f_max compresses the layer to ``fill`` of its thickness.

        ``tau_s`` is the small-deformation relaxation time c / k0.
        """
        d = fill * layer_um
        k0 = f_max / (d * (1.0 + alpha * d))
        return cls(name, k0=k0, alpha=alpha, c=tau_s * k0, f_max=float(f_max), layer_thickness_um=layer_um)


# maximum forces of the three epoxy mixtures (mN)
PRESETS = {
    "needle1": NeedlePreset.from_fmax("needle1", 379.0),
    "needle2": NeedlePreset.from_fmax("needle2", 974.0),
    "needle3": NeedlePreset.from_fmax("needle3", 3202.0),
}


def get_preset(name: str) -> NeedlePreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None


def parse_kv_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_preset(path) -> NeedlePreset:
    """Preset from a key/value file with keys name, k0, alpha, c, f_max[, layer_thickness_um]."""
    kv = parse_kv_file(path)
    known = {f.name for f in fields(NeedlePreset)}
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"{path}: unknown preset keys {sorted(unknown)}")
    args = {k: (v if k == "name" else float(v)) for k, v in kv.items()}
    return NeedlePreset(**args)


@dataclass(frozen=True)
class OpticalParams:
    depth_px: int = 300
    px_per_um: float = 0.1
    tip_base_idx: int = 60
    epoxy_top_idx: int = 10
    peak_amp: float = 0.8
    peak_width_px: float = 2.0
    speckle_sigma: float = 0.1
    noise_floor: float = 0.02
    drift_px: float = 0.0  # std of the common axial offset of both surfaces
    drift_tau_s: float = 1.0  # correlation time of that offset

    def __post_init__(self):
        if not 0 < self.epoxy_top_idx < self.tip_base_idx < self.depth_px:
            raise SimulationInputError(
                "need 0 < epoxy_top_idx < tip_base_idx < depth_px, got "
                f"{self.epoxy_top_idx}, {self.tip_base_idx}, {self.depth_px}"
            )
        if not self.drift_tau_s > 0:
            raise SimulationInputError("drift_tau_s must be > 0")
        for name in ("px_per_um", "peak_amp", "peak_width_px", "speckle_sigma", "noise_floor", "drift_px"):
            if getattr(self, name) < 0:
                raise SimulationInputError(f"{name} must be >= 0")

    @property
    def max_deformation_px(self) -> float:
        return float(self.tip_base_idx - self.epoxy_top_idx)

    def noiseless(self) -> "OpticalParams":
        return replace(self, speckle_sigma=0.0, noise_floor=0.0)


@dataclass
class DeformState:
    delta_um: float = 0.0
    t_last: float = 0.0


@dataclass(frozen=True)
class InsertionProfile:
    segments: tuple  # (length_mm, stiffness mN/mm, rupture_force mN or None)
    friction_per_mm: float = 12.0
    velocity_mm_s: float = 2.0

    def __post_init__(self):
        segs = tuple((float(l), float(k), None if r is None else float(r)) for l, k, r in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise SimulationInputError("insertion profile needs at least one segment")
        for length, k, r in segs:
            if length <= 0 or k < 0 or (r is not None and r <= 0):
                raise SimulationInputError(f"invalid segment {(length, k, r)}")
        if self.friction_per_mm < 0 or self.velocity_mm_s <= 0:
            raise SimulationInputError("need friction_per_mm >= 0 and velocity_mm_s > 0")

    @property
    def depth_mm(self) -> float:
        return sum(s[0] for s in self.segments)

    @property
    def duration_s(self) -> float:
        return self.depth_mm / self.velocity_mm_s


# three tissue layers, each ruptured once, at a constant 2 mm/s
DEFAULT_INSERTION = InsertionProfile(
    segments=((4.0, 30.0, 90.0), (10.0, 25.0, 220.0), (8.0, 40.0, None)),
    friction_per_mm=12.0,
    velocity_mm_s=2.0,
)


@dataclass
class OctStream:
    t: np.ndarray  # [n] seconds
    scans: np.ndarray  # [n, depth_px] float32

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        from .streams import AScan

        return AScan(float(self.t[i]), self.scans[i])


@dataclass
class ForceStream:
    t: np.ndarray
    f: np.ndarray  # mN

    def __len__(self):
        return len(self.t)


# ---------------------------------------------------------------------------
# deformation


def _implicit_step(delta, force, dt, k0, alpha, c, layer):
    cdt = c / dt
    d = _positive_root(k0 * alpha, k0 + cdt, force + cdt * delta)
    return min(max(d, 0.0), layer)


def deform_step(state: DeformState, force_mN: float, dt: float, preset: NeedlePreset):
    """Advance the layer by one implicit-Euler step of c*d' + k(d)*d = F.

    Returns ``(delta_um, new_state)``; convert to pixels with ``optics.px_per_um``.
    """
    if not (math.isfinite(force_mN) and math.isfinite(dt)):
        raise SimulationInputError(f"non-finite input: force={force_mN}, dt={dt}")
    if dt <= 0:
        raise SimulationInputError(f"dt must be > 0, got {dt}")
    if not 0 <= force_mN <= preset.f_max:
        raise SimulationInputError(f"force {force_mN} mN outside [0, {preset.f_max}]")
    d = _implicit_step(
        state.delta_um, force_mN, dt, preset.k0, preset.alpha, preset.c, preset.layer_thickness_um
    )
    return d, DeformState(d, state.t_last + dt)


def integrate_deformation(times, forces, preset: NeedlePreset, state: DeformState | None = None):
    """Deformation (um) after each sample of a force history applied at ``times``."""
    state = state or DeformState()
    k0, alpha, c, layer = preset.k0, preset.alpha, preset.c, preset.layer_thickness_um
    out = np.empty(len(times))
    d, t_prev = state.delta_um, state.t_last
    for i, (t, f) in enumerate(zip(times.tolist(), forces.tolist())):
        d = _implicit_step(d, f, t - t_prev, k0, alpha, c, layer)
        out[i] = d
        t_prev = t
    return out


# ---------------------------------------------------------------------------
# rendering


def axial_drift(t, optics: OpticalParams, rng: np.random.Generator) -> np.ndarray:
    """Ornstein-Uhlenbeck offset (px) shared by both surfaces, sampled at times ``t``.

    Stands in for slow optical path-length changes between probe and reference arm.
    """
    t = np.asarray(t, dtype=np.float64)
    if optics.drift_px == 0 or len(t) == 0:
        return np.zeros(len(t))
    step = optics.drift_tau_s / 20.0
    grid = t[0] + step * np.arange(int(np.ceil((t[-1] - t[0]) / step)) + 2)
    a = math.exp(-step / optics.drift_tau_s)
    kick = optics.drift_px * math.sqrt(1.0 - a * a) * rng.standard_normal(len(grid))
    x = np.empty(len(grid))
    x[0] = optics.drift_px * rng.standard_normal()
    for i in range(1, len(grid)):
        x[i] = a * x[i - 1] + kick[i]
    return np.interp(t, grid, x)


def render_ascans(deformation_px, optics: OpticalParams, rng: np.random.Generator, offset_px=None) -> np.ndarray:
    """Vectorised renderer; rows of the result are A-scans (float32 in [0, 1]).

    ``offset_px`` optionally shifts both surfaces of each scan by a common amount.
    """
    d = np.asarray(deformation_px, dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(d)) or np.any(d < 0) or np.any(d > optics.max_deformation_px):
        raise SimulationInputError(f"deformation must lie in [0, {optics.max_deformation_px}] px")
    off = np.zeros(len(d)) if offset_px is None else np.asarray(offset_px, dtype=np.float64).reshape(-1)
    out = np.empty((len(d), optics.depth_px), dtype=np.float32)
    idx = np.arange(optics.depth_px, dtype=np.float64)
    w2 = 2.0 * optics.peak_width_px**2
    for lo in range(0, len(d), _RENDER_CHUNK):
        shift = off[lo : lo + _RENDER_CHUNK, None]
        centre = optics.tip_base_idx - d[lo : lo + _RENDER_CHUNK, None] + shift
        fixed = np.exp(-((idx - optics.epoxy_top_idx - shift) ** 2) / w2)
        s = optics.peak_amp * (fixed + np.exp(-((idx - centre) ** 2) / w2))
        # light does not pass the metal tip: nothing structural below its surface
        s[idx > centre + 4.0 * optics.peak_width_px] = 0.0
        if optics.speckle_sigma > 0:
            sig = optics.speckle_sigma
            s *= np.exp(sig * rng.standard_normal(s.shape) - 0.5 * sig * sig)
        if optics.noise_floor > 0:
            s += optics.noise_floor * rng.standard_normal(s.shape)
        out[lo : lo + len(s)] = np.clip(s, 0.0, 1.0)
    return out


def render_ascan(deformation_px: float, optics: OpticalParams, seed: int) -> np.ndarray:
    return render_ascans([deformation_px], optics, np.random.default_rng(seed))[0]


# ---------------------------------------------------------------------------
# streams


def _clock(duration, rate, rng):
    phase = (1.0 - rng.random()) / rate  # in (0, 1/rate]
    n = int(math.floor((duration - phase) * rate)) + 1
    return phase + np.arange(max(n, 0)) / rate


def calibration_force_knots(f_max, duration, rng, hold_prob=0.1, ramp_s=(0.05, 1.0)):
    """Knots of a piecewise-linear force: random targets in [0, f_max], random ramp lengths."""
    t, f = [0.0], [0.0]
    while t[-1] <= duration:
        t.append(t[-1] + rng.uniform(*ramp_s))
        f.append(f[-1] if rng.random() < hold_prob else rng.uniform(0.0, f_max))
    return np.array(t), np.array(f)


def simulate_calibration(
    preset: NeedlePreset,
    optics: OpticalParams,
    duration: float,
    seed: int,
    force_noise_mN: float = 0.0,
):
    """Needle pressed against a plate with random magnitudes and velocities."""
    if not duration > 0:
        raise SimulationInputError(f"duration must be > 0, got {duration}")
    traj_ss, clock_ss, img_ss, sensor_ss, drift_ss = np.random.SeedSequence(seed).spawn(5)
    knots_t, knots_f = calibration_force_knots(preset.f_max, duration, np.random.default_rng(traj_ss))
    clock = np.random.default_rng(clock_ss)
    t_oct = _clock(duration, OCT_RATE_HZ, clock)
    t_force = _clock(duration, FORCE_RATE_HZ, clock)

    applied = np.interp(t_oct, knots_t, knots_f)
    delta_px = integrate_deformation(t_oct, applied, preset) * optics.px_per_um
    drift = axial_drift(t_oct, optics, np.random.default_rng(drift_ss))
    scans = render_ascans(delta_px, optics, np.random.default_rng(img_ss), drift)

    f = np.interp(t_force, knots_t, knots_f)
    if force_noise_mN > 0:
        f = f + force_noise_mN * np.random.default_rng(sensor_ss).standard_normal(len(f))
        f = np.clip(f, 0.0, preset.f_max)
    return OctStream(t_oct, scans), ForceStream(t_force, f)


def _tip_force_pieces(profile: InsertionProfile):
    """Linear pieces (x0, x1, f0, slope) over insertion depth (mm).

    Force carries over between segments, grows with the segment's stiffness, and
    drops to zero the first time it reaches the segment's rupture force.
    """
    pieces, x, f = [], 0.0, 0.0
    for length, k, rupture in profile.segments:
        end = x + length
        if rupture is not None and k > 0 and f < rupture:
            x_r = x + (rupture - f) / k
            if x_r < end:
                pieces.append((x, x_r, f, k))
                x, f = x_r, 0.0
        pieces.append((x, end, f, k))
        f += k * (end - x)
        x = end
    return pieces


def tip_force_at_depth(profile: InsertionProfile, depth_mm, f_max=np.inf) -> np.ndarray:
    depth_mm = np.asarray(depth_mm, dtype=np.float64)
    pieces = _tip_force_pieces(profile)
    starts = np.array([p[0] for p in pieces])
    i = np.clip(np.searchsorted(starts, depth_mm, side="right") - 1, 0, len(pieces) - 1)
    x0 = starts[i]
    f0 = np.array([p[2] for p in pieces])[i]
    k = np.array([p[3] for p in pieces])[i]
    return np.clip(f0 + k * (depth_mm - x0), 0.0, f_max)


def simulate_insertion(
    preset: NeedlePreset,
    optics: OpticalParams,
    profile: InsertionProfile,
    shielded: bool,
    seed: int,
    base_noise_mN: float = 1.0,
):
    """Constant-velocity tissue insertion.

    Returns ``(oct, base_force, tip_force_truth)``. Without the shielding tube the
    base sensor also picks up shaft friction proportional to inserted depth.
    """
    _, clock_ss, img_ss, sensor_ss, drift_ss = np.random.SeedSequence(seed).spawn(5)
    duration = profile.duration_s
    clock = np.random.default_rng(clock_ss)
    t_oct = _clock(duration, OCT_RATE_HZ, clock)
    t_force = _clock(duration, FORCE_RATE_HZ, clock)
    v = profile.velocity_mm_s

    tip_at_scans = tip_force_at_depth(profile, v * t_oct, preset.f_max)
    delta_px = integrate_deformation(t_oct, tip_at_scans, preset) * optics.px_per_um
    drift = axial_drift(t_oct, optics, np.random.default_rng(drift_ss))
    scans = render_ascans(delta_px, optics, np.random.default_rng(img_ss), drift)

    tip = tip_force_at_depth(profile, v * t_force, preset.f_max)
    base = tip.copy()
    if not shielded:
        base += profile.friction_per_mm * v * t_force
    if base_noise_mN > 0:
        base += base_noise_mN * np.random.default_rng(sensor_ss).standard_normal(len(base))
    return OctStream(t_oct, scans), ForceStream(t_force, base), ForceStream(t_force.copy(), tip)
