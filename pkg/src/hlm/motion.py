"""Procedural styled-locomotion data at desk scale.

Sequences are planar stick figures: a 9-joint chain (root, torso, head,
one hand per arm, knee and foot per leg) driven by phase-locked limb
oscillators. Per frame the feature vector has F = 2*9 + 2 = 20 channels:

    cols 0..1    root position on the ground plane (world x, y)
    cols 2..17   joints 1..8 as (forward offset from root, height),
                 forward measured along the instantaneous heading
    cols 18..19  root velocity (world), per-frame displacement * fps

Frames are stored float32 (the on-disk width); the velocity channel is
computed from the already-quantized positions so the displacement
identity survives the round trip bit-for-bit. v[0] copies v[1] since no
preceding frame exists.

Styles are parameter bundles (stride, lean, arm swing, cadence, bounce,
lateral asymmetry) with per-parameter jitter; contents pick the root
trajectory and the prompt text. Distinct styles must stay separable:
some parameter gap of at least 3x its jitter, enforced before any
generation happens.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

J_SKEL = 9
FEATURE_DIM = 2 * J_SKEL + 2
JOINT_NAMES = ("root", "torso", "head", "hand_l", "hand_r",
               "knee_l", "foot_l", "knee_r", "foot_r")

PELVIS_H = 0.95
L_TORSO = 0.40
L_HEAD = 0.67   # pelvis to head top along the lean axis
FOOT_H = 0.04

PARAM_NAMES = ("stride_amplitude", "torso_lean_rad", "arm_swing_amplitude",
               "step_frequency_hz", "vertical_bounce", "lateral_asymmetry")
PARAM_RANGES = {
    "stride_amplitude": (0.05, 1.2),
    "torso_lean_rad": (-0.6, 0.6),
    "arm_swing_amplitude": (0.05, 1.0),
    "step_frequency_hz": (0.3, 3.5),
    "vertical_bounce": (0.0, 0.25),
    "lateral_asymmetry": (0.0, 0.8),
}
TRAJECTORIES = ("forward", "circle", "backward", "stop-and-go", "in-place-wave")

DEFAULT_FPS = 20.0
DEFAULT_LENGTHS = (48, 64, 80, 96)
DEFAULT_REPS = 40
_POSITION_NOISE = 0.003    # capture-style jitter on joint channels, meters


@dataclass(frozen=True)
class StyleSpec:
    style_id: str
    parameters: dict
    jitter_std: dict

    def __post_init__(self):
        for name in PARAM_NAMES:
            if name not in self.parameters:
                raise ValueError(f"style {self.style_id!r} missing parameter {name}")
            lo, hi = PARAM_RANGES[name]
            v = self.parameters[name]
            if not (lo <= v <= hi):
                raise ValueError(f"style {self.style_id!r}: {name}={v} outside [{lo}, {hi}]")
            if self.jitter_std.get(name, -1.0) < 0.0:
                raise ValueError(f"style {self.style_id!r}: jitter_std missing or negative for {name}")

    def sample_parameters(self, rng):
        """One jittered draw of the parameter bundle, clipped to range."""
        out = {}
        for name in PARAM_NAMES:
            lo, hi = PARAM_RANGES[name]
            v = self.parameters[name] + rng.normal(0.0, self.jitter_std[name])
            out[name] = float(np.clip(v, lo, hi))
        return out


@dataclass(frozen=True)
class ContentSpec:
    content_id: str
    prompt_text: str
    trajectory: str

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"content {self.content_id!r}: unknown trajectory {self.trajectory!r}")
        if not self.prompt_text:
            raise ValueError(f"content {self.content_id!r}: empty prompt")


class MotionSequence:
    """One labeled sequence; validates shape, finiteness and the
    velocity/displacement identity at construction."""

    __slots__ = ("frames", "fps", "content_id", "style_id", "split")

    def __init__(self, frames, fps, content_id, style_id, split):
        frames = np.ascontiguousarray(frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != FEATURE_DIM:
            raise ValueError(f"frames must be (T, {FEATURE_DIM}), got {frames.shape}")
        if frames.shape[0] < 16:
            raise ValueError(f"sequence too short: T={frames.shape[0]} < 16")
        if not np.all(np.isfinite(frames)):
            raise ValueError("non-finite values in frames")
        if split not in ("train", "test", "generated"):
            raise ValueError(f"split must be train, test or generated, got {split!r}")
        if fps <= 0:
            raise ValueError(f"fps must be positive, got {fps}")
        pos = frames[:, 0:2].astype(np.float64)
        want = ((pos[1:] - pos[:-1]) * float(fps)).astype(np.float32)
        got = frames[1:, 18:20]
        err = np.abs(got.astype(np.float64) - want.astype(np.float64))
        if err.size and err.max() > 1e-9:
            raise ValueError(f"root velocity disagrees with displacement*fps by {err.max():.3e}")
        self.frames = frames
        self.fps = float(fps)
        self.content_id = content_id
        self.style_id = style_id
        self.split = split

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def duration(self):
        return self.frames.shape[0] / self.fps

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return (self.fps == other.fps and self.content_id == other.content_id
                and self.style_id == other.style_id and self.split == other.split
                and np.array_equal(self.frames, other.frames))

    def __repr__(self):
        return (f"MotionSequence(T={self.num_frames}, style={self.style_id!r}, "
                f"content={self.content_id!r}, split={self.split!r})")


@dataclass
class Dataset:
    sequences: list
    style_specs: list
    content_specs: list
    seed: int
    fps: float = DEFAULT_FPS

    @property
    def style_ids(self):
        return [s.style_id for s in self.style_specs]

    @property
    def content_ids(self):
        return [c.content_id for c in self.content_specs]

    def split(self, name):
        return [s for s in self.sequences if s.split == name]

    def style_subset(self, fraction):
        """Restrict to the first ceil(K * fraction) styles of the canonical
        order; subset regimes are filters, never regenerated data."""
        if not (0.0 < fraction <= 1.0):
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        keep = max(1, math.ceil(len(self.style_specs) * fraction))
        kept_ids = set(self.style_ids[:keep])
        return Dataset(
            sequences=[s for s in self.sequences if s.style_id in kept_ids],
            style_specs=self.style_specs[:keep],
            content_specs=self.content_specs,
            seed=self.seed,
            fps=self.fps,
        )

    def held_out_styles(self, fraction):
        keep = max(1, math.ceil(len(self.style_specs) * fraction))
        return self.style_ids[keep:]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.seed == other.seed and self.fps == other.fps
                and self.style_specs == other.style_specs
                and self.content_specs == other.content_specs
                and self.sequences == other.sequences)


# -- canonical styles and contents ------------------------------------

_JITTER = {"stride_amplitude": 0.02, "torso_lean_rad": 0.02, "arm_swing_amplitude": 0.02,
           "step_frequency_hz": 0.05, "vertical_bounce": 0.005, "lateral_asymmetry": 0.02}


def _style(style_id, stride, lean, swing, freq, bounce, asym):
    return StyleSpec(style_id, {
        "stride_amplitude": stride, "torso_lean_rad": lean, "arm_swing_amplitude": swing,
        "step_frequency_hz": freq, "vertical_bounce": bounce, "lateral_asymmetry": asym,
    }, dict(_JITTER))


def default_styles():
    """Eight separable gait styles. The order is canonical: subset regimes
    keep a prefix, so the first two span many parameter axes at once."""
    return [
        _style("strut",   0.80, -0.20, 0.80, 1.30, 0.120, 0.00),
        _style("sneak",   0.30,  0.25, 0.12, 0.90, 0.015, 0.00),
        _style("neutral", 0.55,  0.00, 0.35, 1.60, 0.040, 0.00),
        _style("lean",    0.50,  0.45, 0.30, 1.50, 0.040, 0.00),
        _style("march",   0.70,  0.05, 0.65, 2.40, 0.090, 0.00),
        _style("elderly", 0.20,  0.18, 0.10, 0.80, 0.010, 0.15),
        _style("limp",    0.50,  0.05, 0.30, 1.40, 0.050, 0.55),
        _style("bounce",  0.60, -0.05, 0.40, 1.90, 0.200, 0.00),
    ]


def default_contents():
    return [
        ContentSpec("walk-forward", "a person walks forward", "forward"),
        ContentSpec("walk-circle", "a person walks in a circle", "circle"),
        ContentSpec("walk-backward", "a person walks backward", "backward"),
        ContentSpec("stop-and-go", "a person walks, stops, then walks again", "stop-and-go"),
        ContentSpec("wave-in-place", "a person marches in place and waves", "in-place-wave"),
    ]


def check_separability(style_specs):
    """Every pair of styles must differ in >= 1 parameter by >= 3x that
    parameter's jitter_std (the larger of the two styles' jitters)."""
    ids = [s.style_id for s in style_specs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate style_ids")
    for i in range(len(style_specs)):
        for j in range(i + 1, len(style_specs)):
            a, b = style_specs[i], style_specs[j]
            ok = any(
                abs(a.parameters[n] - b.parameters[n])
                >= 3.0 * max(a.jitter_std[n], b.jitter_std[n])
                for n in PARAM_NAMES
            )
            if not ok:
                raise ValueError(
                    f"styles {a.style_id!r} and {b.style_id!r} are not separable "
                    f"(no parameter gap reaches 3x jitter_std)")


# -- the kinematic generator ------------------------------------------

def _speed_and_heading(traj, base_speed, n, fps, rng):
    """Per-frame signed speed along heading, heading angle, lift gate.

    The limb oscillators always keep their rhythm (style statistics stay
    content-invariant); contents only shape the root path, the foot lift
    (suppressed while the root pauses), and the arm posture.
    """
    tt = np.arange(n) / fps
    ones = np.ones(n)
    if traj == "forward":
        return base_speed * ones, np.zeros(n), ones
    if traj == "backward":
        return -0.7 * base_speed * ones, np.zeros(n), ones
    if traj == "circle":
        heading = 2.0 * np.pi * np.arange(n) / n   # one loop per sequence
        return base_speed * ones, heading, ones
    if traj == "stop-and-go":
        period = 2.0 + rng.uniform(-0.2, 0.2)
        gate = 1.0 / (1.0 + np.exp(-6.0 * np.sin(2.0 * np.pi * tt / period)))
        return base_speed * gate, np.zeros(n), gate
    if traj == "in-place-wave":
        return np.zeros(n), np.zeros(n), ones
    raise ValueError(f"unknown trajectory {traj!r}")


def generate_frames(params, content, num_frames, fps, rng):
    """Render one sequence of the given style parameters and content."""
    n = int(num_frames)
    dt = 1.0 / fps
    stride = params["stride_amplitude"]
    lean = params["torso_lean_rad"]
    swing = params["arm_swing_amplitude"]
    freq = params["step_frequency_hz"]
    bounce = params["vertical_bounce"]
    asym = params["lateral_asymmetry"]

    base_speed = 1.1 * stride * freq
    speed, heading, gate = _speed_and_heading(content.trajectory, base_speed, n, fps, rng)

    phi0 = rng.uniform(0.0, 2.0 * np.pi)
    phi = phi0 + 2.0 * np.pi * freq * dt * np.arange(1, n + 1)

    disp = (speed * dt)[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    disp[0] = 0.0
    root = np.cumsum(disp, axis=0)

    waving = content.trajectory == "in-place-wave"
    pelvis = PELVIS_H + bounce * np.sin(2.0 * phi + 0.4)

    dx_torso = L_TORSO * math.sin(lean) * np.ones(n)
    z_torso = pelvis + L_TORSO * math.cos(lean)
    dx_head = L_HEAD * math.sin(lean) + 0.01 * np.sin(2.0 * phi)
    z_head = pelvis + L_HEAD * math.cos(lean)

    # limbs swing with the same amplitudes in every content; waving only
    # raises the hands, stepping in place only zeroes the root path
    amp_l = 0.5 * swing * (1.0 + asym)
    amp_r = 0.5 * swing * (1.0 - asym)
    dx_hand_l = dx_torso + amp_l * np.sin(phi + np.pi)
    dx_hand_r = dx_torso + amp_r * np.sin(phi)
    if waving:
        z_hand_l = pelvis + 0.45 + (0.08 + 0.3 * amp_l) * np.sin(2.0 * phi)
        z_hand_r = pelvis + 0.45 + (0.08 + 0.3 * amp_r) * np.sin(2.0 * phi + np.pi)
    else:
        z_hand_l = pelvis - 0.12 + 0.05 * np.cos(phi + np.pi)
        z_hand_r = pelvis - 0.12 + 0.05 * np.cos(phi)

    step_l = 0.5 * stride * (1.0 + asym)
    step_r = 0.5 * stride * (1.0 - asym)
    lift = 0.06 + 0.3 * bounce
    dx_foot_l = step_l * np.sin(phi)
    dx_foot_r = step_r * np.sin(phi + np.pi)
    lift_gate = gate if content.trajectory == "stop-and-go" else np.ones(n)
    z_foot_l = FOOT_H + lift * lift_gate * np.maximum(0.0, np.cos(phi))
    z_foot_r = FOOT_H + lift * lift_gate * np.maximum(0.0, np.cos(phi + np.pi))
    dx_knee_l = 0.55 * dx_foot_l + 0.04
    dx_knee_r = 0.55 * dx_foot_r + 0.04
    z_knee_l = 0.5 * (pelvis + z_foot_l) - 0.10 + 0.04 * np.maximum(0.0, np.cos(phi))
    z_knee_r = 0.5 * (pelvis + z_foot_r) - 0.10 + 0.04 * np.maximum(0.0, np.cos(phi + np.pi))

    joints = np.stack([
        dx_torso, z_torso, dx_head, z_head,
        dx_hand_l, z_hand_l, dx_hand_r, z_hand_r,
        dx_knee_l, z_knee_l, dx_foot_l, z_foot_l,
        dx_knee_r, z_knee_r, dx_foot_r, z_foot_r,
    ], axis=1)
    joints += rng.normal(0.0, _POSITION_NOISE, size=joints.shape)
    root += rng.normal(0.0, _POSITION_NOISE * 0.3, size=root.shape)

    # quantize positions first, then derive velocity from the stored values
    root32 = root.astype(np.float32)
    vel = np.zeros_like(root)
    vel[1:] = (root32[1:].astype(np.float64) - root32[:-1].astype(np.float64)) * fps
    vel[0] = vel[1]
    frames = np.zeros((n, FEATURE_DIM), dtype=np.float32)
    frames[:, 0:2] = root32
    frames[:, 2:18] = joints.astype(np.float32)
    frames[:, 18:20] = vel.astype(np.float32)
    return frames


def held_out_content(style_index, content_specs):
    """The content id excluded from a style's training split (rotates so
    every content is held out for some style)."""
    return content_specs[style_index % len(content_specs)].content_id


def generate_dataset(style_specs=None, content_specs=None, reps_per_cell=DEFAULT_REPS,
                     seed=0, fps=DEFAULT_FPS, lengths=DEFAULT_LENGTHS):
    """Deterministic labeled dataset of len(styles) * len(contents) * reps
    sequences. Each (style, content, rep) cell draws an independent RNG
    stream from (seed, cell index), so generation order never matters.
    Per style, one rotating content is held out entirely as the test split.
    """
    style_specs = default_styles() if style_specs is None else list(style_specs)
    content_specs = default_contents() if content_specs is None else list(content_specs)
    if len(style_specs) < 2 or len(content_specs) < 2:
        raise ValueError("need at least 2 styles and 2 contents")
    if reps_per_cell < 1:
        raise ValueError("reps_per_cell must be >= 1")
    check_separability(style_specs)
    cids = [c.content_id for c in content_specs]
    if len(set(c.prompt_text for c in content_specs)) != len(cids):
        raise ValueError("prompt_text must be unique per content")

    sequences = []
    index = 0
    for si, style in enumerate(style_specs):
        held = held_out_content(si, content_specs)
        for content in content_specs:
            split = "test" if content.content_id == held else "train"
            for _ in range(reps_per_cell):
                rng = derive_rng(seed, "motion-seq", index)
                params = style.sample_parameters(rng)
                num_frames = int(rng.choice(lengths))
                frames = generate_frames(params, content, num_frames, fps, rng)
                sequences.append(MotionSequence(frames, fps, content.content_id,
                                                style.style_id, split))
                index += 1
    return Dataset(sequences, style_specs, content_specs, seed, fps)


# -- hand-computed style statistics and geometric checks ---------------

def _amplitude(signal):
    return math.sqrt(2.0) * float(np.std(signal))


def _crossing_rate(signal, fps):
    x = signal - signal.mean()
    flips = np.sum(np.abs(np.diff(np.signbit(x))))
    return 0.5 * float(flips) * fps / max(1, len(x) - 1)


def style_statistics(frames, fps):
    """Six per-sequence statistics aligned with the style parameters:
    [lean angle, arm swing, bounce, stride, cadence, asymmetry]."""
    f = np.asarray(frames, dtype=np.float64)
    dx_torso = f[:, 2]
    lean = float(np.mean(np.arcsin(np.clip(dx_torso / L_TORSO, -1.0, 1.0))))
    sw_l = f[:, 6] - dx_torso
    sw_r = f[:, 8] - dx_torso
    a_l, a_r = _amplitude(sw_l), _amplitude(sw_r)
    swing = 0.5 * (a_l + a_r)
    bounce = _amplitude(f[:, 5])
    st_l, st_r = _amplitude(f[:, 12]), _amplitude(f[:, 16])
    stride = 0.5 * (st_l + st_r)
    cadence = _crossing_rate(sw_l, fps)
    asym = abs(a_l - a_r) / (a_l + a_r + 1e-9)
    return np.array([lean, swing, bounce, stride, cadence, asym])


def fit_circle(points):
    """Least-squares circle fit; returns (center, radius, rms residual)."""
    p = np.asarray(points, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    A = np.column_stack([2.0 * x, 2.0 * y, np.ones(len(p))])
    sol, *_ = np.linalg.lstsq(A, x * x + y * y, rcond=None)
    cx, cy, c = sol
    radius = math.sqrt(max(c + cx * cx + cy * cy, 0.0))
    dist = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
    rms = float(np.sqrt(np.mean((dist - radius) ** 2)))
    return np.array([cx, cy]), radius, rms


def mean_forward_velocity(motion):
    """Mean velocity component along the world x axis (the heading for
    straight-line contents)."""
    return float(motion.frames[:, 18].mean())
