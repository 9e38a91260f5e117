"""Synthetic moving-shapes videos: one colored target shape (square or disk)
translating at a constant integer velocity over a noisy gray background,
optionally with distractor shapes that are excluded from the mask.

Frames are float arrays on the 8-bit grid (round-tripping through image
files is exact); masks are exact geometry, so overlap statistics such as the
IoU of consecutive masks have closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIRECTIONS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]


@dataclass
class SynthConfig:
    frame_size: tuple = (64, 64)
    shapes: tuple = ("square", "disk")
    size_range: tuple = (10, 22)
    velocity_range: tuple = (0, 4)
    static_prob: float = 0.3
    distractor_count: int = 0
    background_noise: float = 0.05

    def __post_init__(self):
        h, w = self.frame_size
        if self.size_range[0] < 2 or self.size_range[1] >= min(h, w):
            raise ValueError("shape sizes must fit inside the frame")
        if not 0.0 <= self.static_prob <= 1.0:
            raise ValueError("static_prob must lie in [0, 1]")


def _shape_region(kind, top, left, size, h, w):
    m = np.zeros((h, w), dtype=bool)
    if kind == "square":
        m[top : top + size, left : left + size] = True
    elif kind == "disk":
        cy = top + (size - 1) / 2.0
        cx = left + (size - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w]
        m[(yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2.0) ** 2] = True
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return m


def _start_interval(extent, size, v, n_frames):
    # positions p with p + v*t in [0, extent-size] for all t
    disp = v * (n_frames - 1)
    lo = max(0, -disp)
    hi = min(extent - size, extent - size - disp)
    return lo, hi


def _sample_color(rng):
    # each channel clearly darker or brighter than the 0.5 background
    return np.array(
        [rng.uniform(0.0, 0.3) if rng.random() < 0.5 else rng.uniform(0.7, 1.0) for _ in range(3)]
    )


def _sample_velocity(rng, cfg):
    lo, hi = cfg.velocity_range
    if hi <= 0 or rng.random() < cfg.static_prob:
        return (0, 0)
    speed = int(rng.integers(max(1, lo), hi + 1))
    dx, dy = DIRECTIONS[rng.integers(0, len(DIRECTIONS))]
    return (speed * dy, speed * dx)  # (vy, vx)


def _sample_track(rng, cfg, n_frames, kind=None, size=None, velocity=None):
    h, w = cfg.frame_size
    for _ in range(64):
        kind_t = kind if kind is not None else cfg.shapes[rng.integers(0, len(cfg.shapes))]
        size_t = (
            size
            if size is not None
            else int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        )
        v = velocity if velocity is not None else _sample_velocity(rng, cfg)
        ylo, yhi = _start_interval(h, size_t, v[0], n_frames)
        xlo, xhi = _start_interval(w, size_t, v[1], n_frames)
        if ylo <= yhi and xlo <= xhi:
            top = int(rng.integers(ylo, yhi + 1))
            left = int(rng.integers(xlo, xhi + 1))
            return kind_t, size_t, v, top, left
        if velocity is not None and size is not None:
            break
    raise ValueError(
        f"infeasible geometry: size {size} velocity {velocity} in {h}x{w} frame"
    )


def _bbox_overlap(a, b, margin=1):
    ay, ax, asz = a
    by, bx, bsz = b
    return not (
        ay + asz + margin <= by
        or by + bsz + margin <= ay
        or ax + asz + margin <= bx
        or bx + bsz + margin <= ax
    )


def synth_sequence(cfg, seq_len, seed, velocity=None, kind=None, size=None):
    """One video: frames (t, 3, h, w) in [0, 1] and boolean masks (t, h, w).

    Deterministic per seed. ``velocity``, ``kind`` and ``size`` pin the target
    track for analytic tests; otherwise they are sampled, with a static track
    drawn with probability ``cfg.static_prob``.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    rng = np.random.default_rng(seed)
    h, w = cfg.frame_size
    t_kind, t_size, t_vel, t_top, t_left = _sample_track(
        rng, cfg, seq_len, kind=kind, size=size, velocity=velocity
    )
    t_color = _sample_color(rng)

    distractors = []
    for _ in range(cfg.distractor_count):
        for _ in range(64):
            d_kind, d_size, d_vel, d_top, d_left = _sample_track(rng, cfg, seq_len)
            clear = all(
                not _bbox_overlap(
                    (t_top + t_vel[0] * t, t_left + t_vel[1] * t, t_size),
                    (d_top + d_vel[0] * t, d_left + d_vel[1] * t, d_size),
                )
                for t in range(seq_len)
            )
            if clear and all(
                not any(
                    _bbox_overlap(
                        (o_top + o_vel[0] * t, o_left + o_vel[1] * t, o_size),
                        (d_top + d_vel[0] * t, d_left + d_vel[1] * t, d_size),
                    )
                    for t in range(seq_len)
                )
                for (_, o_size, o_vel, o_top, o_left, _) in distractors
            ):
                distractors.append((d_kind, d_size, d_vel, d_top, d_left, _sample_color(rng)))
                break
        else:
            raise ValueError("could not place distractors without overlap")

    frames = np.empty((seq_len, 3, h, w))
    masks = np.empty((seq_len, h, w), dtype=bool)
    for t in range(seq_len):
        canvas = np.full((3, h, w), 0.5)
        if cfg.background_noise > 0:
            canvas += cfg.background_noise * rng.uniform(-1.0, 1.0, (h, w))
        for d_kind, d_size, d_vel, d_top, d_left, d_color in distractors:
            region = _shape_region(
                d_kind, d_top + d_vel[0] * t, d_left + d_vel[1] * t, d_size, h, w
            )
            canvas[:, region] = d_color[:, None]
        region = _shape_region(
            t_kind, t_top + t_vel[0] * t, t_left + t_vel[1] * t, t_size, h, w
        )
        canvas[:, region] = t_color[:, None]
        frames[t] = np.round(np.clip(canvas, 0.0, 1.0) * 255.0) / 255.0
        masks[t] = region
    return frames, masks


def make_dataset(cfg, n_videos, seq_len, seed, **track_kwargs):
    """List of (name, frames, masks) videos with per-video derived seeds."""
    videos = []
    for i in range(n_videos):
        child = np.random.SeedSequence(entropy=seed, spawn_key=(i,))
        frames, masks = synth_sequence(cfg, seq_len, child, **track_kwargs)
        videos.append((f"video{i:03d}", frames, masks.astype(np.int32)))
    return videos


def translating_square_sequence(seq_len=12, side=10, speed=2, frame_size=(64, 64), seed=0):
    """Axis-aligned square mover with closed-form consecutive IoU
    ``side*(side-speed) / (side*(side+speed))``."""
    cfg = SynthConfig(frame_size=frame_size, background_noise=0.05)
    return synth_sequence(
        cfg, seq_len, seed, velocity=(0, speed), kind="square", size=side
    )
