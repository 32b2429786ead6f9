"""Reference tracks: piecewise-linear waypoint paths with speed profiles.

Used both by the controller cost (projection of predicted states onto the
reference) and by the closed-loop harness (tracking metrics). Lateral
deviation is signed positive to the left of the travel direction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class Track:
    """Ordered waypoints with per-waypoint reference speed."""

    waypoints: np.ndarray  # (M, 2)
    v_ref: np.ndarray      # (M,)
    closed: bool = False

    _p0: np.ndarray = field(init=False, repr=False)
    _dir: np.ndarray = field(init=False, repr=False)
    _len: np.ndarray = field(init=False, repr=False)
    _v0: np.ndarray = field(init=False, repr=False)
    _v1: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, float)
        self.v_ref = np.asarray(self.v_ref, float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[0] < 3 or self.waypoints.shape[1] != 2:
            raise ValueError("track needs at least 3 (x, y) waypoints")
        if self.v_ref.shape != (self.waypoints.shape[0],):
            raise ValueError("one reference speed per waypoint required")
        p = self.waypoints
        if self.closed:
            p0, p1 = p, np.roll(p, -1, axis=0)
            self._v0, self._v1 = self.v_ref, np.roll(self.v_ref, -1)
        else:
            p0, p1 = p[:-1], p[1:]
            self._v0, self._v1 = self.v_ref[:-1], self.v_ref[1:]
        seg = p1 - p0
        lens = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lens <= 0):
            raise ValueError("consecutive waypoints must be distinct")
        self._p0 = p0
        self._dir = seg / lens[:, None]
        self._len = lens

    @property
    def arclength(self) -> float:
        return float(self._len.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("x,y,v_ref\n")
        for (x, y), v in zip(self.waypoints, self.v_ref):
            buf.write(f"{x:.9g},{y:.9g},{v:.9g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, closed: bool = False) -> "Track":
        rows = [line.split(",") for line in text.strip().split("\n")[1:]]
        arr = np.array(rows, dtype=float)
        return cls(arr[:, :2], arr[:, 2], closed)


def nearest_reference(track: Track, position, heading=None):
    """Project positions onto the track.

    Returns (lateral deviation, heading error, v_ref); deviation is signed
    by the track-left convention, v_ref is linearly interpolated along the
    nearest segment, and heading error is wrapped to (-pi, pi]. If heading
    is None the heading error is relative to zero heading.

    ``position`` may be a single (2,) point or any (..., 2) batch.
    """
    pos = np.asarray(position, float)
    lead = pos.shape[:-1]
    pts = pos.reshape(-1, 2)
    psi = np.zeros(pts.shape[0]) if heading is None else np.broadcast_to(
        np.asarray(heading, float), lead).reshape(-1)

    diff = pts[:, None, :] - track._p0[None, :, :]          # (N, S, 2)
    t = np.clip(np.einsum("nsk,sk->ns", diff, track._dir), 0.0, track._len)
    proj = track._p0[None] + t[..., None] * track._dir[None]
    offs = pts[:, None, :] - proj
    d2 = np.einsum("nsk,nsk->ns", offs, offs)
    best = np.argmin(d2, axis=1)

    rows = np.arange(pts.shape[0])
    d_best = track._dir[best]
    off_best = pts - proj[rows, best]
    deviation = d_best[:, 0] * off_best[:, 1] - d_best[:, 1] * off_best[:, 0]
    frac = t[rows, best] / track._len[best]
    v_ref = track._v0[best] * (1.0 - frac) + track._v1[best] * frac
    head_err = wrap_angle(psi - np.arctan2(d_best[:, 1], d_best[:, 0]))

    if lead == ():
        return float(deviation[0]), float(head_err[0]), float(v_ref[0])
    return deviation.reshape(lead), head_err.reshape(lead), v_ref.reshape(lead)


def oval_track(
    straight: float = 60.0,
    radius: float = 15.0,
    v_straight: float = 10.0,
    v_turn: float = 8.0,
    spacing: float = 2.0,
) -> Track:
    """Closed oval: two straights joined by semicircular turns, CCW."""
    pts, speeds = [], []

    def add_straight(p_from, p_to, v):
        length = np.hypot(*(np.asarray(p_to) - p_from))
        n = max(2, int(round(length / spacing)))
        for i in range(n):
            f = i / n
            pts.append((1 - f) * np.asarray(p_from, float) + f * np.asarray(p_to, float))
            speeds.append(v)

    def add_arc(center, r, a_from, a_to, v):
        n = max(3, int(round(abs(a_to - a_from) * r / spacing)))
        for i in range(n):
            a = a_from + (a_to - a_from) * i / n
            pts.append(np.array([center[0] + r * np.cos(a), center[1] + r * np.sin(a)]))
            speeds.append(v)

    add_straight((0.0, 0.0), (straight, 0.0), v_straight)
    add_arc((straight, radius), radius, -np.pi / 2, np.pi / 2, v_turn)
    add_straight((straight, 2 * radius), (0.0, 2 * radius), v_straight)
    add_arc((0.0, radius), radius, np.pi / 2, 3 * np.pi / 2, v_turn)
    return Track(np.array(pts), np.array(speeds), closed=True)


def double_lane_change_track(
    entry: float = 25.0,
    shift: float = 3.5,
    transition: float = 13.5,
    hold: float = 11.0,
    back: float = 12.5,
    exit_len: float = 40.0,
    v_entry: float = 9.0,
    spacing: float = 1.0,
) -> Track:
    """Open double-lane-change course: shift left, hold, return, exit."""
    xs = np.concatenate([
        np.arange(0.0, entry, spacing),
        np.arange(entry, entry + transition, spacing),
        np.arange(entry + transition, entry + transition + hold, spacing),
        np.arange(entry + transition + hold, entry + transition + hold + back, spacing),
        np.arange(entry + transition + hold + back,
                  entry + transition + hold + back + exit_len, spacing),
    ])
    x1, x2 = entry, entry + transition
    x3, x4 = x2 + hold, x2 + hold + back

    def offset(x):
        if x < x1:
            return 0.0
        if x < x2:
            f = (x - x1) / transition
            return shift * 0.5 * (1 - np.cos(np.pi * f))
        if x < x3:
            return shift
        if x < x4:
            f = (x - x3) / back
            return shift * 0.5 * (1 + np.cos(np.pi * f))
        return 0.0

    ys = np.array([offset(x) for x in xs])
    pts = np.column_stack([xs, ys])
    return Track(pts, np.full(len(xs), v_entry), closed=False)
