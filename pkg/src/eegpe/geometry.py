"""Electrode montages and the fixed sinusoidal tables built from them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError, ParseError


@dataclass(frozen=True)
class Montage:
    """Ordered electrode set; channel order here is the order of every data tensor."""

    channel_names: tuple
    positions: np.ndarray  # [C, 3], any consistent unit

    def __post_init__(self):
        names = tuple(self.channel_names)
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(names) != len(pos):
            raise GeometryError(f"{len(names)} names but {len(pos)} positions")
        seen = set()
        for n in names:
            if n in seen:
                raise GeometryError(f"duplicate electrode name {n!r}")
            seen.add(n)
        if not np.all(np.isfinite(pos)):
            raise GeometryError("electrode positions must be finite")
        at_origin = np.flatnonzero(np.all(pos == 0.0, axis=1))
        if at_origin.size:
            raise GeometryError(f"electrode {names[at_origin[0]]!r} sits at the origin")
        pos.setflags(write=False)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.channel_names)

    def __eq__(self, other):
        return (isinstance(other, Montage) and self.channel_names == other.channel_names
                and np.array_equal(self.positions, other.positions))

    def __hash__(self):
        return hash(self.channel_names)

    def angles(self):
        """[C, 2] array of (azimuth, inclination), snapped with ``snap_angles``."""
        return snap_angles(np.array([cartesian_to_spherical(p) for p in self.positions]))

    def permuted(self, order):
        order = list(order)
        return Montage(tuple(self.channel_names[i] for i in order), self.positions[order])

    def scaled(self, s):
        return Montage(self.channel_names, self.positions * s)

    def to_dict(self):
        return {"channel_names": list(self.channel_names),
                "positions": [[float(v) for v in p] for p in self.positions]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["channel_names"]), np.array(d["positions"], dtype=np.float64))


def cartesian_to_spherical(position):
    """(x, y, z) -> (azimuth from +x toward +y, inclination from +z)."""
    x, y, z = (float(v) for v in position)
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise GeometryError("cannot take angles of an electrode at the origin")
    inclination = math.acos(max(-1.0, min(1.0, z / r)))
    azimuth = 0.0 if (x == 0.0 and y == 0.0) else math.atan2(y, x)
    return azimuth, inclination


# pi * 2**-31 rad (~1.5e-9): rescaling coordinates perturbs angles by a few ulp,
# far below one grid step, so tables built from snapped angles are bit-stable.
# Multiples of pi/2 land exactly on the grid.
ANGLE_STEP = math.pi * 2.0 ** -31


def snap_angles(angles):
    return np.rint(np.asarray(angles, dtype=np.float64) / ANGLE_STEP) * ANGLE_STEP


def octave_frequencies(d):
    """Default basis 1, 2, 4, ... with d/4 entries."""
    if d % 4:
        raise ConfigError(f"embedding dim {d} must be divisible by 4 for spherical tables")
    return 2.0 ** np.arange(d // 4)


def spe_channel_table(angles, d, frequencies=None):
    """[C, d] table: first half interleaves sin/cos of azimuth, second half of inclination."""
    if d % 4:
        raise ConfigError(f"embedding dim {d} must be divisible by 4 for spherical tables")
    if isinstance(angles, Montage):
        angles = angles.angles()
    angles = np.asarray(angles, dtype=np.float64).reshape(-1, 2)
    freqs = octave_frequencies(d) if frequencies is None else np.asarray(frequencies, dtype=np.float64)
    if freqs.shape != (d // 4,):
        raise ConfigError(f"need {d // 4} frequencies for dim {d}, got {freqs.shape[0]}")
    C = angles.shape[0]
    table = np.empty((C, d))
    half = d // 2
    for col, start in ((0, 0), (1, half)):
        arg = angles[:, col:col + 1] * freqs[None, :]
        table[:, start:start + half:2] = np.sin(arg)
        table[:, start + 1:start + half:2] = np.cos(arg)
    return table


def temporal_sinusoid_table(w, d):
    """[w, d] sinusoidal table over patch indices (base 10000)."""
    if w < 1:
        raise ConfigError("need at least one patch")
    if d % 2:
        raise ConfigError(f"temporal table needs an even dim, got {d}")
    p = np.arange(w, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    arg = p / np.power(10000.0, 2.0 * i / d)
    table = np.empty((w, d))
    table[:, 0::2] = np.sin(arg)
    table[:, 1::2] = np.cos(arg)
    return table


def great_circle(a, b):
    """Angle in radians between two electrode directions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------- montage sources

def parse_montage(text, source="<string>"):
    names, rows = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"{source}:{lineno}: expected 'NAME x y z', got {raw!r}")
        name = parts[0]
        try:
            xyz = [float(v) for v in parts[1:]]
        except ValueError:
            raise ParseError(f"{source}:{lineno}: bad coordinate in {raw!r}") from None
        if name in names:
            raise ParseError(f"{source}:{lineno}: duplicate electrode name {name!r}")
        if not all(math.isfinite(v) for v in xyz):
            raise ParseError(f"{source}:{lineno}: non-finite coordinate for {name!r}")
        if all(v == 0.0 for v in xyz):
            raise ParseError(f"{source}:{lineno}: electrode {name!r} at the origin")
        names.append(name)
        rows.append(xyz)
    if not names:
        raise ParseError(f"{source}: no electrodes")
    return Montage(tuple(names), np.array(rows))


def load_montage(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read montage {path}: {e.strerror}") from None
    return parse_montage(text, str(path))


def format_montage(montage):
    lines = ["# NAME x y z  (azimuth from +x toward +y, inclination from +z/vertex)"]
    for name, (x, y, z) in zip(montage.channel_names, montage.positions):
        lines.append(f"{name} {float(x)!r} {float(y)!r} {float(z)!r}")
    return "\n".join(lines) + "\n"


def save_montage(montage, path):
    Path(path).write_text(format_montage(montage), encoding="utf-8")


def synthetic_ring_montage(C):
    """C electrodes on a unit hemisphere: one at the vertex, the rest on rings.

    Ring r (1-based) holds up to 6r electrodes at inclination r*(pi/2)/R, where
    R is the fewest rings whose capacity covers C - 1. Rings fill in order, the
    last one takes the remainder. Electrodes on ring r sit at azimuths
    2*pi*j/n_r, shifted by half a step on even rings.
    """
    if C < 1:
        raise ConfigError("montage needs at least one electrode")
    pos = [(0.0, 0.0, 1.0)]
    remaining = C - 1
    R = 0
    while 3 * R * (R + 1) < remaining:
        R += 1
    for r in range(1, R + 1):
        n = min(6 * r, remaining)
        remaining -= n
        incl = r * (math.pi / 2) / R
        offset = math.pi / n if r % 2 == 0 else 0.0
        for j in range(n):
            az = 2 * math.pi * j / n + offset
            pos.append((math.sin(incl) * math.cos(az), math.sin(incl) * math.sin(az), math.cos(incl)))
    names = tuple(f"E{i + 1}" for i in range(C))
    return Montage(names, np.array(pos))
