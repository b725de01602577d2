"""PAM symbol generation, ISI channel, AWGN and window extraction."""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *stream)``.

    Stream components may be ints or strings; strings are hashed with crc32 so
    that e.g. ``make_rng(7, "train", 12)`` is a fixed, independent substream.
    """
    key = []
    for s in stream:
        if isinstance(s, str):
            key.append(zlib.crc32(s.encode()))
        else:
            key.append(int(s))
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Modulation:
    order: int
    levels: tuple = field(init=False)

    def __post_init__(self):
        if self.order not in (2, 4):
            raise ValueError(f"unsupported modulation order {self.order}")
        m = self.order
        levels = tuple((2 * i - (m - 1)) / (m - 1) for i in range(m))
        object.__setattr__(self, "levels", levels)

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.order))

    @property
    def level_array(self) -> np.ndarray:
        return np.asarray(self.levels)

    @property
    def mean_power(self) -> float:
        return float(np.mean(np.square(self.levels)))

    def slice(self, v) -> np.ndarray:
        """Nearest-level index; midpoints go to the lower level."""
        v = np.asarray(v, dtype=float)
        m = self.order
        pos = (v + 1.0) * (m - 1) / 2.0
        idx = np.ceil(pos - 0.5).astype(np.int64)
        return np.clip(idx, 0, m - 1)

    @classmethod
    def from_name(cls, name) -> "Modulation":
        key = str(name).strip().lower()
        table = {"pam2": 2, "2": 2, "pam4": 4, "4": 4}
        if key not in table:
            raise ValueError(f"unknown modulation {name!r}")
        return cls(table[key])

    def __str__(self):
        return f"PAM{self.order}"


PAM2 = Modulation(2)
PAM4 = Modulation(4)


@dataclass(frozen=True)
class Channel:
    taps: tuple
    pre_cursors: int = 0

    def __post_init__(self):
        taps = tuple(float(t) for t in self.taps)
        object.__setattr__(self, "taps", taps)
        if not taps:
            raise ValueError("channel needs at least one tap")
        if not 0 <= self.pre_cursors < len(taps):
            raise ValueError(
                f"pre_cursors={self.pre_cursors} out of range for {len(taps)} taps")
        mags = np.abs(taps)
        if mags[self.pre_cursors] < mags.max():
            warnings.warn("main cursor is not the largest tap", stacklevel=2)

    def __len__(self):
        return len(self.taps)

    @property
    def tap_array(self) -> np.ndarray:
        return np.asarray(self.taps)

    @property
    def main_cursor(self) -> float:
        return self.taps[self.pre_cursors]


@dataclass(frozen=True, eq=False)
class SymbolStream:
    indices: np.ndarray
    seed: int | None = None

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class ObservedStream:
    samples: np.ndarray
    sigma: float

    def __len__(self):
        return len(self.samples)


def _indices(z) -> np.ndarray:
    return np.asarray(getattr(z, "indices", z))


def _samples(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=float)


def random_symbols(count: int, mod: Modulation, seed: int, stream=("symbols",)) -> SymbolStream:
    if count < 1:
        raise ValueError("cannot generate an empty symbol stream")
    rng = make_rng(seed, *stream)
    return SymbolStream(rng.integers(0, mod.order, size=count), seed)


def convolve_levels(amplitudes, ch: Channel) -> np.ndarray:
    a = np.asarray(amplitudes, dtype=float)
    return np.convolve(a, ch.tap_array)[: len(a)]


def apply_channel(z, mod: Modulation, ch: Channel) -> np.ndarray:
    """Same-length causal convolution; symbols before the stream start are zero."""
    return convolve_levels(mod.level_array[_indices(z)], ch)


def sigma_for_snr(ch: Channel, mod: Modulation, snr_db: float) -> float:
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    p_rx = float(np.sum(ch.tap_array ** 2)) * mod.mean_power
    return math.sqrt(p_rx / 10.0 ** (snr_db / 10.0))


def add_awgn(signal, sigma: float, seed: int, stream=("noise",)) -> ObservedStream:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    s = np.asarray(signal, dtype=float)
    if sigma == 0:
        return ObservedStream(s.copy(), 0.0)
    rng = make_rng(seed, *stream)
    return ObservedStream(s + sigma * rng.standard_normal(len(s)), float(sigma))


def gray_code(indices) -> np.ndarray:
    i = np.asarray(indices, dtype=np.int64)
    return i ^ (i >> 1)


def bit_errors(truth, decisions, mod: Modulation) -> tuple[int, int]:
    a = _indices(truth)
    b = _indices(decisions)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    diff = gray_code(a) ^ gray_code(b)
    errs = 0
    for bit in range(mod.bits_per_symbol):
        errs += int(np.count_nonzero((diff >> bit) & 1))
    return errs, len(a) * mod.bits_per_symbol


def window_matrix(x: np.ndarray, T: int) -> np.ndarray:
    """All length-T windows of ``x`` as a (len(x)-T+1, T) read-only view."""
    return np.lib.stride_tricks.sliding_window_view(np.asarray(x, dtype=float), T)


def label_offset(D: int, pre: int) -> int:
    """Index of the decoded symbol relative to the window start."""
    return D - 1 - pre


def make_windows(x, z, T: int, D: int, pre: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(windows, labels)``; window k is x[k:k+T], label z[k+D-1-pre].

    Windows whose label would fall outside the symbol stream are dropped.
    """
    if not 1 <= D <= T:
        raise ValueError(f"need 1 <= D <= T, got D={D}, T={T}")
    if pre < 0:
        raise ValueError("pre must be non-negative")
    xs = _samples(x)
    zs = _indices(z)
    if len(xs) < T:
        return np.empty((0, T)), np.empty(0, dtype=np.int64)
    wins = window_matrix(xs, T)
    off = label_offset(D, pre)
    k = np.arange(len(wins))
    keep = (k + off >= 0) & (k + off < len(zs))
    return wins[keep], zs[k[keep] + off]


# -- channel files ---------------------------------------------------------

def format_channel(ch: Channel) -> str:
    lines = [str(ch.pre_cursors)]
    lines += [repr(float(t)) for t in ch.taps]
    return "\n".join(lines) + "\n"


def parse_channel(text: str) -> Channel:
    values = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            values.append(line)
    if len(values) < 2:
        raise ValueError("channel file needs a pre-cursor count and at least one tap")
    return Channel(tuple(float(v) for v in values[1:]), int(values[0]))


def load_channel(path) -> Channel:
    return parse_channel(Path(path).read_text())


def save_channel(ch: Channel, path) -> None:
    Path(path).write_text(format_channel(ch))
