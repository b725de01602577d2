"""MMSE feed-forward and decision-feedback equalizers."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal_model import Channel, Modulation, SymbolStream, _samples


@dataclass(frozen=True)
class FfeTaps:
    """FIR taps plus the decision delay ``cursor`` of the equalized pulse.

    ``ffe_apply`` returns ``y[t] = sum_j taps[j] * x[t + cursor - j]``, so for a
    design made against a channel the output at ``t`` is the statistic for
    symbol ``t``.
    """
    taps: tuple
    cursor: int = 0

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(float(t) for t in self.taps))
        if not 0 <= self.cursor < len(self.taps):
            raise ValueError(f"cursor {self.cursor} outside 0..{len(self.taps) - 1}")

    @property
    def tap_array(self) -> np.ndarray:
        return np.asarray(self.taps)


@dataclass(frozen=True)
class DfeConfig:
    ff: FfeTaps
    fb: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "fb", tuple(float(t) for t in self.fb))


def default_cursor(ch: Channel, n_taps: int) -> int:
    return min(max(ch.pre_cursors + 2, 0), n_taps - 1)


def _conv_matrix(h: np.ndarray, n_taps: int) -> np.ndarray:
    # tap j sees x[t+c-j] = sum_i h[i] z[t+c-j-i]; column j+i holds z[t+c-(j+i)]
    L = len(h)
    H = np.zeros((n_taps, n_taps + L - 1))
    for j in range(n_taps):
        H[j, j: j + L] = h
    return H


def _solve(R: np.ndarray, p: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond > 1e12:
        warnings.warn("singular normal equations, using least-squares solution",
                      stacklevel=3)
        return np.linalg.lstsq(R, p, rcond=None)[0]
    return np.linalg.solve(R, p)


def _mmse(ch: Channel, mod: Modulation, sigma: float, n_taps: int, cursor: int,
          n_fb: int) -> np.ndarray:
    h = ch.tap_array
    H = _conv_matrix(h, n_taps)
    keep = np.ones(H.shape[1], dtype=bool)
    # post-cursor symbols z[t-1..t-n_fb] are cancelled by feedback
    keep[cursor + 1: cursor + 1 + n_fb] = False
    Hk = H[:, keep]
    R = Hk @ Hk.T + (sigma ** 2 / mod.mean_power) * np.eye(n_taps)
    return _solve(R, H[:, cursor])


def combined_pulse(ff: FfeTaps, ch: Channel) -> np.ndarray:
    """Equalized pulse g = w * h; the decision sample sits at index ``ff.cursor``."""
    return np.convolve(ff.tap_array, ch.tap_array)


def design_mmse_ffe(ch: Channel, mod: Modulation, sigma: float, n_taps: int,
                    cursor: int | None = None, unbiased: bool = False) -> FfeTaps:
    """Wiener FFE targeting a unit pulse at ``cursor``.

    With ``unbiased`` the taps are rescaled so the equalized main cursor is one,
    which is what a fixed-threshold slicer wants.
    """
    if n_taps < 1:
        raise ValueError("n_taps must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if cursor is None:
        cursor = default_cursor(ch, n_taps)
    if not 0 <= cursor < n_taps:
        raise ValueError(f"cursor {cursor} outside 0..{n_taps - 1}")
    w = _mmse(ch, mod, sigma, n_taps, cursor, 0)
    if unbiased:
        w = w / np.convolve(w, ch.tap_array)[cursor]
    return FfeTaps(tuple(w), cursor)


def design_ffe_dfe(ch: Channel, mod: Modulation, sigma: float, n_ff: int, n_fb: int,
                   cursor: int | None = None, unbiased: bool = False) -> DfeConfig:
    if n_ff < 1 or n_fb < 0:
        raise ValueError("need n_ff >= 1 and n_fb >= 0")
    if n_fb == 0:
        return DfeConfig(design_mmse_ffe(ch, mod, sigma, n_ff, cursor, unbiased), ())
    if cursor is None:
        cursor = default_cursor(ch, n_ff)
    w = _mmse(ch, mod, sigma, n_ff, cursor, n_fb)
    g = np.convolve(w, ch.tap_array)
    if unbiased:
        w = w / g[cursor]
        g = g / g[cursor]
    post = np.zeros(n_fb)
    avail = g[cursor + 1: cursor + 1 + n_fb]
    post[: len(avail)] = avail
    return DfeConfig(FfeTaps(tuple(w), cursor), tuple(post))


def ffe_apply(taps: FfeTaps, x) -> np.ndarray:
    x = _samples(x)
    r = np.convolve(x, taps.tap_array)
    c = taps.cursor
    out = np.zeros(len(x))
    seg = r[c: c + len(x)]
    out[: len(seg)] = seg
    return out


def dfe_run(cfg: DfeConfig, x, mod: Modulation,
            force: dict | None = None) -> SymbolStream:
    """Sequential FFE + decision feedback + nearest-level slicer.

    ``force`` maps positions to decisions that override the slicer, used to
    inject errors when studying error propagation.
    """
    y = ffe_apply(cfg.ff, x)
    fb = cfg.fb
    if not fb:
        dec = mod.slice(y)
        if force:
            for t, v in force.items():
                dec[t] = v
        return SymbolStream(dec)
    levels = mod.levels
    m = mod.order
    half = (m - 1) / 2.0
    n_fb = len(fb)
    past = [0.0] * n_fb  # most recent first; amplitude 0 before stream start
    out = np.empty(len(y), dtype=np.int64)
    force = force or {}
    for t, v in enumerate(y.tolist()):
        for k in range(n_fb):
            v -= fb[k] * past[k]
        if t in force:
            d = force[t]
        else:
            pos = (v + 1.0) * half
            d = min(max(math.ceil(pos - 0.5), 0), m - 1)
        out[t] = d
        past.insert(0, levels[d])
        past.pop()
    return SymbolStream(out)


def format_taps(header: int, taps) -> str:
    return "\n".join([str(int(header))] + [repr(float(t)) for t in taps]) + "\n"


def save_ffe(taps: FfeTaps, path) -> None:
    Path(path).write_text(format_taps(taps.cursor, taps.taps))


def load_ffe(path) -> FfeTaps:
    from .signal_model import parse_channel
    parsed = parse_channel(Path(path).read_text())
    return FfeTaps(parsed.taps, parsed.pre_cursors)


def save_dfe(cfg: DfeConfig, path) -> None:
    """Feed-forward taps followed by feedback taps; header line 1 = cursor, line 2 = fb count."""
    body = [str(cfg.ff.cursor), str(len(cfg.fb))]
    body += [repr(float(t)) for t in cfg.ff.taps + cfg.fb]
    Path(path).write_text("\n".join(body) + "\n")


def load_dfe(path) -> DfeConfig:
    vals = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    vals = [v for v in vals if v]
    cursor, n_fb = int(vals[0]), int(vals[1])
    taps = [float(v) for v in vals[2:]]
    n_ff = len(taps) - n_fb
    return DfeConfig(FfeTaps(tuple(taps[:n_ff]), cursor), tuple(taps[n_ff:]))
