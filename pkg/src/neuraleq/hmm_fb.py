"""Forward-backward (BCJR) MAP symbol detection for ISI channels.

A hidden state is the tuple of the last ``len(taps)`` symbols.  State ids are
base-``order`` integers whose digit ``i`` is the symbol sent ``i`` steps ago, so
the successor of state ``s`` on new symbol ``k`` is ``(s * order + k) % n_states``.
Recursions are renormalised every step; per-step log scale factors are kept
so that unscaled quantities can be recovered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .signal_model import Channel, Modulation, ObservedStream, SymbolStream, _samples

DEFAULT_STATE_CAP = 2 ** 20


class CapacityError(ValueError):
    """The trellis would exceed the configured state budget."""


class NumericalFailure(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class Hmm:
    mod: Modulation
    channel: Channel
    sigma: float
    outputs: np.ndarray  # noiseless output per state

    @property
    def n_states(self) -> int:
        return len(self.outputs)

    @property
    def memory(self) -> int:
        return len(self.channel)

    def history(self, state: int) -> tuple:
        """Symbol indices (newest first) encoded in ``state``."""
        m = self.mod.order
        return tuple((state // m ** i) % m for i in range(self.memory))

    def successors(self, state: int) -> list[int]:
        m = self.mod.order
        return [(state * m + k) % self.n_states for k in range(m)]

    def newest_symbol(self) -> np.ndarray:
        return np.arange(self.n_states) % self.mod.order


def build_hmm(ch: Channel, mod: Modulation, sigma: float,
              state_cap: int = DEFAULT_STATE_CAP) -> Hmm:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    L = len(ch)
    m = mod.order
    n_states = m ** L
    if n_states > state_cap:
        raise CapacityError(
            f"{mod} over {L} taps needs {n_states} states, cap is {state_cap}")
    outputs = np.zeros(n_states)
    ids = np.arange(n_states)
    levels = mod.level_array
    for i, tap in enumerate(ch.taps):
        outputs += tap * levels[(ids // m ** i) % m]
    return Hmm(mod, ch, float(sigma), outputs)


def emission(x: float, state_output: float, sigma: float) -> float:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = (x - state_output) / sigma
    return math.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi * sigma * sigma)


def _log_emissions(hmm: Hmm, x: np.ndarray) -> np.ndarray:
    d = (x[..., None] - hmm.outputs) / hmm.sigma
    return -0.5 * d * d - 0.5 * math.log(2.0 * math.pi * hmm.sigma ** 2)


def _shifted_emissions(hmm: Hmm, x: np.ndarray):
    """Emission densities divided by their per-step maximum, and log of that max."""
    le = _log_emissions(hmm, x)
    peak = le.max(axis=-1, keepdims=True)
    return np.exp(le - peak), peak[..., 0]


def _predict(hmm: Hmm, a: np.ndarray) -> np.ndarray:
    # sum over the oldest digit, then fan out over the new symbol
    m = hmm.mod.order
    folded = a.reshape(a.shape[:-1] + (m, hmm.n_states // m)).sum(axis=-2)
    return np.repeat(folded, m, axis=-1) / m


def _retrodict(hmm: Hmm, b: np.ndarray) -> np.ndarray:
    # beta^{t-1}_j = 1/m * sum_k b_{(j*m+k) mod S}
    m = hmm.mod.order
    s = hmm.n_states
    grouped = b.reshape(b.shape[:-1] + (s // m, m)).sum(axis=-1) / m
    return np.tile(grouped, m)


def _check(total: np.ndarray, where: str, t: int):
    if not np.all(np.isfinite(total)) or np.any(total <= 0):
        raise NumericalFailure(f"{where} probability underflow at step {t}")


def forward(hmm: Hmm, x) -> tuple[np.ndarray, np.ndarray]:
    """Scaled forward pass.

    ``x`` may be 1-D or a batch ``(B, T)``.  Returns ``(alphas, log_scales)``
    where each alpha row sums to one and the unscaled alpha at step t equals
    ``alphas[t] * exp(cumsum(log_scales)[t])``.
    """
    x = _samples(x)
    if x.shape[-1] == 0:
        raise ValueError("empty observation sequence")
    em, peak = _shifted_emissions(hmm, x)
    T = x.shape[-1]
    alphas = np.empty(x.shape + (hmm.n_states,))
    log_scales = np.empty(x.shape)
    a = np.full(x.shape[:-1] + (hmm.n_states,), 1.0 / hmm.n_states)
    for t in range(T):
        if t:
            a = _predict(hmm, a)
        a = a * em[..., t, :]
        c = a.sum(axis=-1)
        _check(c, "forward", t)
        a = a / c[..., None]
        alphas[..., t, :] = a
        log_scales[..., t] = np.log(c) + peak[..., t]
    return alphas, log_scales


def backward(hmm: Hmm, x) -> tuple[np.ndarray, np.ndarray]:
    """Scaled backward pass; last row is uniform (scaled all-ones)."""
    x = _samples(x)
    if x.shape[-1] == 0:
        raise ValueError("empty observation sequence")
    em, peak = _shifted_emissions(hmm, x)
    T = x.shape[-1]
    betas = np.empty(x.shape + (hmm.n_states,))
    log_scales = np.empty(x.shape)
    b = np.full(x.shape[:-1] + (hmm.n_states,), 1.0 / hmm.n_states)
    betas[..., T - 1, :] = b
    log_scales[..., T - 1] = math.log(hmm.n_states)
    for t in range(T - 1, 0, -1):
        b = _retrodict(hmm, b * em[..., t, :])
        c = b.sum(axis=-1)
        _check(c, "backward", t)
        b = b / c[..., None]
        betas[..., t - 1, :] = b
        log_scales[..., t - 1] = np.log(c) + peak[..., t]
    return betas, log_scales


def state_posteriors(hmm: Hmm, x) -> np.ndarray:
    alphas, _ = forward(hmm, x)
    betas, _ = backward(hmm, x)
    g = alphas * betas
    total = g.sum(axis=-1, keepdims=True)
    if not np.all(total > 0):
        raise NumericalFailure("alpha*beta vanished")
    return g / total


def _marginalize(hmm: Hmm, gamma: np.ndarray) -> np.ndarray:
    m = hmm.mod.order
    p = gamma.reshape(gamma.shape[:-1] + (hmm.n_states // m, m)).sum(axis=-2)
    return p / p.sum(axis=-1, keepdims=True)


def posterior_symbols(hmm: Hmm, x) -> np.ndarray:
    """Per-position posterior over the symbol entering the channel at that step."""
    return _marginalize(hmm, state_posteriors(hmm, x))


def default_overlap(ch: Channel) -> int:
    return max(4 * len(ch), 16)


def fb_decode(hmm: Hmm, x, block: int = 2048, overlap: int | None = None) -> SymbolStream:
    """MAP symbol decisions over overlapping blocks.

    Each block of ``block`` samples shares ``overlap`` samples with each
    neighbour; only the interior decisions are kept.  Blocks are decoded as a
    batch.
    """
    x = _samples(x)
    if overlap is None:
        overlap = default_overlap(hmm.channel)
    if overlap < len(hmm.channel):
        raise ValueError("overlap must be at least the channel length")
    if block <= 2 * overlap:
        raise ValueError("block must exceed twice the overlap")
    n = len(x)
    if n <= block:
        post = posterior_symbols(hmm, x)
        return SymbolStream(np.argmax(post, axis=-1))
    step = block - 2 * overlap
    n_blocks = -(-n // step)
    keep_start = np.arange(n_blocks) * step
    win_start = np.clip(keep_start - overlap, 0, n - block)
    # bound the per-batch alpha/beta buffers to roughly 16M floats each
    group = max(1, (1 << 24) // (block * hmm.n_states))
    out = np.empty(n, dtype=np.int64)
    for g0 in range(0, n_blocks, group):
        ks = np.arange(g0, min(g0 + group, n_blocks))
        post = posterior_symbols(hmm, x[win_start[ks, None] + np.arange(block)])
        for row, k in enumerate(ks):
            lo = keep_start[k]
            hi = min(lo + step, n)
            off = lo - win_start[k]
            out[lo:hi] = np.argmax(post[row, off: off + hi - lo], axis=-1)
    return SymbolStream(out)


def posteriors_to_csv(post: np.ndarray, path) -> None:
    with open(path, "w") as f:
        f.write("t,symbol,probability\n")
        for t, row in enumerate(post):
            for k, p in enumerate(row):
                f.write(f"{t},{k},{float(p)!r}\n")
