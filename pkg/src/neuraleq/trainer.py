"""Single-epoch streaming training, Adam, and Monte-Carlo BER evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .signal_model import (Channel, Modulation, ObservedStream, add_awgn, apply_channel,
                           bit_errors, random_symbols, sigma_for_snr, window_matrix)

log = logging.getLogger(__name__)

Z95 = 1.959963984540054


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    batch_size: int = 8192
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    train_symbols: int = 20_000_000
    valid_symbols: int = 2_000_000
    test_symbols: int = 10_000_000
    snr_db: float = 17.0
    seed: int = 1
    valid_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("train_symbols", "valid_symbols", "test_symbols"):
            if getattr(self, name) < self.batch_size:
                raise ValueError(f"{name} must be at least batch_size")

    @property
    def n_batches(self) -> int:
        return self.train_symbols // self.batch_size


@dataclass
class BerPoint:
    snr_db: float
    equalizer_id: str
    bit_errors: int
    total_bits: int
    seed: int
    ci_low: float = 0.0
    ci_high: float = 0.0

    @property
    def ber(self) -> float:
        return self.bit_errors / self.total_bits if self.total_bits else 0.0

    @property
    def ci_halfwidth(self) -> float:
        return 0.5 * (self.ci_high - self.ci_low)


BER_CSV_HEADER = "snr_db,equalizer,bit_errors,total_bits,ber,ci_low,ci_high,seed"


def ber_csv_row(p: BerPoint) -> str:
    return (f"{float(p.snr_db)!r},{p.equalizer_id},{p.bit_errors},{p.total_bits},"
            f"{float(p.ber)!r},{float(p.ci_low)!r},{float(p.ci_high)!r},{p.seed}")


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    phat = k / n
    denom = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    # the bounds are exact at the extremes; avoid round-off leaking past them
    lo = 0.0 if k == 0 else max(0.0, center - half)
    hi = 1.0 if k == n else min(1.0, center + half)
    return lo, hi


def ce_loss(probabilities, label: int) -> float:
    p = np.asarray(probabilities, dtype=float)
    if not 0 <= label < len(p):
        raise ValueError(f"label {label} outside 0..{len(p) - 1}")
    return float(-math.log(max(p[label], 1e-30)))


# -- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              mask: dict | None = None, prunable=()) -> None:
    """In-place Adam update; masked entries of ``prunable`` tensors stay zero."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {k!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        if mask is not None and k in prunable:
            g = g * mask[k]
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        if mask is not None and k in prunable:
            params[k] *= mask[k]


# -- data ------------------------------------------------------------------

def sample_windows(ch: Channel, mod: Modulation, sigma: float, T: int, D: int,
                   n_windows: int, seed: int, stream) -> tuple[np.ndarray, np.ndarray]:
    """Fresh windows from an independent substream, past the channel warm-up."""
    warm = len(ch)
    off = D - 1 - ch.pre_cursors
    key = tuple(stream) if isinstance(stream, (tuple, list)) else (stream,)
    z = random_symbols(warm + n_windows + T - 1, mod, seed, stream=key + ("sym",)).indices
    x = add_awgn(apply_channel(z, mod, ch), sigma, seed, stream=key + ("noise",)).samples
    wins = window_matrix(x[warm:], T)[:n_windows]
    labels = z[warm + off: warm + off + n_windows]
    return wins, labels


def window_ber(model, wins, labels, mod: Modulation, chunk: int = 32768) -> tuple[int, int]:
    errs = 0
    for i in range(0, len(labels), chunk):
        dec = np.argmax(model.predict_proba(wins[i: i + chunk]), axis=1)
        errs += bit_errors(labels[i: i + chunk], dec, mod)[0]
    return errs, len(labels) * mod.bits_per_symbol


@dataclass
class TrainResult:
    params: object
    valid_ber: float
    trace: list  # (step, loss, valid_ber or None)
    steps: int


def _state_arrays(model, adam: AdamState, best, best_ber, trace, step):
    out = {"step": np.array(step), "adam_t": np.array(adam.t),
           "best_ber": np.array(best_ber)}
    for k, v in model.params.items():
        out["p/" + k] = v
        out["mask/" + k] = model.mask[k]
        out["best/" + k] = best.params[k]
        out["bestmask/" + k] = best.mask[k]
    for k in adam.m:
        out["m/" + k] = adam.m[k]
        out["v/" + k] = adam.v[k]
    tr = np.array([(s, l, np.nan if vb is None else vb) for s, l, vb in trace]).reshape(-1, 3)
    out["trace"] = tr
    return out


def save_train_state(path, model, adam, best, best_ber, trace, step) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **_state_arrays(model, adam, best, best_ber, trace, step))
    tmp.replace(path)


def load_train_state(path, model, adam: AdamState):
    with np.load(path) as f:
        best = model.copy()
        for k in model.params:
            model.params[k] = f["p/" + k].copy()
            model.mask[k] = f["mask/" + k].copy()
            best.params[k] = f["best/" + k].copy()
            best.mask[k] = f["bestmask/" + k].copy()
        adam.t = int(f["adam_t"])
        adam.m = {k[2:]: f[k].copy() for k in f.files if k.startswith("m/")}
        adam.v = {k[2:]: f[k].copy() for k in f.files if k.startswith("v/")}
        trace = [(int(s), float(l), None if np.isnan(vb) else float(vb))
                 for s, l, vb in f["trace"]]
        return best, float(f["best_ber"]), trace, int(f["step"])


def train(model, train_cfg: TrainConfig, ch: Channel, mod: Modulation,
          n_batches: int | None = None, stream: str = "train",
          state_path=None, resume: bool = False, stop_after: int | None = None,
          valid_data=None) -> TrainResult:
    """Train ``model`` in place on freshly generated windows, one Adam step per batch.

    Batch ``k`` is drawn from substream ``(seed, stream, k)`` so no window is
    ever reused and a resumed run replays exactly.  Returns the parameters with
    the best validation BER seen.  ``stop_after`` ends the run early after that
    many total steps (leaving ``state_path`` ready for a resume).
    """
    T, model_D = model.T, model.cfg.D
    sigma = sigma_for_snr(ch, mod, train_cfg.snr_db)
    total = train_cfg.n_batches if n_batches is None else n_batches
    if valid_data is None:
        valid_data = sample_windows(ch, mod, sigma, T, model_D, train_cfg.valid_symbols,
                                    train_cfg.seed, ("valid",))
    adam = AdamState(train_cfg.beta1, train_cfg.beta2, train_cfg.epsilon)
    trace: list = []
    step = 0
    if resume and state_path is not None and Path(state_path).exists():
        best, best_ber, trace, step = load_train_state(state_path, model, adam)
        log.info("resumed at step %d", step)
    else:
        best = model.copy()
        best_ber = math.inf
    last_good = model.copy()
    while step < total:
        if stop_after is not None and step >= stop_after:
            break
        X, y = sample_windows(ch, mod, sigma, T, model_D, train_cfg.batch_size,
                              train_cfg.seed, (stream, step))
        loss, grads = model.loss_and_grads(X, y)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}", last_good)
        adam_step(model.params, grads, adam, train_cfg.learning_rate,
                  model.mask, model.prunable)
        step += 1
        vb = None
        if step % train_cfg.valid_every == 0 or step == total:
            e, b = window_ber(model, *valid_data, mod)
            vb = e / b
            if vb < best_ber:
                best_ber = vb
                best = model.copy()
            last_good = model.copy()
            log.info("step %d loss %.5f valid_ber %.3e", step, loss, vb)
            if state_path is not None:
                save_train_state(state_path, model, adam, best, best_ber, trace + [(step, loss, vb)], step)
        trace.append((step, loss, vb))
    return TrainResult(best, best_ber, trace, step)


def trace_csv(trace) -> str:
    lines = ["step,loss,valid_ber"]
    for s, l, vb in trace:
        lines.append(f"{s},{float(l)!r},{'' if vb is None else repr(float(vb))}")
    return "\n".join(lines) + "\n"


# -- BER evaluation --------------------------------------------------------

def _as_decisions(result, n: int):
    if isinstance(result, tuple):
        dec, valid = result
    else:
        dec, valid = result, np.ones(n, dtype=bool)
    dec = np.asarray(getattr(dec, "indices", dec))
    return dec, np.asarray(valid, dtype=bool)


def eval_shard(equalizer, ch: Channel, mod: Modulation, sigma: float, n_symbols: int,
               seed: int, shard: int) -> tuple[int, int]:
    """Bit errors on one independent sub-stream, excluding warm-up and tail."""
    warm = len(ch)
    n = n_symbols + 2 * warm
    z = random_symbols(n, mod, seed, stream=("eval", shard, "sym")).indices
    obs = add_awgn(apply_channel(z, mod, ch), sigma, seed, stream=("eval", shard, "noise"))
    dec, valid = _as_decisions(equalizer(obs), n)
    keep = valid.copy()
    keep[:warm] = False
    keep[n - warm:] = False
    return bit_errors(z[keep], dec[keep], mod)


def evaluate_ber(equalizer, ch: Channel, mod: Modulation, snr_db: float, n_symbols: int,
                 seed: int, equalizer_id: str = "eq", shard_size: int = 1 << 20) -> BerPoint:
    """Monte-Carlo BER of ``equalizer`` (ObservedStream -> decisions[, valid]).

    The symbol budget is split into shards of at most ``shard_size`` symbols,
    each an independent seeded sub-stream; counts are summed in shard order.
    """
    if n_symbols < 1000:
        raise ValueError("n_symbols must be at least 1000")
    sigma = sigma_for_snr(ch, mod, snr_db)
    errs = bits = 0
    n_shards = -(-n_symbols // shard_size)
    for i in range(n_shards):
        n_i = min(shard_size, n_symbols - i * shard_size)
        e, b = eval_shard(equalizer, ch, mod, sigma, n_i, seed, i)
        errs += e
        bits += b
    lo, hi = wilson_interval(errs, bits)
    return BerPoint(float(snr_db), equalizer_id, errs, bits, int(seed), lo, hi)


def config_dict(cfg) -> dict:
    return asdict(cfg)
