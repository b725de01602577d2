"""Experiment drivers: BER sweeps, ISI-skew robustness, width grid search."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import hmm_fb, linear_eq
from .neural_eq import (MlpBaselineConfig, NeuralEqConfig, init_mlp, init_params,
                        param_count, predict_windows)
from .signal_model import Channel, Modulation, ObservedStream, make_rng, sigma_for_snr
from .trainer import BerPoint, TrainConfig, evaluate_ber, train

log = logging.getLogger(__name__)

EQ_KINDS = ("slicer", "ffe", "ffe+dfe", "fb", "neuraleq", "mlp")


def derive_seed(seed: int, *keys) -> int:
    """Deterministic 63-bit child seed for ``(seed, *keys)``."""
    ints = [int(seed) & (2**64 - 1)] + [int(k) for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint64)[0] >> 1)


# -- equalizer adapters ----------------------------------------------------
# Each adapter is a callable ObservedStream -> (decisions, valid mask).

def slicer_equalizer(ch: Channel, mod: Modulation):
    pre = ch.pre_cursors

    def decide(obs: ObservedStream):
        x = obs.samples
        dec = mod.slice(np.concatenate([x[pre:], np.zeros(pre)]))
        valid = np.ones(len(x), dtype=bool)
        if pre:
            valid[-pre:] = False
        return dec, valid
    return decide


class _PerSigma:
    """Designs once per noise level against a fixed design channel."""

    def __init__(self, design):
        self.design = design
        self.cache = {}

    def get(self, sigma: float):
        if sigma not in self.cache:
            self.cache[sigma] = self.design(sigma)
        return self.cache[sigma]


def ffe_equalizer(ch: Channel, mod: Modulation, n_taps: int = 8, unbiased: bool = True,
                  design_sigma: float | None = None):
    designs = _PerSigma(lambda s: linear_eq.design_mmse_ffe(ch, mod, s, n_taps, unbiased=unbiased))

    def decide(obs: ObservedStream):
        taps = designs.get(obs.sigma if design_sigma is None else design_sigma)
        return mod.slice(linear_eq.ffe_apply(taps, obs.samples))
    return decide


def dfe_equalizer(ch: Channel, mod: Modulation, n_ff: int = 8, n_fb: int = 3,
                  unbiased: bool = True, design_sigma: float | None = None):
    designs = _PerSigma(lambda s: linear_eq.design_ffe_dfe(ch, mod, s, n_ff, n_fb, unbiased=unbiased))

    def decide(obs: ObservedStream):
        cfg = designs.get(obs.sigma if design_sigma is None else design_sigma)
        return linear_eq.dfe_run(cfg, obs.samples, mod)
    return decide


def fb_equalizer(ch: Channel, mod: Modulation, state_cap: int = hmm_fb.DEFAULT_STATE_CAP,
                 block: int = 2048, design_sigma: float | None = None):
    # fail early if the trellis is too large
    if mod.order ** len(ch) > state_cap:
        raise hmm_fb.CapacityError(
            f"{mod} over {len(ch)} taps needs {mod.order ** len(ch)} states, cap is {state_cap}")
    models = _PerSigma(lambda s: hmm_fb.build_hmm(ch, mod, s, state_cap))

    def decide(obs: ObservedStream):
        hmm = models.get(obs.sigma if design_sigma is None else design_sigma)
        return hmm_fb.fb_decode(hmm, obs.samples, block=block)
    return decide


def neural_equalizer(model, ch: Channel, mod: Modulation):
    T, D = model.T, model.cfg.D

    def decide(obs: ObservedStream):
        return predict_windows(model, obs.samples, T, D, ch.pre_cursors, mod)
    return decide


# -- sweeps ----------------------------------------------------------------

@dataclass
class EqSpec:
    kind: str
    label: str = ""
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EQ_KINDS:
            raise ValueError(f"unknown equalizer {self.kind!r}; expected one of {EQ_KINDS}")
        if not self.label:
            self.label = self.kind


@dataclass
class SweepSpec:
    channel: Channel
    mod: Modulation
    snrs: list
    roster: list
    symbols: int = 1_000_000
    seed: int = 1
    train: TrainConfig | None = None
    neural: NeuralEqConfig | None = None
    mlp: MlpBaselineConfig | None = None
    models: dict = field(default_factory=dict)  # label -> pretrained model

    def __post_init__(self):
        self.snrs = [float(s) for s in self.snrs]
        if any(b <= a for a, b in zip(self.snrs, self.snrs[1:])):
            raise ValueError("SNR list must be strictly increasing")
        if not self.roster:
            raise ValueError("roster must not be empty")

    @property
    def train_snr(self) -> float:
        return float(np.median(self.snrs))


@dataclass
class SweepResult:
    points: list
    skipped: dict
    models: dict

    def curve(self, label: str) -> list:
        return [p for p in self.points if p.equalizer_id == label]


def _train_model(kind, spec: SweepSpec):
    tc = spec.train or TrainConfig()
    tc = TrainConfig(**{**tc.__dict__, "snr_db": spec.train_snr})
    if kind == "neuraleq":
        cfg = spec.neural or NeuralEqConfig(mod_order=spec.mod.order)
        model = init_params(cfg, tc.seed)
    else:
        cfg = spec.mlp or MlpBaselineConfig(mod_order=spec.mod.order)
        model = init_mlp(cfg, tc.seed)
    log.info("training %s at %.2f dB", kind, tc.snr_db)
    return train(model, tc, spec.channel, spec.mod).params


def build_equalizer(eq: EqSpec, ch: Channel, mod: Modulation, model=None):
    o = eq.options
    if eq.kind == "slicer":
        return slicer_equalizer(ch, mod)
    if eq.kind == "ffe":
        return ffe_equalizer(ch, mod, int(o.get("taps", 8)), bool(o.get("unbiased", True)))
    if eq.kind == "ffe+dfe":
        return dfe_equalizer(ch, mod, int(o.get("ff_taps", 8)), int(o.get("fb_taps", 3)),
                             bool(o.get("unbiased", True)))
    if eq.kind == "fb":
        return fb_equalizer(ch, mod, int(o.get("state_cap", hmm_fb.DEFAULT_STATE_CAP)),
                            int(o.get("block", 2048)))
    return neural_equalizer(model, ch, mod)


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Evaluate every roster entry at every SNR with shared per-point seeds."""
    ch, mod = spec.channel, spec.mod
    eqs, skipped, models = {}, {}, dict(spec.models)
    for eq in spec.roster:
        if eq.kind in ("neuraleq", "mlp") and eq.label not in models:
            models[eq.label] = _train_model(eq.kind, spec)
        try:
            eqs[eq.label] = build_equalizer(eq, ch, mod, models.get(eq.label))
        except hmm_fb.CapacityError as exc:
            log.warning("skipping %s: %s", eq.label, exc)
            skipped[eq.label] = str(exc)
    points = []
    for i, snr in enumerate(spec.snrs):
        seed = derive_seed(spec.seed, i)
        for label, fn in eqs.items():
            pt = evaluate_ber(fn, ch, mod, snr, spec.symbols, seed, label)
            log.info("%6.2f dB %-10s ber %.3e", snr, label, pt.ber)
            points.append(pt)
    return SweepResult(points, skipped, models)


def snr_at_ber(points, target: float) -> float:
    """Log-linear interpolation of the SNR where a BER curve crosses ``target``."""
    pts = sorted(((p.snr_db, p.ber) for p in points if p.ber > 0))
    for (s0, b0), (s1, b1) in zip(pts, pts[1:]):
        if b0 >= target >= b1:
            if b0 == b1:
                return s0
            f = (math.log(b0) - math.log(target)) / (math.log(b0) - math.log(b1))
            return s0 + f * (s1 - s0)
    raise ValueError(f"BER {target} not bracketed by the curve")


# -- channel variation ------------------------------------------------------

def skew_channel(ch: Channel, p: float, seed: int) -> Channel:
    """Add i.i.d. N(0, (max|h| * p)^2) to every tap."""
    if p < 0:
        raise ValueError("p must be non-negative")
    if p == 0:
        return ch
    h = ch.tap_array
    s = float(np.max(np.abs(h))) * p
    rng = make_rng(seed, "skew")
    return Channel(tuple(h + s * rng.standard_normal(len(h))), ch.pre_cursors)


@dataclass
class SkewSpec:
    channel: Channel
    p_values: list = field(default_factory=lambda: [0.0, 0.01, 0.02])
    trials: int = 20
    seed: int = 1

    def __post_init__(self):
        if any(p < 0 for p in self.p_values):
            raise ValueError("p values must be non-negative")


@dataclass
class RobustnessRow:
    p: float
    equalizer: str
    mean_ber: float
    std_ber: float
    bers: list


def robustness_experiment(spec: SkewSpec, equalizers: dict, mod: Modulation, snr_db: float,
                          n_symbols: int = 200_000) -> list:
    """Evaluate base-channel equalizers on independently skewed test channels.

    Every equalizer sees the same skewed channel and data stream per trial.
    Noise is set from the base channel's SNR accounting so skew alone changes
    the test condition.
    """
    sigma = sigma_for_snr(spec.channel, mod, snr_db)
    rows = []
    for pi, p in enumerate(spec.p_values):
        per_eq = {label: [] for label in equalizers}
        for trial in range(spec.trials):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                test_ch = skew_channel(spec.channel, p, derive_seed(spec.seed, pi, trial))
            seed = derive_seed(spec.seed, 1000 + trial)
            # the skewed channel's own SNR differs; keep the base noise level
            test_snr = 10 * math.log10(
                float(np.sum(test_ch.tap_array ** 2)) * mod.mean_power / sigma ** 2)
            for label, fn in equalizers.items():
                pt = evaluate_ber(fn, test_ch, mod, test_snr, n_symbols, seed, label)
                per_eq[label].append(pt.ber)
        for label, bers in per_eq.items():
            rows.append(RobustnessRow(p, label, float(np.mean(bers)), float(np.std(bers)), bers))
            log.info("p=%.3f %-10s mean ber %.3e", p, label, rows[-1].mean_ber)
    return rows


def degradation_ratios(rows) -> dict:
    """(equalizer -> {p: mean_ber(p) / mean_ber(0)})."""
    base = {r.equalizer: r.mean_ber for r in rows if r.p == 0}
    out: dict = {}
    for r in rows:
        b = base.get(r.equalizer)
        out.setdefault(r.equalizer, {})[r.p] = r.mean_ber / b if b else float("inf")
    return out


# -- width search ----------------------------------------------------------

def grid_search_width(ch: Channel, mod: Modulation, snr_db: float, candidates,
                      train_cfg: TrainConfig | None = None, T: int = 12, D: int = 4):
    """Train one NeuralEQ per width; best = lowest validation BER, ties to smaller N."""
    if not candidates:
        raise ValueError("candidates must not be empty")
    tc = train_cfg or TrainConfig()
    tc = TrainConfig(**{**tc.__dict__, "snr_db": snr_db})
    table = []
    for n in sorted(set(int(c) for c in candidates)):
        cfg = NeuralEqConfig(T, D, n, mod.order)
        try:
            res = train(init_params(cfg, tc.seed), tc, ch, mod)
        except Exception as exc:  # keep the partial table
            log.error("width %d failed: %s", n, exc)
            table.append((n, float("nan"), param_count(cfg)))
            continue
        table.append((n, res.valid_ber, param_count(cfg)))
    ok = [row for row in table if not math.isnan(row[1])]
    if not ok:
        raise RuntimeError("every candidate failed to train")
    best = min(ok, key=lambda r: (r[1], r[0]))
    return best[0], table


# -- synthetic lossy channels ----------------------------------------------

def nyquist_loss_db(ch: Channel) -> float:
    """Loss at half the symbol rate relative to DC, in dB."""
    h = ch.tap_array
    dc = abs(h.sum())
    ny = abs(np.sum(h * (-1.0) ** np.arange(len(h))))
    return 20 * math.log10(dc / ny)


def _decay_profile(rho: float, n_taps: int, pre: int) -> np.ndarray:
    k_pre = np.arange(pre, 0, -1)
    k_post = np.arange(1, n_taps - pre)
    return np.concatenate([0.25 * rho ** k_pre, [1.0], rho ** k_post])


def synth_channel(loss_db: float, n_taps: int, pre_cursors: int = 2, tol_db: float = 1e-3) -> Channel:
    """Exponentially decaying tap profile whose Nyquist loss equals ``loss_db``."""
    if loss_db <= 0:
        raise ValueError("loss_db must be positive")
    if n_taps < 2 or not 0 <= pre_cursors < n_taps:
        raise ValueError("need n_taps >= 2 and 0 <= pre_cursors < n_taps")

    def loss(rho):
        return nyquist_loss_db(Channel(tuple(_decay_profile(rho, n_taps, pre_cursors)), pre_cursors))

    lo, hi = 0.0, 0.999
    if loss(hi) < loss_db:
        raise ValueError(f"{loss_db} dB loss is not reachable with {n_taps} taps "
                         f"(max {loss(hi):.2f} dB)")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if loss(mid) < loss_db:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    rho = 0.5 * (lo + hi)
    ch = Channel(tuple(_decay_profile(rho, n_taps, pre_cursors)), pre_cursors)
    if abs(nyquist_loss_db(ch) - loss_db) > tol_db:
        raise ValueError(f"could not match {loss_db} dB (got {nyquist_loss_db(ch):.3f})")
    return ch
