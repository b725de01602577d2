"""Iterative global magnitude pruning with masked fine-tuning."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .signal_model import Channel, Modulation, sigma_for_snr
from .trainer import TrainConfig, sample_windows, train, window_ber

log = logging.getLogger(__name__)


def _flat(model):
    """Concatenated |w| and mask over prunable tensors, in ``model.prunable`` order."""
    mags = np.concatenate([np.abs(model.params[k]).ravel() for k in model.prunable])
    mask = np.concatenate([model.mask[k].ravel() for k in model.prunable])
    return mags, mask


def _set_flat_mask(model, mask: np.ndarray) -> None:
    pos = 0
    for k in model.prunable:
        n = model.params[k].size
        model.mask[k] = mask[pos: pos + n].reshape(model.params[k].shape).copy()
        pos += n
    model.apply_mask()


def prunable_count(model) -> int:
    return sum(model.params[k].size for k in model.prunable)


def global_sparsity(model) -> float:
    _, mask = _flat(model)
    return 1.0 - mask.sum() / mask.size


def prune_step(model, fraction: float, schedule: str = "geometric"):
    """Mask the smallest-magnitude unmasked weights, globally across tensors.

    ``geometric`` removes ``floor(fraction * remaining)``; ``linear`` removes
    ``floor(fraction * total)``.  Equal magnitudes are taken in flat-index order.
    Returns the model (modified in place).
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    mags, mask = _flat(model)
    alive = np.flatnonzero(mask)
    if schedule == "geometric":
        count = int(np.floor(fraction * len(alive)))
    elif schedule == "linear":
        count = min(int(np.floor(fraction * mask.size)), len(alive))
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    if count == 0:
        warnings.warn("nothing left to prune", stacklevel=2)
        return model
    order = np.argsort(mags[alive], kind="stable")
    mask = mask.copy()
    mask[alive[order[:count]]] = False
    _set_flat_mask(model, mask)
    return model


def layer_sparsity(model) -> np.ndarray:
    """Masked fraction per layer group, left to right (stages, then head)."""
    out = []
    for _, members in model.prune_groups():
        masked = total = 0
        for k, s in members:
            m = model.mask[k] if s is None else model.mask[k][s]
            masked += m.size - int(m.sum())
            total += m.size
        out.append(masked / total)
    return np.array(out)


def layer_sizes(model) -> np.ndarray:
    sizes = []
    for _, members in model.prune_groups():
        sizes.append(sum((model.mask[k] if s is None else model.mask[k][s]).size
                         for k, s in members))
    return np.array(sizes)


@dataclass
class PruneIteration:
    iteration: int
    global_sparsity: float
    layer_sparsity: np.ndarray
    ber: float
    normalized_ber: float
    active_params: int


@dataclass
class PruneReport:
    baseline_ber: float
    total_params: int
    layer_labels: list
    iterations: list = field(default_factory=list)

    @property
    def param_reduction(self) -> float:
        if not self.iterations:
            return 0.0
        return 1.0 - self.iterations[-1].active_params / self.total_params

    def layer_csv(self) -> str:
        lines = ["iteration,global_sparsity,layer_index,layer_sparsity"]
        for it in self.iterations:
            for i, v in enumerate(it.layer_sparsity):
                lines.append(f"{it.iteration},{float(it.global_sparsity)!r},{i},{float(v)!r}")
        return "\n".join(lines) + "\n"

    def ber_csv(self) -> str:
        lines = ["iteration,global_sparsity,normalized_ber"]
        lines.append("0,0.0,1.0")
        for it in self.iterations:
            lines.append(f"{it.iteration},{float(it.global_sparsity)!r},{float(it.normalized_ber)!r}")
        return "\n".join(lines) + "\n"


def iterative_prune(model, train_cfg: TrainConfig, ch: Channel, mod: Modulation,
                    target_sparsity: float = 0.5, finetune_batches: int = 500,
                    fraction: float = 0.10, schedule: str = "geometric",
                    eval_windows: int | None = None):
    """Prune/fine-tune until the global sparsity reaches ``target_sparsity``.

    BER after each iteration is measured on an independent held-out stream and
    normalised by the unpruned BER on the same stream.
    """
    if not 0 < target_sparsity < 1:
        raise ValueError("target_sparsity must be in (0, 1)")
    model = model.copy()
    sigma = sigma_for_snr(ch, mod, train_cfg.snr_db)
    T, D = model.T, model.cfg.D
    n_eval = eval_windows or train_cfg.valid_symbols
    held_out = sample_windows(ch, mod, sigma, T, D, n_eval, train_cfg.seed, ("prune-test",))
    valid = sample_windows(ch, mod, sigma, T, D, train_cfg.valid_symbols, train_cfg.seed,
                           ("prune-valid",))

    def measure(m):
        e, b = window_ber(m, *held_out, mod)
        return e / b

    base = measure(model)
    report = PruneReport(base, model.n_params(), [lbl for lbl, _ in model.prune_groups()])
    it = 0
    while global_sparsity(model) < target_sparsity:
        it += 1
        before = global_sparsity(model)
        prune_step(model, fraction, schedule)
        if global_sparsity(model) == before:
            break
        if finetune_batches > 0:
            res = train(model, train_cfg, ch, mod, n_batches=finetune_batches,
                        stream=f"finetune-{it}", valid_data=valid)
            model = res.params
        ber = measure(model)
        report.iterations.append(PruneIteration(
            it, global_sparsity(model), layer_sparsity(model), ber,
            ber / base if base > 0 else float("inf"), model.n_active()))
        log.info("prune iter %d sparsity %.3f ber %.3e (x%.2f)", it,
                 global_sparsity(model), ber, report.iterations[-1].normalized_ber)
    return model, report
