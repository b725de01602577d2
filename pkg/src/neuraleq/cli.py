"""Command-line driver: ``neuraleq <command> [--config FILE] [--set section.key=value]``."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .config import ConfigError, RunConfig
from .harness import (EqSpec, SkewSpec, SweepSpec, degradation_ratios, dfe_equalizer,
                      grid_search_width, neural_equalizer, nyquist_loss_db,
                      robustness_experiment, run_sweep, synth_channel)
from .hmm_fb import CapacityError
from .neural_eq import (MlpBaselineConfig, NeuralEqConfig, init_params, load_checkpoint,
                        save_checkpoint)
from .pruning import iterative_prune
from .signal_model import (Channel, Modulation, format_channel, load_channel, parse_channel,
                           sigma_for_snr)
from .trainer import BER_CSV_HEADER, TrainConfig, ber_csv_row, trace_csv, train

log = logging.getLogger("neuraleq")


class RunError(RuntimeError):
    pass


class Run:
    """Output directory with a lock, atomic artifact writes and a manifest."""

    def __init__(self, out: Path, command: str, cfg: RunConfig):
        self.out = Path(out)
        self.command = command
        self.cfg = cfg
        self.artifacts: list[Path] = []
        self.extra: dict = {}

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.lock = self.out / ".lock"
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunError(f"output directory {self.out} is locked by another run") from None
        os.close(fd)
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is not None:
                for p in self.artifacts:
                    with contextlib.suppress(FileNotFoundError):
                        p.unlink()
            else:
                self._manifest()
        finally:
            with contextlib.suppress(FileNotFoundError):
                self.lock.unlink()
        return False

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, p)
        return p

    def _manifest(self):
        hashes = {}
        for p in self.artifacts:
            if p.exists():
                hashes[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg["run"]["seed"],
            "config": self.cfg.to_text(),
            "artifacts": hashes,
            **self.extra,
        }
        tmp = self.out / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.out / "manifest.json")


# -- config -> objects -----------------------------------------------------

def channel_from(cfg: RunConfig) -> Channel:
    c = cfg["channel"]
    if c["file"]:
        path = Path(c["file"])
        if path.exists():
            return load_channel(path)
        bundled = resources.files("neuraleq").joinpath("data", c["file"])
        if bundled.is_file():
            return parse_channel(bundled.read_text())
        raise RunError(f"channel file not found: {path}")
    return Channel(tuple(c["taps"]), c["pre_cursors"])


def mod_from(cfg: RunConfig) -> Modulation:
    return Modulation.from_name(cfg["channel"]["modulation"])


def train_cfg_from(cfg: RunConfig, snr_db: float) -> TrainConfig:
    t = cfg["train"]
    snr = float(t["snr_db"]) if t["snr_db"] is not None else snr_db
    return TrainConfig(t["batch_size"], t["learning_rate"], t["beta1"], t["beta2"], t["epsilon"],
                       t["train_symbols"], t["valid_symbols"], t["test_symbols"], snr,
                       cfg["run"]["seed"], t["valid_every"])


def neural_cfg_from(cfg: RunConfig, mod: Modulation) -> NeuralEqConfig:
    n = cfg["neuraleq"]
    return NeuralEqConfig(n["T"], n["D"], n["N"], mod.order)


def roster_from(cfg: RunConfig) -> list:
    out = []
    for name in cfg["sweep"]["roster"]:
        try:
            kind = name.lower()
            if kind == "ffe":
                out.append(EqSpec("ffe", "ffe", {"taps": cfg["ffe"]["taps"],
                                                 "unbiased": cfg["ffe"]["unbiased"]}))
            elif kind in ("ffe+dfe", "dfe"):
                d = cfg["dfe"]
                out.append(EqSpec("ffe+dfe", "ffe+dfe", dict(d)))
            elif kind == "fb":
                out.append(EqSpec("fb", "fb", dict(cfg["fb"])))
            else:
                out.append(EqSpec(kind))
        except ValueError as exc:
            raise ConfigError(f"invalid roster entry {name!r}: {exc}") from None
    return out


def _neural_model(cfg, ch, mod, snr_db):
    path = cfg["neuraleq"]["checkpoint"]
    if path:
        model = load_checkpoint(path)
        log.info("loaded %s", path)
        return model
    tc = train_cfg_from(cfg, snr_db)
    return train(init_params(neural_cfg_from(cfg, mod), tc.seed), tc, ch, mod).params


# -- commands ----------------------------------------------------------------

def cmd_gen_channel(args) -> int:
    ch = synth_channel(args.loss_db, args.taps, args.pre)
    text = f"# synthetic channel, Nyquist loss {nyquist_loss_db(ch):.4f} dB\n" + format_channel(ch)
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, out)
    print(f"wrote {out} ({len(ch)} taps, {nyquist_loss_db(ch):.3f} dB)")
    return 0


def cmd_train(cfg: RunConfig, run: Run, args) -> int:
    ch, mod = channel_from(cfg), mod_from(cfg)
    snr = float(np.median(cfg["sweep"]["snr"]))
    tc = train_cfg_from(cfg, snr)
    model = init_params(neural_cfg_from(cfg, mod), tc.seed)
    state = run.out / "train_state.npz"
    stop = cfg["train"]["stop_after"]
    res = train(model, tc, ch, mod, state_path=state, resume=args.resume,
                stop_after=int(stop) if stop else None)
    run.write_text("trace.csv", trace_csv(res.trace))
    if res.steps < tc.n_batches:
        print(f"stopped at step {res.steps}/{tc.n_batches}; rerun with --resume")
        run.extra["stopped_at"] = res.steps
        return 0
    save_checkpoint(res.params, run.path("neuraleq.neq"))
    run.extra["valid_ber"] = res.valid_ber
    run.extra["train_snr_db"] = tc.snr_db
    print(f"trained {res.steps} steps at {tc.snr_db:g} dB, valid BER {res.valid_ber:.3e}")
    return 0


def cmd_sweep(cfg: RunConfig, run: Run, args) -> int:
    ch, mod = channel_from(cfg), mod_from(cfg)
    roster = roster_from(cfg)
    snrs = cfg["sweep"]["snr"]
    models = {}
    train_snr = float(np.median(snrs))
    for eq in roster:
        if eq.kind == "neuraleq":
            models[eq.label] = _neural_model(cfg, ch, mod, train_snr)
    tc = train_cfg_from(cfg, train_snr)
    spec = SweepSpec(ch, mod, snrs, roster, cfg["sweep"]["symbols"], cfg["run"]["seed"],
                     train=tc, neural=neural_cfg_from(cfg, mod),
                     mlp=MlpBaselineConfig(tuple(cfg["mlp"]["hidden"]), cfg["neuraleq"]["T"],
                                           mod.order, cfg["neuraleq"]["D"]),
                     models=models)
    res = run_sweep(spec)
    for label, reason in res.skipped.items():
        print(f"warning: {label} skipped: {reason}", file=sys.stderr)
    run.extra["skipped"] = res.skipped
    rows = [BER_CSV_HEADER] + [ber_csv_row(p) for p in res.points]
    run.write_text("ber.csv", "\n".join(rows) + "\n")
    plotting.plot_ber_curves(res.points, run.path("ber.svg"), title=f"{mod}")
    print(f"wrote {len(res.points)} BER points to {run.out / 'ber.csv'}")
    return 0


def cmd_prune(cfg: RunConfig, run: Run, args) -> int:
    ch, mod = channel_from(cfg), mod_from(cfg)
    snr = float(np.median(cfg["sweep"]["snr"]))
    tc = train_cfg_from(cfg, snr)
    model = _neural_model(cfg, ch, mod, tc.snr_db)
    p = cfg["prune"]
    pruned, report = iterative_prune(
        model, tc, ch, mod, p["target_sparsity"], p["finetune_batches"], p["fraction"],
        p["schedule"], int(p["eval_windows"]) if p["eval_windows"] else None)
    run.write_text("prune_layers.csv", report.layer_csv())
    run.write_text("prune_ber.csv", report.ber_csv())
    save_checkpoint(pruned, run.path("pruned.neq"))
    plotting.plot_layer_sparsity(report, run.path("prune_layers.svg"))
    plotting.plot_normalized_ber(report, run.path("prune_ber.svg"))
    run.extra["param_reduction"] = report.param_reduction
    run.extra["baseline_ber"] = report.baseline_ber
    last = report.iterations[-1] if report.iterations else None
    if last:
        print(f"sparsity {last.global_sparsity:.3f}, normalized BER {last.normalized_ber:.3f}, "
              f"params -{report.param_reduction:.1%}")
    return 0


def cmd_robustness(cfg: RunConfig, run: Run, args) -> int:
    ch, mod = channel_from(cfg), mod_from(cfg)
    r = cfg["robustness"]
    model = _neural_model(cfg, ch, mod, r["snr_db"])
    sigma = sigma_for_snr(ch, mod, r["snr_db"])
    d = cfg["dfe"]
    eqs = {
        "ffe+dfe": dfe_equalizer(ch, mod, d["ff_taps"], d["fb_taps"], d["unbiased"], design_sigma=sigma),
        "neuraleq": neural_equalizer(model, ch, mod),
    }
    spec = SkewSpec(ch, r["p_values"], r["trials"], cfg["run"]["seed"])
    rows = robustness_experiment(spec, eqs, mod, r["snr_db"], r["symbols"])
    lines = ["p,equalizer,mean_ber,std_ber,trials"]
    lines += [f"{float(x.p)!r},{x.equalizer},{float(x.mean_ber)!r},{float(x.std_ber)!r},"
              f"{len(x.bers)}" for x in rows]
    run.write_text("robustness.csv", "\n".join(lines) + "\n")
    plotting.plot_robustness(rows, run.path("robustness.svg"))
    run.extra["degradation"] = {k: {str(p): v for p, v in d.items()}
                                for k, d in degradation_ratios(rows).items()}
    run.extra["protocol"] = ("each trial draws a fresh skewed channel per p; all equalizers share "
                             "the channel and data stream; noise sigma fixed by the base channel SNR")
    return 0


def cmd_gridsearch(cfg: RunConfig, run: Run, args) -> int:
    ch, mod = channel_from(cfg), mod_from(cfg)
    g = cfg["gridsearch"]
    tc = train_cfg_from(cfg, g["snr_db"])
    n = cfg["neuraleq"]
    best, table = grid_search_width(ch, mod, g["snr_db"], g["candidates"], tc, n["T"], n["D"])
    lines = ["N,valid_ber,param_count"] + [f"{a},{float(b)!r},{c}" for a, b, c in table]
    run.write_text("gridsearch.csv", "\n".join(lines) + "\n")
    run.extra["best_N"] = best
    print(f"best N = {best}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "prune": cmd_prune,
    "robustness": cmd_robustness,
    "gridsearch": cmd_gridsearch,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neuraleq", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, default=Path("runs") / name)
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key")
        if name == "train":
            p.add_argument("--resume", action="store_true")
    g = sub.add_parser("gen-channel")
    g.add_argument("--loss-db", type=float, required=True)
    g.add_argument("--taps", type=int, default=12)
    g.add_argument("--pre", type=int, default=2)
    g.add_argument("--out", type=Path, required=True)
    return ap


def _config_path(path: Path | None):
    """A config path on disk, else one of the bundled example configs by name."""
    if path is None or path.exists():
        return path
    bundled = resources.files("neuraleq").joinpath("data", path.name)
    if path.parent == Path(".") and bundled.is_file():
        return bundled
    raise RunError(f"config file not found: {path}")


def _thread_limit(cfg: RunConfig | None):
    n = os.environ.get("NEQ_THREADS")
    limit = int(n) if n else (cfg["run"]["threads"] if cfg else 0)
    if limit > 0:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=limit)
    return contextlib.nullcontext()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-channel":
            return cmd_gen_channel(args)
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        cfg = RunConfig.load(_config_path(args.config), overrides)
        with _thread_limit(cfg), Run(args.out, args.command, cfg) as run:
            return COMMANDS[args.command](cfg, run, args)
    except (ConfigError, RunError, CapacityError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
